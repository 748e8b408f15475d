"""Command line front end.

Every verb is a thin client over the package API: load a config, call the
relevant functions, print tab separated rows. State lives in run
directories; the serve verb exposes the same directories over HTTP.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import config as cf
from . import detector as det
from . import kge
from . import loop as lp
from . import service as sv
from . import synth as sy
from .graph import save_graph

REVIEW_MODES = ("stop", "oracle", "none")


def _load_run_config(args) -> cf.RunConfig:
    if args.config is None:
        run = cf.default_config()
    else:
        run = cf.load_config(args.config)
    if args.seed is not None:
        run = cf.with_seed(run, args.seed)
    return run


def _corpus(args) -> list:
    return sy.load_corpus(args.corpus)


def _truth(run: cf.RunConfig) -> set[str]:
    return set(run.synth.known_surfaces()) | {s for s, _, _ in run.synth.emergent}


def _print_metrics(rows, out=sys.stdout) -> None:
    print(lp.METRICS_HEADER, file=out)
    for m in rows:
        print(lp._metrics_line(m), file=out)


def cmd_init(args) -> int:
    if os.path.exists(args.config) and not args.force:
        print(f"refusing to overwrite {args.config}", file=sys.stderr)
        return 1
    run = cf.default_config()
    if args.seed is not None:
        run = cf.with_seed(run, args.seed)
    cf.save_config(run, args.config)
    print(f"wrote {args.config}")
    return 0


def cmd_synth(args) -> int:
    run = _load_run_config(args)
    docs = []
    for period in range(1, args.periods + 1):
        slice_docs, _ = sy.synth_corpus(run.synth, period)
        docs.extend(slice_docs)
    sy.save_corpus(args.out, docs)
    print(f"wrote {len(docs)} users over {args.periods} periods to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    run = _load_run_config(args)
    kg = sy.seed_graph_for(run.synth)
    rng = lp._rng(run.loop, 0, lp._PRETRAIN_SALT)
    model, losses = kge.pretrain(kg, lp.active_triplets(kg), run.loop.train, rng)
    os.makedirs(args.out, exist_ok=True)
    save_graph(kg, os.path.join(args.out, "graph.txt"))
    kge.save_model(model, os.path.join(args.out, "embeddings.txt"))
    nodes, edges = kg.stats()
    print(f"graph\t{nodes} nodes\t{edges} edges")
    print(f"loss\t{kge.FLOAT_FMT(losses[0])} -> {kge.FLOAT_FMT(losses[-1])}")
    return 0


def cmd_detect(args) -> int:
    run = _load_run_config(args)
    corpus = _corpus(args)
    kg = sy.seed_graph_for(run.synth)
    slices, holdout = lp.split_corpus(corpus, run.loop)
    train_docs = [d for p in sorted(slices) for d in slices[p]]
    state = lp.init_state(kg, holdout, run.loop)
    vectors = state.model.effective_vectors(state.kg)
    det_cfg = replace(run.loop.detector, lam=run.loop.lam)
    params, _, _ = det.train_joint(
        train_docs, state.kg, vectors, det_cfg, lp._rng(run.loop, 1, 1)
    )
    ev, _ = det.evaluate(holdout, state.kg, params, vectors)
    print("precision\trecall\tf1")
    print("\t".join(kge.FLOAT_FMT(v) for v in (ev.precision, ev.recall, ev.f1)))
    return 0


def _step_loop(args, mode: str, cfg_hook=None) -> int:
    """Advance a run directory by exactly one period."""
    run = _load_run_config(args)
    loop_cfg = cfg_hook(run.loop) if cfg_hook else run.loop
    corpus = _corpus(args)
    slices, holdout = lp.split_corpus(corpus, loop_cfg)
    if args.resume:
        state = lp.resume_state(args.run, corpus, loop_cfg, mode)
    else:
        state = lp.init_state(sy.seed_graph_for(run.synth), holdout, loop_cfg)
    upcoming = [p for p in sorted(slices) if p > state.period]
    if not upcoming:
        print("no periods left to run", file=sys.stderr)
        return 1
    period = upcoming[0]
    state, metrics = lp.run_period(state, slices[period], loop_cfg, mode)
    os.makedirs(args.run, exist_ok=True)
    lp.commit_period(args.run, state, metrics)
    _print_metrics([metrics])
    pending = state.queue.pending()
    if pending:
        print(f"{len(pending)} candidates awaiting review")
    return 0


def cmd_refine(args) -> int:
    return _step_loop(args, "no-expansion")


def cmd_expand(args) -> int:
    # the step verb always mines, whatever cadence the config asks for
    return _step_loop(args, "full",
                      cfg_hook=lambda c: replace(c, expansion_interval=1))


def cmd_run_loop(args) -> int:
    run = _load_run_config(args)
    corpus = _corpus(args)
    kg = sy.seed_graph_for(run.synth)
    reviewer = lp.oracle_for(_truth(run)) if args.review == "oracle" else None
    state = lp.run_loop(
        corpus, kg, run.loop, mode=args.mode, reviewer=reviewer,
        outdir=args.run, resume=args.resume,
        stop_on_pending=args.review == "stop",
    )
    _print_metrics(state.metrics)
    pending = state.queue.pending()
    if pending:
        print(f"halted after period {state.period}: {len(pending)} candidates "
              f"await review; decide them (serve) and rerun with --resume")
    return 0


def cmd_importance(args) -> int:
    period = lp.latest_period(args.run)
    if period == 0:
        print(f"no committed periods in {args.run}", file=sys.stderr)
        return 1
    history = lp._parse_metrics(args.run, period)
    if args.entity:
        series = lp.importance_trajectory(history, args.entity)
        print("period\tw_f")
        for p, w in series:
            print(f"{p}\t{'-' if w is None else kge.FLOAT_FMT(w)}")
        return 0
    snapshot = history[-1].importance_snapshot
    rows = sorted(snapshot.items(), key=lambda kv: (-kv[1], kv[0]))
    print(lp.IMPORTANCE_HEADER)
    for eid, w in rows[:args.top]:
        print(f"{eid}\t{kge.FLOAT_FMT(w)}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run(sv.create_app(args.run), host=args.host, port=args.port)
    return 0


def cmd_report(args) -> int:
    text = sv.build_report(args.run)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--seed", type=int, help="override every seed field")

    parser = argparse.ArgumentParser(
        prog="kgloop",
        description="closed-loop knowledge graph learning",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("init", parents=[common], help="write a default config")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("synth", parents=[common], help="generate a corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--periods", type=int, default=5)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common],
                       help="embed the seed graph")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("detect", parents=[common],
                       help="train and score the detector once")
    p.add_argument("--corpus", required=True)
    p.set_defaults(fn=cmd_detect)

    for verb, fn, blurb in (
        ("refine", cmd_refine, "advance one period without mining"),
        ("expand", cmd_expand, "advance one period with mining"),
    ):
        p = sub.add_parser(verb, parents=[common], help=blurb)
        p.add_argument("--corpus", required=True)
        p.add_argument("--run", required=True)
        p.add_argument("--resume", action="store_true")
        p.set_defaults(fn=fn)

    p = sub.add_parser("run-loop", parents=[common],
                       help="drive the full loop over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--mode", choices=lp.MODES, default="full")
    p.add_argument("--review", choices=REVIEW_MODES, default="stop")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_run_loop)

    p = sub.add_parser("importance", parents=[common],
                       help="inspect importance weights")
    p.add_argument("--run", required=True)
    p.add_argument("--entity")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(fn=cmd_importance)

    p = sub.add_parser("serve", parents=[common], help="start the review API")
    p.add_argument("--run", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("report", parents=[common],
                       help="print the run's committed metrics")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
