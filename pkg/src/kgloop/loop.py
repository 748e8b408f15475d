"""Closed-loop orchestration over time-sliced corpora.

Each period runs one pass of the loop: train the detector on the cumulative
training slices, evaluate on the held-out users fixed at loop start, harvest
co-mention evidence from the new slice, refine the graph model under the
penalty weights, and on every n-th period mine candidate surfaces, put them
through the review gate, and retrain the graph loss on whatever the
reviewers admitted. Importance caches are rebuilt at the end of the period
and feed the next period's evidence weighting.

The three objective terms are optimized blockwise in that order; the loss
weights enter as learning-rate multipliers, which for plain gradient steps
is the same thing. Reported objectives keep the terms separate so the
accounting can be checked independently.

A period either commits completely or not at all: work happens on a forked
copy of the state and the caller's state is replaced only on success. All
cross-period persistence goes through per-period snapshots; a run restarted
from its last snapshot continues exactly as if it had never stopped.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import detector as det
from . import expand as ex
from . import importance as imp
from . import kge
from . import refine as rf
from .attention import AttentionParams
from .detector import DetectorConfig, DetectorParams, UserDocument
from .graph import (
    KnowledgeGraph,
    ZeroVectorError,
    load_graph,
    save_graph,
)
from .importance import MctsConfig, NoPathError

FLOAT_FMT = kge.FLOAT_FMT

MODES = ("full", "no-expansion", "no-refine", "no-importance")

METRICS_HEADER = "period\tnodes\tedges\tprecision\trecall\tf1"
ACCOUNTING_HEADER = "period\tloss_llm\tloss_refine\tloss_kg\tobjective"
IMPORTANCE_HEADER = "entity\tw_f"

_SPLIT_SALT = 9973
_PRETRAIN_SALT = 0


@dataclass
class LoopConfig:
    lam: float = 1.0
    gamma_loss: float = 1.0
    mu: float = 1.0
    expansion_interval: int = 2
    negatives: int = 2
    top_m: int = 3
    tau: float = 1.0
    holdout_fraction: float = 0.125
    refine_lr: float = 0.05
    refine_steps: int = 20
    seed: int = 0
    mcts: MctsConfig = field(default_factory=MctsConfig)
    train: kge.TrainConfig = field(default_factory=lambda: kge.TrainConfig(
        dim=16, conv_rows=4, conv_cols=4, conv_filters=3, conv_kernel=2,
        learning_rate=0.05, negatives_per_positive=2, epochs=10, batch_size=32,
    ))
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    expand: ex.ExpandConfig = field(default_factory=ex.ExpandConfig)

    def validate(self) -> None:
        if self.gamma_loss <= 0.0 or self.mu <= 0.0:
            raise ValueError("loss weights must be positive")
        if self.expansion_interval < 1:
            raise ValueError("expansion interval must be at least 1")
        if self.negatives < 1 or self.top_m < 1:
            raise ValueError("negatives and top_m must be at least 1")
        if self.tau <= 0.0:
            raise ValueError("temperature must be positive")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout fraction outside (0, 1)")
        if self.refine_lr <= 0.0 or self.refine_steps < 0:
            raise ValueError("bad refinement schedule")
        if self.detector.epochs < 2:
            raise ValueError("detector needs both phases per period")
        self.mcts.validate()
        self.train.validate()
        self.detector.validate()
        self.expand.validate()


@dataclass
class PeriodMetrics:
    period: int
    nodes: int
    edges: int
    precision: float
    recall: float
    f1: float
    importance_snapshot: dict[str, float]


@dataclass
class PeriodObjective:
    period: int
    loss_llm: float
    loss_refine: float
    loss_kg: float | None
    objective: float


@dataclass
class LoopState:
    kg: KnowledgeGraph
    model: kge.GraphModel
    det_params: DetectorParams | None
    queue: ex.ReviewQueue
    train_docs: list[UserDocument]
    holdout: list[UserDocument]
    period: int = 0
    metrics: list[PeriodMetrics] = field(default_factory=list)
    objectives: list[PeriodObjective] = field(default_factory=list)
    weights: dict[str, float] | None = None
    new_candidates: list[ex.CandidateTriplet] = field(default_factory=list)

    def fork(self) -> "LoopState":
        return LoopState(
            kg=self.kg.copy(),
            model=_copy_model(self.model),
            det_params=_copy_detector(self.det_params),
            queue=_copy_queue(self.queue),
            train_docs=list(self.train_docs),
            holdout=self.holdout,
            period=self.period,
            metrics=list(self.metrics),
            objectives=list(self.objectives),
            weights=dict(self.weights) if self.weights is not None else None,
        )


def _copy_model(model: kge.GraphModel) -> kge.GraphModel:
    return kge.GraphModel(
        emb=kge.EmbeddingTable(
            model.emb.dim,
            {k: v.copy() for k, v in model.emb.vectors.items()},
            {k: v.copy() for k, v in model.emb.relations.items()},
        ),
        conv=kge.ConvEParams(
            model.conv.filters.copy(), model.conv.projection.copy(),
            model.conv.rows, model.conv.cols,
        ),
        attention=AttentionParams(
            model.attention.relation_proj.copy(),
            model.attention.entity_proj.copy(),
            model.attention.relation_query.copy(),
            model.attention.entity_query.copy(),
            model.attention.leak,
        ),
    )


def _copy_detector(params: DetectorParams | None) -> DetectorParams | None:
    if params is None:
        return None
    fresh = replace(
        params,
        token_embeddings=params.token_embeddings.copy(),
        tagger_w1=params.tagger_w1.copy(), tagger_b1=params.tagger_b1.copy(),
        tagger_w2=params.tagger_w2.copy(), tagger_b2=params.tagger_b2.copy(),
        fusion_w3=params.fusion_w3.copy(),
        cls_w4=params.cls_w4.copy(), cls_b3=params.cls_b3.copy(),
        cls_w5=params.cls_w5.copy(), cls_b4=params.cls_b4.copy(),
        index=dict(params.index),
    )
    return fresh


def _copy_queue(queue: ex.ReviewQueue) -> ex.ReviewQueue:
    fresh = ex.ReviewQueue()
    fresh.candidates = {
        cid: replace(c, provenance=list(c.provenance))
        for cid, c in queue.candidates.items()
    }
    fresh.votes = {cid: dict(v) for cid, v in queue.votes.items()}
    fresh.decisions = list(queue.decisions)
    fresh.applied = set(queue.applied)
    return fresh


def _rng(cfg: LoopConfig, period: int, role: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, period, role)))


# -- corpus slicing ---------------------------------------------------------


def split_corpus(
    corpus: list[UserDocument], cfg: LoopConfig
) -> tuple[dict[int, list[UserDocument]], list[UserDocument]]:
    """Per-period training slices plus the held-out set, both fixed by seed.

    The held-out users are drawn per period so every period is represented;
    the same corpus, config, and seed always produce the same split.
    """
    by_period: dict[int, list[UserDocument]] = {}
    for doc in corpus:
        by_period.setdefault(doc.period, []).append(doc)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _SPLIT_SALT)))
    slices: dict[int, list[UserDocument]] = {}
    holdout: list[UserDocument] = []
    for period in sorted(by_period):
        docs = sorted(by_period[period], key=lambda d: d.user_id)
        k = round(len(docs) * cfg.holdout_fraction)
        held = set(rng.choice(len(docs), size=k, replace=False).tolist())
        slices[period] = [d for i, d in enumerate(docs) if i not in held]
        holdout.extend(d for i, d in enumerate(docs) if i in held)
    return slices, holdout


def active_triplets(kg: KnowledgeGraph) -> list[tuple[str, str, str]]:
    return sorted(k for k, t in kg.triplets.items() if t.status == "active")


# -- the loop ---------------------------------------------------------------


def init_state(
    kg: KnowledgeGraph, holdout: list[UserDocument], cfg: LoopConfig
) -> LoopState:
    """Pretrain the graph bundle on the seed graph and wrap it in a state."""
    cfg.validate()
    model, _ = kge.pretrain(
        kg, active_triplets(kg), cfg.train, _rng(cfg, 0, _PRETRAIN_SALT)
    )
    return LoopState(
        kg=kg.copy(), model=model, det_params=None, queue=ex.ReviewQueue(),
        train_docs=[], holdout=list(holdout),
    )


def _importance_snapshot(
    state: LoopState, cfg: LoopConfig, period: int
) -> dict[str, float]:
    table = imp.build_transition_table(
        state.kg, state.model.emb.vectors, state.model.emb.relations,
        state.model.attention,
    )
    cache = imp.build_importance_cache(state.kg, table, cfg.mcts, period)
    effective = state.model.effective_vectors(state.kg)
    snapshot: dict[str, float] = {}
    for ent in state.kg.factor_entities():
        try:
            score = imp.entity_importance(
                ent.surface, effective[ent.entity_id], state.kg, effective,
                cache, cfg.top_m,
            )
            snapshot[ent.entity_id] = score.weight
        except (ZeroVectorError, NoPathError):
            snapshot[ent.entity_id] = 0.0
    return snapshot


def run_period(
    state: LoopState,
    slice_docs: list[UserDocument],
    cfg: LoopConfig,
    mode: str = "full",
    reviewer=None,
) -> tuple[LoopState, PeriodMetrics]:
    """One full pass of the loop; returns the committed successor state.

    The input state is never mutated: every change lands on a fork that the
    caller adopts only when the period finishes.
    """
    cfg.validate()
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    work = state.fork()
    period = state.period + 1
    kg, model = work.kg, work.model

    # detect on the cumulative slices, with last period's evidence weights
    work.train_docs.extend(slice_docs)
    weights = None if mode == "no-importance" else work.weights
    det_cfg = replace(cfg.detector, lam=cfg.lam)
    graph_vectors = model.effective_vectors(kg)
    work.det_params, _, det_series = det.train_joint(
        work.train_docs, kg, graph_vectors, det_cfg, _rng(cfg, period, 1),
        params=work.det_params, weights=weights,
    )
    loss_llm = det_series[-1]

    # evaluate on the fixed held-out users
    ev, _ = det.evaluate(work.holdout, kg, work.det_params, graph_vectors, weights)

    # harvest this slice's co-mention evidence
    harvested = rf.harvest(slice_docs, kg)
    rf.apply_harvest(kg, harvested)

    # refine under frozen penalty weights; gamma scales the step
    loss_refine = 0.0
    if mode != "no-refine":
        pos_keys = sorted(harvested.positive)
        neg_keys = sorted(k for k in harvested.negative if k in kg.triplets)
        if (pos_keys or neg_keys) and cfg.refine_steps > 0:
            refine_cfg = rf.RefineConfig(
                tau=cfg.tau,
                learning_rate=cfg.refine_lr * cfg.gamma_loss,
                steps=cfg.refine_steps,
            )
            _, refine_losses, _ = rf.refine(
                kg, pos_keys, neg_keys, model, refine_cfg, _rng(cfg, period, 2)
            )
            loss_refine = refine_losses[-1]

    # expansion round: mine, review, admit, retrain the graph loss
    loss_kg = None
    new_candidates: list[ex.CandidateTriplet] = []
    if mode != "no-expansion" and period % cfg.expansion_interval == 0:
        mined = det.mine_new_surfaces(
            slice_docs, kg, cfg.expand.min_count, cfg.expand.max_len
        )
        new_candidates = ex.generate_candidates(
            slice_docs, kg, work.det_params, period, cfg.expand, mined
        )
        work.queue.add_candidates(new_candidates)
        if reviewer is not None:
            for decision in reviewer(work.queue):
                work.queue.submit(decision)
        ex.apply_decisions(
            kg, model, work.queue.drain_decided(), _rng(cfg, period, 3), period
        )
        kg_cfg = replace(
            cfg.train,
            learning_rate=cfg.train.learning_rate * cfg.mu,
            negatives_per_positive=cfg.negatives,
        )
        _, kg_losses = kge.pretrain(
            kg, active_triplets(kg), kg_cfg, _rng(cfg, period, 4), model=model
        )
        loss_kg = kg_losses[-1]

    # rebuild importance for the next period's weighting
    if mode == "no-importance":
        snapshot = {e.entity_id: 1.0 for e in kg.factor_entities()}
        work.weights = None
    else:
        snapshot = _importance_snapshot(work, cfg, period)
        work.weights = dict(snapshot)

    nodes, edges = kg.stats()
    metrics = PeriodMetrics(
        period, nodes, edges, ev.precision, ev.recall, ev.f1, snapshot
    )
    objective = loss_llm + cfg.gamma_loss * loss_refine
    if loss_kg is not None:
        objective += cfg.mu * loss_kg
    work.period = period
    work.metrics.append(metrics)
    work.objectives.append(
        PeriodObjective(period, loss_llm, loss_refine, loss_kg, objective)
    )
    work.new_candidates = new_candidates
    return work, metrics


def ablation(
    corpus: list[UserDocument],
    kg: KnowledgeGraph,
    cfg: LoopConfig,
    mode: str,
    reviewer=None,
) -> list[PeriodMetrics]:
    """The loop with one pathway disabled; full mode is the baseline."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    return run_loop(corpus, kg, cfg, mode=mode, reviewer=reviewer).metrics


def importance_trajectory(
    history: list[PeriodMetrics], entity: str
) -> list[tuple[int, float | None]]:
    """Per-period importance of one entity, with gaps where it is absent."""
    key = entity if any(
        entity in m.importance_snapshot for m in history
    ) else entity.replace(" ", "_")
    if not any(key in m.importance_snapshot for m in history):
        raise ValueError(f"entity {entity!r} never appears in the history")
    return [
        (m.period, m.importance_snapshot.get(key)) for m in history
    ]


# -- persistence ------------------------------------------------------------


def _period_dir(outdir: str, period: int) -> str:
    return os.path.join(outdir, f"period_{period:04d}")


def _metrics_line(m: PeriodMetrics) -> str:
    return "\t".join((
        str(m.period), str(m.nodes), str(m.edges),
        FLOAT_FMT(m.precision), FLOAT_FMT(m.recall), FLOAT_FMT(m.f1),
    ))


def _objective_line(o: PeriodObjective) -> str:
    kg_part = "" if o.loss_kg is None else FLOAT_FMT(o.loss_kg)
    return "\t".join((
        str(o.period), FLOAT_FMT(o.loss_llm), FLOAT_FMT(o.loss_refine),
        kg_part, FLOAT_FMT(o.objective),
    ))


def _append_row(path: str, header: str, line: str) -> None:
    fresh = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as fh:
        if fresh:
            fh.write(header + "\n")
        fh.write(line + "\n")


def _write_importance(outdir: str, m: PeriodMetrics) -> None:
    rows = sorted(m.importance_snapshot.items(), key=lambda kv: (-kv[1], kv[0]))
    path = os.path.join(outdir, f"importance_{m.period:04d}.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(IMPORTANCE_HEADER + "\n")
        for eid, w in rows:
            fh.write(f"{eid}\t{FLOAT_FMT(w)}\n")


def _truncate_rows(path: str, header: str, period: int) -> None:
    if not os.path.exists(path):
        return
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    kept = [line for line in lines[1:] if int(line.split("\t")[0]) <= period]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join([header] + kept) + "\n")


def commit_period(outdir: str, state: LoopState, m: PeriodMetrics) -> None:
    """Write the period's snapshot; row files are appended after the
    snapshot directory is complete so the snapshot is the commit point."""
    pdir = _period_dir(outdir, m.period)
    os.makedirs(pdir, exist_ok=True)
    if state.new_candidates:
        # stored as generated; the decision log replays their review
        pristine = [
            replace(c, review_state="pending") for c in state.new_candidates
        ]
        ex.save_candidates(
            os.path.join(outdir, f"candidates_{m.period:04d}.txt"),
            pristine, m.period,
        )
    logged = {
        (d.candidate_id, d.reviewer_id) for d in _logged_decisions(outdir)
    }
    fresh = [
        d for d in state.queue.decisions
        if (d.candidate_id, d.reviewer_id) not in logged
    ]
    if fresh:
        ex.append_decisions(os.path.join(outdir, "decisions.log"), fresh)
    fresh_applied = sorted(state.queue.applied - _logged_applied(outdir))
    if fresh_applied:
        with open(os.path.join(outdir, "applied.log"), "a", encoding="utf-8") as fh:
            for cid in fresh_applied:
                fh.write(cid + "\n")
    save_graph(state.kg, os.path.join(pdir, "graph.txt"))
    kge.save_model(state.model, os.path.join(pdir, "embeddings.txt"))
    det.save_detector(state.det_params, os.path.join(pdir, "detector.txt"))
    _write_importance(outdir, m)
    _append_row(
        os.path.join(outdir, "metrics.tsv"), METRICS_HEADER, _metrics_line(m)
    )
    _append_row(
        os.path.join(outdir, "accounting.tsv"), ACCOUNTING_HEADER,
        _objective_line(state.objectives[-1]),
    )


def _logged_applied(outdir: str) -> set[str]:
    path = os.path.join(outdir, "applied.log")
    if not os.path.exists(path):
        return set()
    with open(path, encoding="utf-8") as fh:
        return {line.strip() for line in fh if line.strip()}


def _logged_decisions(outdir: str) -> list[ex.ReviewDecision]:
    path = os.path.join(outdir, "decisions.log")
    if not os.path.exists(path):
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(ex.parse_decision(line))
    return out


def latest_period(outdir: str) -> int:
    """Highest period with a complete snapshot directory, 0 if none."""
    best = 0
    if not os.path.isdir(outdir):
        return 0
    for name in os.listdir(outdir):
        if not name.startswith("period_"):
            continue
        pdir = os.path.join(outdir, name)
        files = ("graph.txt", "embeddings.txt", "detector.txt")
        if all(os.path.exists(os.path.join(pdir, f)) for f in files):
            best = max(best, int(name.split("_")[1]))
    return best


def _parse_metrics(outdir: str, upto: int) -> list[PeriodMetrics]:
    path = os.path.join(outdir, "metrics.tsv")
    out: list[PeriodMetrics] = []
    if not os.path.exists(path):
        return out
    with open(path, encoding="utf-8") as fh:
        rows = fh.read().splitlines()[1:]
    for row in rows:
        p, nodes, edges, prec, rec, f1 = row.split("\t")
        period = int(p)
        if period > upto:
            continue
        snapshot: dict[str, float] = {}
        ipath = os.path.join(outdir, f"importance_{period:04d}.tsv")
        if os.path.exists(ipath):
            with open(ipath, encoding="utf-8") as fh:
                for line in fh.read().splitlines()[1:]:
                    eid, w = line.split("\t")
                    snapshot[eid] = float(w)
        out.append(PeriodMetrics(
            period, int(nodes), int(edges),
            float(prec), float(rec), float(f1), snapshot,
        ))
    return out


def _parse_objectives(outdir: str, upto: int) -> list[PeriodObjective]:
    path = os.path.join(outdir, "accounting.tsv")
    out: list[PeriodObjective] = []
    if not os.path.exists(path):
        return out
    with open(path, encoding="utf-8") as fh:
        rows = fh.read().splitlines()[1:]
    for row in rows:
        p, llm, refi, kg_part, total = row.split("\t")
        if int(p) > upto:
            continue
        out.append(PeriodObjective(
            int(p), float(llm), float(refi),
            None if kg_part == "" else float(kg_part), float(total),
        ))
    return out


def load_review_queue(outdir: str, upto: int | None = None) -> ex.ReviewQueue:
    """Queue rebuilt from committed candidate files plus the decision log.

    Verdicts already folded into the graph are tracked in applied.log, so
    decisions recorded between runs stay drainable at the next expansion
    round instead of being treated as spent.
    """
    queue = ex.ReviewQueue()
    if not os.path.isdir(outdir):
        return queue
    for name in sorted(os.listdir(outdir)):
        if not (name.startswith("candidates_") and name.endswith(".txt")):
            continue
        if upto is not None and int(name[len("candidates_"):-len(".txt")]) > upto:
            continue
        cands, _ = ex.load_candidates(os.path.join(outdir, name))
        queue.add_candidates(cands)
    log = os.path.join(outdir, "decisions.log")
    if os.path.exists(log):
        with open(log, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                decision = ex.parse_decision(line)
                if upto is not None and decision.candidate_id not in queue.candidates:
                    continue  # belongs to a period newer than the snapshot
                queue.submit(decision)
    queue.applied = {
        cid for cid in _logged_applied(outdir) if cid in queue.candidates
    }
    return queue


def resume_state(
    outdir: str, corpus: list[UserDocument], cfg: LoopConfig, mode: str
) -> LoopState:
    """Rebuild the state committed by the last complete snapshot."""
    period = latest_period(outdir)
    if period == 0:
        raise ValueError(f"no snapshot to resume from in {outdir}")
    slices, holdout = split_corpus(corpus, cfg)
    pdir = _period_dir(outdir, period)
    kg = load_graph(os.path.join(pdir, "graph.txt"))
    model = kge.load_model(os.path.join(pdir, "embeddings.txt"))
    params = det.load_detector(os.path.join(pdir, "detector.txt"))
    queue = load_review_queue(outdir, upto=period)
    _truncate_rows(os.path.join(outdir, "metrics.tsv"), METRICS_HEADER, period)
    _truncate_rows(
        os.path.join(outdir, "accounting.tsv"), ACCOUNTING_HEADER, period
    )
    state = LoopState(
        kg=kg, model=model, det_params=params, queue=queue,
        train_docs=[d for p in sorted(slices) if p <= period for d in slices[p]],
        holdout=holdout, period=period,
        metrics=_parse_metrics(outdir, period),
        objectives=_parse_objectives(outdir, period),
    )
    if mode == "no-importance":
        state.weights = None
    elif state.metrics:
        state.weights = dict(state.metrics[-1].importance_snapshot)
    return state


def run_loop(
    corpus: list[UserDocument],
    kg: KnowledgeGraph,
    cfg: LoopConfig,
    mode: str = "full",
    reviewer=None,
    outdir: str | None = None,
    resume: bool = False,
    stop_on_pending: bool = False,
) -> LoopState:
    """Drive every period present in the corpus through the loop.

    With stop_on_pending the loop halts after committing a period that
    leaves candidates awaiting review, so an operator can decide them
    and resume; the next expansion round picks the verdicts up.
    """
    cfg.validate()
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    slices, holdout = split_corpus(corpus, cfg)
    if resume:
        if outdir is None:
            raise ValueError("resume needs an output directory")
        state = resume_state(outdir, corpus, cfg, mode)
    else:
        state = init_state(kg, holdout, cfg)
    for period in sorted(slices):
        if period <= state.period:
            continue
        state, metrics = run_period(state, slices[period], cfg, mode, reviewer)
        if outdir is not None:
            os.makedirs(outdir, exist_ok=True)
            commit_period(outdir, state, metrics)
        if stop_on_pending and state.queue.pending():
            break
    return state


def oracle_for(true_surfaces: set[str]):
    """Reviewer pair that admits exactly the configured true surfaces."""
    def reviewer(queue: ex.ReviewQueue) -> list[ex.ReviewDecision]:
        return ex.oracle_reviews(queue, true_surfaces)
    return reviewer
