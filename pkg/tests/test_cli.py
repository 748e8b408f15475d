"""Command line verbs driven through main() with captured output."""

import os

import pytest

import kgloop.cli as cli
import kgloop.config as cf
import kgloop.loop as lp
import kgloop.synth as sy

CFG_TEXT = """\
expansion_interval = 1
refine_steps = 4
top_m = 2
train.dim = 12
train.conv_rows = 4
train.conv_cols = 3
train.conv_filters = 2
train.conv_kernel = 2
train.epochs = 3
detector.token_dim = 12
detector.tagger_hidden = 8
detector.classifier_hidden = 4
detector.dropout_rate = 0.0
detector.learning_rate = 0.3
detector.epochs = 4
mcts.budget = 150
expand.novelty_threshold = 0.9
expand.min_count = 2
synth.users_per_period = 16
synth.posts_per_user = 3
synth.signal = hopeless:0.8:0.05, worthless:0.6:0.1
synth.common = tired:0.3
synth.emergent = doom scroll:2:0.9
synth.seed = 5
"""


@pytest.fixture()
def workdir(tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(CFG_TEXT)
    return tmp_path


def run_cli(*argv) -> int:
    return cli.main([str(a) for a in argv])


def test_init_writes_a_loadable_config_and_respects_force(workdir, capsys):
    path = workdir / "fresh.cfg"
    assert run_cli("init", "--config", path, "--seed", 7) == 0
    run = cf.load_config(str(path))
    assert run.loop.seed == 7
    assert run.synth.seed == 7
    assert run_cli("init", "--config", path) == 1
    assert "refusing" in capsys.readouterr().err
    assert run_cli("init", "--config", path, "--force") == 0


def test_synth_writes_a_corpus_for_the_requested_periods(workdir, capsys):
    out = workdir / "corpus.tsv"
    cfg = workdir / "run.cfg"
    assert run_cli("synth", "--config", cfg, "--out", out, "--periods", 3) == 0
    docs = sy.load_corpus(str(out))
    assert len(docs) == 48
    assert sorted({d.period for d in docs}) == [1, 2, 3]
    assert "48 users" in capsys.readouterr().out


def test_pretrain_saves_graph_and_embeddings(workdir, capsys):
    out = workdir / "pre"
    assert run_cli("pretrain", "--config", workdir / "run.cfg", "--out", out) == 0
    assert (out / "graph.txt").exists()
    assert (out / "embeddings.txt").exists()
    assert capsys.readouterr().out.startswith("graph\t")


def test_detect_prints_holdout_scores(workdir, capsys):
    cfg = workdir / "run.cfg"
    corpus = workdir / "corpus.tsv"
    run_cli("synth", "--config", cfg, "--out", corpus, "--periods", 2)
    capsys.readouterr()
    assert run_cli("detect", "--config", cfg, "--corpus", corpus) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "precision\trecall\tf1"
    scores = [float(v) for v in lines[1].split("\t")]
    assert all(0.0 <= s <= 1.0 for s in scores)


def test_run_loop_stops_for_review_and_resumes(workdir, capsys):
    cfg = workdir / "run.cfg"
    corpus = workdir / "corpus.tsv"
    rundir = workdir / "run"
    run_cli("synth", "--config", cfg, "--out", corpus, "--periods", 3)
    assert run_cli(
        "run-loop", "--config", cfg, "--corpus", corpus, "--run", rundir,
        "--review", "stop",
    ) == 0
    out = capsys.readouterr().out
    assert "await review" in out
    assert lp.latest_period(str(rundir)) == 1
    # deciding nothing still lets the loop continue on resume
    assert run_cli(
        "run-loop", "--config", cfg, "--corpus", corpus, "--run", rundir,
        "--review", "none", "--resume",
    ) == 0
    assert lp.latest_period(str(rundir)) == 3


def test_run_loop_oracle_needs_no_operator(workdir, capsys):
    cfg = workdir / "run.cfg"
    corpus = workdir / "corpus.tsv"
    rundir = workdir / "orun"
    run_cli("synth", "--config", cfg, "--out", corpus, "--periods", 2)
    assert run_cli(
        "run-loop", "--config", cfg, "--corpus", corpus, "--run", rundir,
        "--review", "oracle",
    ) == 0
    graph = (rundir / "period_0002" / "graph.txt").read_text()
    assert "doom_scroll" in graph


def test_step_verbs_advance_one_period_each(workdir, capsys):
    cfg = workdir / "run.cfg"
    corpus = workdir / "corpus.tsv"
    rundir = workdir / "steps"
    run_cli("synth", "--config", cfg, "--out", corpus, "--periods", 2)
    assert run_cli(
        "refine", "--config", cfg, "--corpus", corpus, "--run", rundir
    ) == 0
    assert lp.latest_period(str(rundir)) == 1
    assert not list(rundir.glob("candidates_*.txt"))
    assert run_cli(
        "expand", "--config", cfg, "--corpus", corpus, "--run", rundir,
        "--resume",
    ) == 0
    assert lp.latest_period(str(rundir)) == 2
    assert (rundir / "candidates_0002.txt").exists()
    capsys.readouterr()
    assert run_cli(
        "expand", "--config", cfg, "--corpus", corpus, "--run", rundir,
        "--resume",
    ) == 1
    assert "no periods left" in capsys.readouterr().err


def test_importance_lists_top_entities_and_trajectories(workdir, capsys):
    cfg = workdir / "run.cfg"
    corpus = workdir / "corpus.tsv"
    rundir = workdir / "irun"
    run_cli("synth", "--config", cfg, "--out", corpus, "--periods", 2)
    run_cli("run-loop", "--config", cfg, "--corpus", corpus, "--run", rundir,
            "--review", "oracle")
    capsys.readouterr()
    assert run_cli("importance", "--run", rundir, "--top", 3) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == lp.IMPORTANCE_HEADER
    assert len(out) == 4
    assert run_cli(
        "importance", "--run", rundir, "--entity", "doom scroll"
    ) == 0
    series = capsys.readouterr().out.splitlines()
    assert series[0] == "period\tw_f"
    assert series[1].startswith("1\t")
    assert run_cli("importance", "--run", rundir, "--entity", "nope") == 1
    assert "never appears" in capsys.readouterr().err


def test_report_matches_the_service_bundle(workdir, capsys):
    cfg = workdir / "run.cfg"
    corpus = workdir / "corpus.tsv"
    rundir = workdir / "rrun"
    run_cli("synth", "--config", cfg, "--out", corpus, "--periods", 2)
    run_cli("run-loop", "--config", cfg, "--corpus", corpus, "--run", rundir,
            "--review", "oracle")
    capsys.readouterr()
    assert run_cli("report", "--run", rundir) == 0
    printed = capsys.readouterr().out
    target = workdir / "report.txt"
    assert run_cli("report", "--run", rundir, "--out", target) == 0
    assert target.read_text() == printed
    assert printed.startswith(f"run\t{os.path.basename(rundir)}")


def test_errors_surface_as_exit_code_one(workdir, capsys):
    assert run_cli("synth", "--config", workdir / "absent.cfg",
                   "--out", workdir / "x.tsv") == 1
    assert "error:" in capsys.readouterr().err
    bad = workdir / "bad.cfg"
    bad.write_text("no_such_key = 3\n")
    assert run_cli("synth", "--config", bad, "--out", workdir / "x.tsv") == 1
    assert "unknown config key" in capsys.readouterr().err


def test_every_verb_accepts_config_and_seed():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions
               if isinstance(a, type(parser._subparsers._group_actions[0])))
    for verb, p in sub.choices.items():
        opts = {s for a in p._actions for s in a.option_strings}
        assert "--config" in opts, verb
        assert "--seed" in opts, verb
    assert set(sub.choices) == {
        "init", "pretrain", "detect", "refine", "expand", "run-loop",
        "importance", "synth", "serve", "report",
    }
