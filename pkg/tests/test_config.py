"""Flat key = value configuration parsing and round-trips."""

import pytest

import kgloop.config as cf


def test_empty_text_gives_defaults():
    run = cf.parse_config("")
    assert run == cf.default_config()


def test_scalar_keys_reach_their_bundles():
    run = cf.parse_config(
        "\n".join(
            (
                "gamma_loss = 2.5",
                "expansion_interval = 3",
                "mcts.budget = 500",
                "train.dim = 24",
                "train.conv_rows = 6",
                "detector.epochs = 8",
                "expand.min_count = 4",
                "synth.users_per_period = 64",
                "synth.depressed_fraction = 0.25",
            )
        )
    )
    assert run.loop.gamma_loss == 2.5
    assert run.loop.expansion_interval == 3
    assert run.loop.mcts.budget == 500
    assert run.loop.train.dim == 24
    assert run.loop.detector.epochs == 8
    assert run.loop.expand.min_count == 4
    assert run.synth.users_per_period == 64
    assert run.synth.depressed_fraction == 0.25


def test_comments_and_blank_lines_ignored():
    run = cf.parse_config(
        "# a run\n\nlam = 2.0  # detection emphasis\n   \ntau = 0.5\n"
    )
    assert run.loop.lam == 2.0
    assert run.loop.tau == 0.5


def test_entity_lists_parse_with_spaces_in_surfaces():
    run = cf.parse_config(
        "synth.signal = hopeless:0.8:0.05, keeps me up:0.5:0.1\n"
        "synth.common = tired:0.3\n"
        "synth.emergent = doom scroll:3:0.9\n"
        "synth.filler = today, really, just\n"
    )
    assert run.synth.signal == (
        ("hopeless", 0.8, 0.05), ("keeps me up", 0.5, 0.1)
    )
    assert run.synth.common == (("tired", 0.3),)
    assert run.synth.emergent == (("doom scroll", 3, 0.9),)
    assert run.synth.filler == ("today", "really", "just")


def test_bad_inputs_rejected():
    with pytest.raises(ValueError, match="expected key = value"):
        cf.parse_config("just a line\n")
    with pytest.raises(ValueError, match="unknown config key"):
        cf.parse_config("warmth = 3\n")
    with pytest.raises(ValueError, match="unknown config key"):
        cf.parse_config("mcts.warmth = 3\n")
    with pytest.raises(ValueError, match="unknown config key"):
        cf.parse_config("orchestra.budget = 3\n")
    with pytest.raises(ValueError, match="bad value for train.dim"):
        cf.parse_config("train.dim = twelve\n")
    with pytest.raises(ValueError, match="bad entry for synth.signal"):
        cf.parse_config("synth.signal = hopeless:0.8\n")
    with pytest.raises(ValueError, match="bad value for synth.emergent"):
        cf.parse_config("synth.emergent = x:soon:0.5\n")


def test_validation_runs_after_parsing():
    with pytest.raises(ValueError, match="loss weights"):
        cf.parse_config("gamma_loss = 0\n")
    with pytest.raises(ValueError, match="onset before period 2"):
        cf.parse_config("synth.emergent = x:1:0.5\n")


def test_format_parse_round_trip():
    run = cf.default_config()
    run.loop.gamma_loss = 1.25
    run.loop.mcts.budget = 777
    run.loop.train.learning_rate = 0.125
    run.synth.emergent = (("doom scroll", 3, 0.9),)
    text = cf.format_config(run)
    assert cf.parse_config(text) == run


def test_save_load_round_trip(tmp_path):
    run = cf.default_config()
    run.loop.seed = 42
    path = tmp_path / "run.cfg"
    cf.save_config(run, str(path))
    assert cf.load_config(str(path)) == run


def test_with_seed_points_every_stream_at_one_master():
    run = cf.with_seed(cf.default_config(), 99)
    assert run.loop.seed == 99
    assert run.loop.mcts.seed == 99
    assert run.synth.seed == 99
