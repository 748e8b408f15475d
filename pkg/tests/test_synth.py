"""Synthetic corpus generation, ground-truth ranking, corpus file IO."""

import math

import numpy as np
import pytest

from kgloop import graph as g
from kgloop import synth as sy


def small_config(**kw):
    base = dict(users_per_period=20, posts_per_user=3, seed=7)
    base.update(kw)
    return sy.SynthConfig(**base)


def all_text(docs):
    return " | ".join(" ".join(post) for doc in docs for post in doc.posts)


# -- generation -------------------------------------------------------------


def test_same_seed_gives_identical_corpora():
    cfg = small_config()
    docs_a, rank_a = sy.synth_corpus(cfg, period=2)
    docs_b, rank_b = sy.synth_corpus(cfg, period=2)
    assert rank_a == rank_b
    assert [d.user_id for d in docs_a] == [d.user_id for d in docs_b]
    assert [d.label for d in docs_a] == [d.label for d in docs_b]
    assert [d.posts for d in docs_a] == [d.posts for d in docs_b]
    docs_c, _ = sy.synth_corpus(cfg, period=3)
    assert [d.posts for d in docs_c] != [d.posts for d in docs_a]


def test_depressed_fraction_controls_labels():
    docs, _ = sy.synth_corpus(small_config(depressed_fraction=0.0), period=1)
    assert all(d.label == 0 for d in docs)
    docs, _ = sy.synth_corpus(small_config(depressed_fraction=1.0), period=1)
    assert all(d.label == 1 for d in docs)
    docs, _ = sy.synth_corpus(
        small_config(users_per_period=10, depressed_fraction=0.3), period=1
    )
    assert sum(d.label for d in docs) == 3
    assert all(d.period == 1 for d in docs)


def test_emission_rates_are_respected():
    cfg = sy.SynthConfig(
        users_per_period=400, posts_per_user=4, depressed_fraction=0.5, seed=11
    )
    docs, _ = sy.synth_corpus(cfg, period=1)

    def post_rate(label, token):
        posts = [p for d in docs if d.label == label for p in d.posts]
        return sum(token in p for p in posts) / len(posts)

    assert abs(post_rate(1, "hopeless") - 0.8) < 0.05
    assert abs(post_rate(0, "hopeless") - 0.05) < 0.03
    assert abs(post_rate(1, "tired") - 0.3) < 0.05
    assert abs(post_rate(0, "tired") - 0.3) < 0.05


def test_emergent_surfaces_respect_onset():
    cfg = small_config(
        users_per_period=30,
        emergent=(("doom scrolling", 3, 0.7),),
    )
    for period in (1, 2):
        docs, ranking = sy.synth_corpus(cfg, period)
        assert "doom scrolling" not in all_text(docs)
        assert all(r.surface != "doom scrolling" for r in ranking)
    docs, ranking = sy.synth_corpus(cfg, 3)
    assert "doom scrolling" in all_text(docs)
    assert ranking[0].surface == "doom scrolling"
    assert ranking[0].ratio == math.inf
    # positives only
    for doc in docs:
        if doc.label == 0:
            assert "doom scrolling" not in " | ".join(
                " ".join(p) for p in doc.posts
            )


def test_ground_truth_ranking_orders_by_rate_ratio():
    ranking = sy.ground_truth_ranking(sy.SynthConfig(), period=1)
    assert [r.surface for r in ranking] == [
        "hopeless", "worthless", "insomnia", "fatigue", "stress", "tired",
    ]
    ratios = [r.ratio for r in ranking]
    assert ratios == sorted(ratios, reverse=True)
    assert ratios[0] == 16.0
    assert ratios[-1] == 1.0


def test_equal_rates_make_ranking_tie():
    cfg = small_config(
        signal=(("alpha", 0.3, 0.3), ("beta", 0.3, 0.3)),
        common=(("gamma", 0.3),),
    )
    ranking = sy.ground_truth_ranking(cfg, period=1)
    assert {r.ratio for r in ranking} == {1.0}
    assert [r.surface for r in ranking] == ["alpha", "beta", "gamma"]


def test_config_validation():
    with pytest.raises(ValueError, match="one user"):
        sy.SynthConfig(users_per_period=0).validate()
    with pytest.raises(ValueError, match="fraction"):
        sy.SynthConfig(depressed_fraction=1.5).validate()
    with pytest.raises(ValueError, match="signal"):
        sy.SynthConfig(signal=(("bad", 1.2, 0.0),)).validate()
    with pytest.raises(ValueError, match="onset"):
        sy.SynthConfig(emergent=(("early", 1, 0.5),)).validate()
    with pytest.raises(ValueError, match="duplicate"):
        sy.SynthConfig(
            signal=(("tired", 0.5, 0.1),), common=(("tired", 0.2),)
        ).validate()
    with pytest.raises(ValueError, match="filler"):
        sy.SynthConfig(filler=()).validate()
    with pytest.raises(ValueError, match="numbered"):
        sy.synth_corpus(sy.SynthConfig(), period=0)


# -- seed graph -------------------------------------------------------------


def test_seed_graph_covers_known_surfaces():
    cfg = sy.SynthConfig()
    kg = sy.seed_graph_for(cfg)
    surfaces = kg.surface_index()
    for surface in cfg.known_surfaces():
        assert surface in surfaces
    nodes, edges = kg.stats()
    assert nodes == len(g.RESERVED_IDS) + len(cfg.known_surfaces())
    assert edges == len(cfg.known_surfaces())
    classes = [
        kg.entities[surfaces[s]].entity_class for s in cfg.known_surfaces()
    ]
    assert classes == [
        g.FACTOR_CLASSES[i % len(g.FACTOR_CLASSES)]
        for i in range(len(cfg.known_surfaces()))
    ]


def test_seed_graph_leaves_emergent_undiscovered():
    cfg = sy.SynthConfig(emergent=(("doom scrolling", 3, 0.5),))
    kg = sy.seed_graph_for(cfg)
    assert "doom scrolling" not in kg.surface_index()


# -- corpus files -----------------------------------------------------------


def test_corpus_roundtrip(tmp_path):
    docs, _ = sy.synth_corpus(small_config(), period=2)
    path = tmp_path / "corpus.tsv"
    sy.save_corpus(str(path), docs)
    loaded = sy.load_corpus(str(path))
    assert [d.user_id for d in loaded] == [d.user_id for d in docs]
    assert [d.label for d in loaded] == [d.label for d in docs]
    assert [d.period for d in loaded] == [d.period for d in docs]
    assert [d.posts for d in loaded] == [d.posts for d in docs]
    line = path.read_text().splitlines()[0]
    user, label, period, _text = line.split("\t")
    assert user == docs[0].user_id
    assert (int(label), int(period)) == (docs[0].label, docs[0].period)


def test_corpus_load_rejects_malformed(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("u1\t1\thello\n")
    with pytest.raises(ValueError, match="4 tab-separated"):
        sy.load_corpus(str(path))
    path.write_text("u1\tyes\t1\thello\n")
    with pytest.raises(ValueError, match="non-numeric"):
        sy.load_corpus(str(path))
    path.write_text("u1\t1\t1\thello\nu1\t0\t1\tmore\n")
    with pytest.raises(ValueError, match="changes label"):
        sy.load_corpus(str(path))


# -- rank agreement ---------------------------------------------------------


def test_spearman_perfect_and_inverted():
    assert sy.spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert sy.spearman([1, 2, 3, 4], [40, 30, 20, 10]) == pytest.approx(-1.0)


def test_spearman_single_swap_fixture():
    # ranks (1,2,3,4) vs (1,2,4,3): rho = 1 - 6*2/(4*15) = 0.8
    assert sy.spearman([1, 2, 3, 4], [1, 2, 4, 3]) == pytest.approx(0.8)


def test_spearman_handles_ties_with_average_ranks():
    # xs ranks (1, 2.5, 2.5, 4); hand-computed Pearson on ranks
    rho = sy.spearman([1.0, 2.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0])
    rx = np.array([1.0, 2.5, 2.5, 4.0])
    ry = np.array([1.0, 2.0, 3.0, 4.0])
    rx -= rx.mean()
    ry -= ry.mean()
    expected = float(rx @ ry) / math.sqrt(float(rx @ rx) * float(ry @ ry))
    assert rho == pytest.approx(expected)
    assert rho == pytest.approx(0.9486832980505138)


def test_spearman_rejects_degenerate_input():
    with pytest.raises(ValueError, match="length"):
        sy.spearman([1, 2], [1, 2, 3])
    with pytest.raises(ValueError, match="two points"):
        sy.spearman([1], [1])
    with pytest.raises(ValueError, match="constant"):
        sy.spearman([2, 2, 2], [1, 2, 3])
