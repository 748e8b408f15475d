"""Recognition, fusion, classification, and alternating training."""

import math

import numpy as np
import pytest

from kgloop import autodiff as ad
from kgloop import detector as det
from kgloop import graph as g
from kgloop.gradcheck import grad_check


def base_graph():
    kg = g.KnowledgeGraph()
    for ent in g.reserved_entities():
        kg.add_entity(ent)
    return kg


def add_factor(kg, eid, cls, link=True, aliases=()):
    kg.add_entity(g.Entity(
        eid, cls, eid.replace("_", " "), aliases=aliases, status="discovered"
    ))
    if link:
        kg.add_triplet(eid, g.SUBCAT, g.CLASS_NODE_IDS[cls], pos_count=1)


def seed_graph():
    kg = base_graph()
    add_factor(kg, "hopeless", g.PSY_SYM)
    add_factor(kg, "anxious", g.PSY_SYM, aliases=("down in the dumps",))
    add_factor(kg, "self_harm", g.PSY_SYM)
    add_factor(kg, "harm", g.EVENT)
    add_factor(kg, "tired", g.PHY_SYM)
    return kg


def graph_vectors(kg, dim, rng):
    return {
        e.entity_id: rng.normal(size=dim) for e in kg.factor_entities()
    }


def fresh_params(kg, rng, cfg=None, extra_tokens=("i", "feel", "today")):
    cfg = cfg or det.DetectorConfig()
    doc = det.make_document("seed", 0, [" ".join(extra_tokens)])
    vocab = det.build_vocab([doc], kg)
    return det.init_detector(vocab, 8, cfg, rng)


def smoothed(series, window=5):
    return [
        float(np.mean(series[max(0, i - window + 1):i + 1]))
        for i in range(len(series))
    ]


# -- documents and lexicon recognition --------------------------------------


def test_document_normalization():
    doc = det.make_document("u1", 1, ["I Feel SAD!", "", "OK then."])
    assert doc.posts == [["i", "feel", "sad"], ["ok", "then"]]
    with pytest.raises(ValueError, match="label"):
        det.make_document("u1", 2, ["hello"])
    with pytest.raises(ValueError, match="no non-empty posts"):
        det.make_document("u1", 0, ["", "   "])


def test_lexicon_recognizes_single_word():
    kg = seed_graph()
    doc = det.make_document("u1", 1, ["i feel anxious today"])
    found = det.recognize_lexicon(doc, kg)
    assert len(found) == 1
    assert found[0].surface == "anxious"
    assert found[0].span == (0, 2, 3)
    assert found[0].tag_path == ("B",)
    assert found[0].matched_graph_entity == "anxious"


def test_lexicon_prefers_longest_match():
    kg = seed_graph()
    doc = det.make_document("u1", 1, ["they discussed self harm prevention"])
    found = det.recognize_lexicon(doc, kg)
    assert [e.surface for e in found] == ["self harm"]
    assert found[0].span == (0, 2, 4)
    assert found[0].tag_path == ("B", "I")


def test_lexicon_matches_aliases_and_empty_case():
    kg = seed_graph()
    doc = det.make_document("u1", 0, ["totally down in the dumps lately"])
    found = det.recognize_lexicon(doc, kg)
    assert len(found) == 1
    assert found[0].matched_graph_entity == "anxious"
    assert found[0].span == (0, 1, 5)
    none = det.make_document("u2", 0, ["sunny walk in the park"])
    assert det.recognize_lexicon(none, kg) == []


def test_silver_tags_mark_spans():
    kg = seed_graph()
    doc = det.make_document(
        "u1", 1, ["a fine day", "felt self harm thoughts and tired"]
    )
    tags = det.silver_tags(doc, kg)
    assert tags[0].tolist() == [2, 2, 2]
    assert tags[1].tolist() == [2, 0, 1, 2, 2, 0]


def test_decode_bio_spans():
    toks = ["a", "b", "c", "d"]
    assert det.decode_bio(toks, np.array([0, 1, 2, 0])) == [(0, 2), (3, 4)]
    assert det.decode_bio(toks, np.array([1, 0, 2, 2])) == [(1, 2)]
    assert det.decode_bio(["a", "b", "c"], np.array([0, 1, 1])) == [(0, 3)]
    assert det.decode_bio(toks, np.array([2, 2, 2, 2])) == []


# -- forward fixtures -------------------------------------------------------


def test_tagger_uniform_at_zero_weights():
    kg = seed_graph()
    params = fresh_params(kg, np.random.default_rng(0))
    for name in ("tagger_w1", "tagger_b1", "tagger_w2", "tagger_b2"):
        getattr(params, name)[:] = 0.0
    probs = det.tagger_forward(["i", "feel", "anxious"], params)
    assert np.allclose(probs, 1.0 / 3.0, atol=1e-12)


def test_tagger_rows_are_distributions_and_deterministic():
    kg = seed_graph()
    rng = np.random.default_rng(1)
    params = fresh_params(kg, rng)
    tokens = ["i", "feel", "anxious", "zzz-oov", "today"]
    first = det.tagger_forward(tokens, params)
    second = det.tagger_forward(tokens, params)
    assert np.array_equal(first, second)
    assert np.allclose(first.sum(axis=1), 1.0, atol=1e-9)
    unk = det.tagger_forward([det.UNK_TOKEN], params)
    assert np.allclose(first[3], unk[0], atol=0.0)
    with pytest.raises(ValueError, match="empty"):
        det.tagger_forward([], params)


def test_ner_loss_fixtures():
    gold = det.one_hot_tags(np.array([0, 2, 1]))
    assert det.ner_loss(gold.copy(), gold) <= 1e-9
    uniform = np.full((3, 3), 1.0 / 3.0)
    assert det.ner_loss(uniform, gold) == pytest.approx(math.log(3.0), abs=1e-9)
    with pytest.raises(ValueError, match="mismatch"):
        det.ner_loss(uniform, gold[:2])
    rng = np.random.default_rng(2)
    raw = rng.random((6, 3)) + 0.05
    probs = raw / raw.sum(axis=1, keepdims=True)
    gold6 = det.one_hot_tags(rng.integers(0, 3, size=6))
    manual = 0.0
    for row, want in zip(probs, gold6):
        for p, w in zip(row, want):
            manual -= w * math.log(max(p, 1e-12))
    manual /= 6.0
    assert det.ner_loss(probs, gold6) == pytest.approx(manual, abs=1e-12)


def test_fuse_residual_identity_and_duplicate():
    kg = seed_graph()
    params = fresh_params(kg, np.random.default_rng(3))
    e_ner = np.random.default_rng(4).normal(size=params.token_dim)
    e_graph = np.random.default_rng(5).normal(size=params.graph_dim)
    params.fusion_w3[:] = 0.0
    assert np.array_equal(det.fuse(e_ner, e_graph, params), e_ner)
    params.fusion_w3[:] = np.random.default_rng(6).normal(
        size=params.fusion_w3.shape
    )
    once = det.fuse(e_ner, e_graph, params)
    again = det.fuse(e_ner, e_graph, params)
    assert np.array_equal(once, again)
    manual = e_ner + np.maximum(
        np.concatenate([e_ner, e_graph]) @ params.fusion_w3, 0.0
    )
    assert np.allclose(once, manual, atol=1e-12)
    with pytest.raises(ValueError, match="ner embedding"):
        det.fuse(e_ner[:-1], e_graph, params)
    with pytest.raises(ValueError, match="graph embedding"):
        det.fuse(e_ner, e_graph[:-1], params)


def test_classify_bias_path_and_scale_invariance():
    kg = seed_graph()
    rng = np.random.default_rng(7)
    params = fresh_params(kg, rng)
    params.cls_w4[:] = 0.0
    params.cls_b3[:] = 0.0
    params.cls_w5[:] = 0.0
    params.cls_b4[:] = 0.3
    fused = rng.normal(size=(4, params.token_dim))
    want = 1.0 / (1.0 + math.exp(-0.3))
    assert det.classify(fused, np.ones(4), params) == pytest.approx(want, abs=1e-12)

    params = fresh_params(kg, np.random.default_rng(8))
    weights = np.abs(rng.normal(size=4)) + 0.1
    base = det.classify(fused, weights, params)
    for scale in (2.0, 7.3, 0.25):
        assert det.classify(fused, scale * weights, params) == pytest.approx(
            base, abs=1e-12
        )
    empty = det.classify(np.zeros((0, params.token_dim)), np.zeros(0), params)
    degenerate = det.classify(fused, np.zeros(4), params)
    assert degenerate == pytest.approx(empty, abs=1e-15)


def test_detection_loss_fixtures():
    half = np.full(6, 0.5)
    labels = np.array([1, 0, 1, 1, 0, 0], dtype=float)
    assert det.detection_loss(half, labels) == pytest.approx(
        math.log(2.0), abs=1e-9
    )
    assert det.detection_loss(labels.copy(), labels) <= 1e-9
    with pytest.raises(ValueError, match="empty"):
        det.detection_loss(np.array([]), np.array([]))
    rng = np.random.default_rng(9)
    y_hat = rng.uniform(0.01, 0.99, size=8)
    y = rng.integers(0, 2, size=8).astype(float)
    manual = -sum(
        yi * math.log(pi) + (1 - yi) * math.log(1 - pi)
        for pi, yi in zip(y_hat, y)
    ) / 8.0
    assert det.detection_loss(y_hat, y) == pytest.approx(manual, abs=1e-12)


def test_evaluate_matches_hand_counted_confusion():
    kg = seed_graph()
    rng = np.random.default_rng(10)
    params = fresh_params(kg, rng)
    vectors = graph_vectors(kg, 8, rng)
    texts = [
        ("hopeless and tired今", 1), ("a fine day", 0), ("anxious all week", 1),
        ("walk in the park", 0), ("self harm thoughts", 1), ("tired but fine", 0),
        ("feel hopeless", 1), ("sunny morning", 0), ("anxious and tired", 1),
        ("dinner with friends", 0),
    ]
    docs = [
        det.make_document(f"u{i}", label, [text])
        for i, (text, label) in enumerate(texts)
    ]
    metrics, predictions = det.evaluate(docs, kg, params, vectors)
    tp = fp = fn = tn = 0
    for doc in docs:
        y_hat, _ = det.predict_user(doc, kg, params, vectors)
        assert predictions[doc.user_id] == y_hat
        decided = 1 if y_hat >= 0.5 else 0
        tp += decided and doc.label
        fp += decided and not doc.label
        fn += (not decided) and doc.label
        tn += (not decided) and (not doc.label)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    assert (metrics.true_pos, metrics.false_pos) == (tp, fp)
    assert (metrics.false_neg, metrics.true_neg) == (fn, tn)
    assert metrics.precision == pytest.approx(precision, abs=1e-15)
    assert metrics.recall == pytest.approx(recall, abs=1e-15)
    assert metrics.f1 == pytest.approx(f1, abs=1e-15)


def test_zero_importance_weights_fall_back_to_bias_path():
    kg = seed_graph()
    rng = np.random.default_rng(11)
    params = fresh_params(kg, rng)
    vectors = graph_vectors(kg, 8, rng)
    doc = det.make_document("u1", 1, ["hopeless and tired"])
    zeroed = {eid: 0.0 for eid in vectors}
    with_entities, found = det.predict_user(doc, kg, params, vectors, zeroed)
    assert len(found) == 2
    blank = det.make_document("u2", 0, ["nothing notable here"])
    no_entities, _ = det.predict_user(blank, kg, params, vectors)
    assert with_entities == pytest.approx(no_entities, abs=1e-15)


# -- training ---------------------------------------------------------------


FILLER = (
    "the", "a", "day", "today", "went", "to", "work", "home", "food",
    "walk", "nice", "fine", "slept", "read", "news", "coffee",
)


def separable_corpus(kg, rng, n_pos=12, n_neg=12, posts=3):
    signal = ("hopeless", "anxious")
    docs = []
    for u in range(n_pos):
        texts = []
        for _ in range(posts):
            words = list(rng.choice(FILLER, size=4))
            words.append(signal[int(rng.integers(len(signal)))])
            if rng.random() < 0.5:
                words.append("tired")
            texts.append(" ".join(words))
        docs.append(det.make_document(f"pos{u:02d}", 1, texts))
    for u in range(n_neg):
        texts = []
        for _ in range(posts):
            words = list(rng.choice(FILLER, size=5))
            if rng.random() < 0.5:
                words.append("tired")
            texts.append(" ".join(words))
        docs.append(det.make_document(f"neg{u:02d}", 0, texts))
    return docs


def test_training_separates_synthetic_corpus():
    kg = seed_graph()
    rng = np.random.default_rng(42)
    docs = separable_corpus(kg, rng)
    vectors = graph_vectors(kg, 8, rng)
    cfg = det.DetectorConfig(dropout_rate=0.0, learning_rate=0.5, epochs=50)
    params, ner_series, det_series = det.train_joint(docs, kg, vectors, cfg, rng)
    assert len(ner_series) == 25 and len(det_series) == 25
    for series in (ner_series, det_series):
        assert all(np.isfinite(series))
        smooth = smoothed(series)
        rises = [b - a for a, b in zip(smooth, smooth[1:])]
        assert max(rises) <= 0.01
        assert series[-1] < series[0]
    metrics, _ = det.evaluate(docs, kg, params, vectors)
    assert metrics.f1 >= 0.95
    params, _, _ = det.train_joint(
        docs, kg, vectors, cfg, rng, params=params, epochs=50
    )
    agree = total = 0
    for doc in docs:
        silver = det.silver_tags(doc, kg)
        for post, gold in zip(doc.posts, silver):
            pred = np.argmax(det.tagger_forward(post, params), axis=1)
            agree += int(np.sum(pred == gold))
            total += len(post)
    assert agree / total >= 0.9


def test_lambda_zero_leaves_classifier_untouched():
    kg = seed_graph()
    rng = np.random.default_rng(13)
    docs = separable_corpus(kg, rng, n_pos=4, n_neg=4)
    vectors = graph_vectors(kg, 8, rng)
    cfg = det.DetectorConfig(dropout_rate=0.0, learning_rate=0.3, epochs=10, lam=0.0)
    params = det.init_detector(det.build_vocab(docs, kg), 8, cfg, rng)
    before = {k: v.copy() for k, v in params.arrays().items()}
    params, ner_series, det_series = det.train_joint(
        docs, kg, vectors, cfg, rng, params=params
    )
    assert len(det_series) == 5
    for name in ("fusion_w3", "cls_w4", "cls_b3", "cls_w5", "cls_b4"):
        assert np.array_equal(params.arrays()[name], before[name])
    assert not np.array_equal(params.token_embeddings, before["tok"])
    assert not np.array_equal(params.tagger_w1, before["tagger_w1"])
    assert ner_series[-1] < ner_series[0]


def test_same_seed_reproduces_parameters():
    kg = seed_graph()
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(21)
        docs = separable_corpus(kg, rng, n_pos=5, n_neg=5)
        vectors = graph_vectors(kg, 8, rng)
        cfg = det.DetectorConfig(epochs=8)
        params, _, _ = det.train_joint(docs, kg, vectors, cfg, rng)
        runs.append({k: v.copy() for k, v in params.arrays().items()})
    for name, arr in runs[0].items():
        assert np.array_equal(arr, runs[1][name]), name


def test_divergence_aborts():
    kg = seed_graph()
    rng = np.random.default_rng(31)
    docs = separable_corpus(kg, rng, n_pos=3, n_neg=3)
    vectors = graph_vectors(kg, 8, rng)
    cfg = det.DetectorConfig(dropout_rate=0.0, epochs=4)
    params = det.init_detector(det.build_vocab(docs, kg), 8, cfg, rng)
    params.token_embeddings[:] = 1e200
    with np.errstate(all="ignore"):
        with pytest.raises(RuntimeError, match="diverged"):
            det.train_joint(docs, kg, vectors, cfg, rng, params=params)


def test_extend_vocab_preserves_rows():
    kg = seed_graph()
    rng = np.random.default_rng(15)
    params = fresh_params(kg, rng)
    old_rows = params.token_embeddings.copy()
    old_size = len(params.vocab)
    det.extend_vocab(params, {"brand", "new", "feel"}, rng)
    assert len(params.vocab) == old_size + 2
    assert np.array_equal(params.token_embeddings[:old_size], old_rows)
    assert params.index["brand"] == old_size
    det.extend_vocab(params, {"brand"}, rng)
    assert len(params.vocab) == old_size + 2


# -- gradient checks --------------------------------------------------------


def ner_loss_fixture():
    """(loss_and_grads, base arrays) for the tagging cross-entropy."""
    kg = seed_graph()
    rng = np.random.default_rng(17)
    docs = separable_corpus(kg, rng, n_pos=2, n_neg=2, posts=2)
    cfg = det.DetectorConfig(dropout_rate=0.0)
    params = det.init_detector(det.build_vocab(docs, kg), 8, cfg, rng)
    token_ids, gold = det._ner_batch(docs, kg, params)
    base = {k: params.arrays()[k].copy() for k in det.NER_KEYS}

    def loss_and_grads(arrs):
        leaves = ad.leaves(arrs)
        loss = det._ner_loss_t(leaves, token_ids, gold)
        ad.backward(loss)
        return loss.item(), ad.grads_of(leaves)

    return loss_and_grads, base


def det_loss_fixture():
    """(loss_and_grads, base arrays) for the user-level detection loss."""
    kg = seed_graph()
    rng = np.random.default_rng(19)
    docs = separable_corpus(kg, rng, n_pos=3, n_neg=2, posts=2)
    cfg = det.DetectorConfig(dropout_rate=0.0)
    params = det.init_detector(det.build_vocab(docs, kg), 8, cfg, rng)
    # keep every ReLU off its kink so central differences are meaningful
    params.cls_b3[:] = 0.1 * rng.normal(size=params.cls_b3.shape)
    params.cls_b4[:] = 0.1 * rng.normal(size=params.cls_b4.shape)
    vectors = graph_vectors(kg, 8, rng)
    batches = det._det_batches(docs, kg, params, vectors, None)
    base = {k: params.arrays()[k].copy() for k in det.DET_KEYS}

    def loss_and_grads(arrs):
        leaves = ad.leaves(arrs)
        loss = det._det_loss_t(leaves, batches, params, None)
        ad.backward(loss)
        return loss.item(), ad.grads_of(leaves)

    return loss_and_grads, base


def test_ner_gradients_match_finite_differences():
    loss_and_grads, base = ner_loss_fixture()
    assert grad_check(loss_and_grads, base, rng=np.random.default_rng(1)) < 1e-4


def test_detection_gradients_match_finite_differences():
    loss_and_grads, base = det_loss_fixture()
    assert grad_check(loss_and_grads, base, rng=np.random.default_rng(2)) < 1e-4


# -- discovery and persistence ---------------------------------------------


def test_mine_new_surfaces_counts_and_blocks():
    kg = seed_graph()
    kg.add_entity(g.Entity("bad_vibes", g.PSY_SYM, "bad vibes", status="quarantined"))
    pos_posts = ["the brain fog is heavy", "brain fog again bad vibes"]
    docs = [
        det.make_document("p1", 1, pos_posts),
        det.make_document("p2", 1, ["brain fog and anxious thoughts"]),
        det.make_document("n1", 0, ["brain fog everywhere", "brain fog brain fog"]),
    ]
    mined = dict(det.mine_new_surfaces(docs, kg, min_count=2, max_len=3))
    assert mined["brain fog"] == 3
    assert "bad vibes" not in mined
    assert "anxious" not in mined
    assert "anxious thoughts" not in mined
    assert all("anxious" not in s.split() for s in mined)
    counts = det.mine_new_surfaces(docs, kg, min_count=4)
    assert counts == []
    ordering = det.mine_new_surfaces(docs, kg, min_count=1)
    values = [c for _s, c in ordering]
    assert values == sorted(values, reverse=True)


def test_detector_roundtrip(tmp_path):
    kg = seed_graph()
    rng = np.random.default_rng(23)
    params = fresh_params(kg, rng)
    path = tmp_path / "det.txt"
    det.save_detector(params, str(path))
    loaded = det.load_detector(str(path))
    assert loaded.vocab == params.vocab
    for name, arr in params.arrays().items():
        assert np.array_equal(arr, loaded.arrays()[name]), name
    assert loaded.dropout_rate == params.dropout_rate
    assert loaded.lam == params.lam
    again = tmp_path / "det2.txt"
    det.save_detector(loaded, str(again))
    assert path.read_bytes() == again.read_bytes()
    bad = tmp_path / "bad.txt"
    bad.write_text("KGLOOP-DET v0\n[end]\n")
    with pytest.raises(ValueError, match="not a"):
        det.load_detector(str(bad))
    truncated = tmp_path / "trunc.txt"
    truncated.write_text(path.read_text().rsplit("[end]", 1)[0])
    with pytest.raises(ValueError, match="truncated"):
        det.load_detector(str(truncated))
