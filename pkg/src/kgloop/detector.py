"""Entity recognition and knowledge-aware user classification.

Recognition runs two ways: a deterministic longest-match lexicon pass over
the graph's surfaces (which also provides silver BIO labels), and a trainable
two-layer tagger over token embeddings. Classification fuses each recognized
entity's token-span embedding with its graph embedding through a residual
projection, pools the fused vectors by importance weight (weighted mean, so
rescaling all weights changes nothing), and scores the user with a two-layer
sigmoid head.

Training alternates: odd epochs step the tagging cross-entropy (tagger head
plus token embeddings), even epochs step lambda times the detection
cross-entropy (fusion, classifier, token embeddings). Both losses are
tracked; non-finite values abort.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import FACTOR_CLASSES, KnowledgeGraph
from .kge import FLOAT_FMT, sgd_step

UNK_TOKEN = "<unk>"
BIO_TAGS = ("B", "I", "O")
_B, _I, _O = 0, 1, 2
_TOKEN_RE = re.compile(r"[a-z0-9'\-]+")
EPS = 1e-12
DET_MAGIC = "KGLOOP-DET v1"


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class UserDocument:
    user_id: str
    label: int
    posts: list[list[str]]
    period: int = 0


def make_document(
    user_id: str, label: int, texts: list[str], period: int = 0
) -> UserDocument:
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    posts = [toks for toks in (tokenize(t) for t in texts) if toks]
    if not posts:
        raise ValueError(f"user {user_id!r} has no non-empty posts")
    return UserDocument(user_id, label, posts, period)


@dataclass
class RecognizedEntity:
    surface: str
    span: tuple[int, int, int]  # (post index, token start, token end exclusive)
    tag_path: tuple[str, ...]
    matched_graph_entity: str | None
    ner_embedding: np.ndarray | None = None


@dataclass
class DetectorConfig:
    token_dim: int = 16
    tagger_hidden: int = 16
    classifier_hidden: int = 8
    dropout_rate: float = 0.1
    lam: float = 1.0
    learning_rate: float = 0.5
    epochs: int = 50

    def validate(self) -> None:
        if min(self.token_dim, self.tagger_hidden, self.classifier_hidden) < 1:
            raise ValueError("layer sizes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate outside [0, 1)")
        if self.lam < 0.0:
            raise ValueError("lambda must be >= 0")
        if self.learning_rate <= 0.0 or self.epochs < 0:
            raise ValueError("bad training schedule")


@dataclass
class DetectorParams:
    """Weight matrices are stored (fan_in, fan_out) so activations multiply
    on the right; biases broadcast over rows."""

    vocab: tuple[str, ...]
    token_embeddings: np.ndarray  # (V, d1), row 0 = unknown token
    tagger_w1: np.ndarray  # (d1, h1)
    tagger_b1: np.ndarray  # (h1,)
    tagger_w2: np.ndarray  # (h1, 3)
    tagger_b2: np.ndarray  # (3,)
    fusion_w3: np.ndarray  # (d1 + d2, d1)
    cls_w4: np.ndarray  # (d1, h2)
    cls_b3: np.ndarray  # (h2,)
    cls_w5: np.ndarray  # (h2, 1)
    cls_b4: np.ndarray  # (1,)
    dropout_rate: float = 0.1
    lam: float = 1.0
    index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.index:
            self.index = {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def token_dim(self) -> int:
        return self.token_embeddings.shape[1]

    @property
    def graph_dim(self) -> int:
        return self.fusion_w3.shape[0] - self.token_dim

    def token_id(self, token: str) -> int:
        return self.index.get(token, 0)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "tok": self.token_embeddings,
            "tagger_w1": self.tagger_w1, "tagger_b1": self.tagger_b1,
            "tagger_w2": self.tagger_w2, "tagger_b2": self.tagger_b2,
            "fusion_w3": self.fusion_w3,
            "cls_w4": self.cls_w4, "cls_b3": self.cls_b3,
            "cls_w5": self.cls_w5, "cls_b4": self.cls_b4,
        }


def _uniform(
    rng: np.random.Generator, shape: tuple[int, ...], fan: int | None = None
) -> np.ndarray:
    scale = 1.0 / np.sqrt(shape[0] if fan is None else fan)
    return rng.uniform(-scale, scale, size=shape)


def _sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def build_vocab(docs: list[UserDocument], kg: KnowledgeGraph) -> tuple[str, ...]:
    tokens: set[str] = set()
    for doc in docs:
        for post in doc.posts:
            tokens.update(post)
    for key in kg.lexicon():
        tokens.update(key)
    tokens.discard(UNK_TOKEN)
    return (UNK_TOKEN,) + tuple(sorted(tokens))


def init_detector(
    vocab: tuple[str, ...], graph_dim: int, cfg: DetectorConfig,
    rng: np.random.Generator,
) -> DetectorParams:
    cfg.validate()
    d1, h1, h2 = cfg.token_dim, cfg.tagger_hidden, cfg.classifier_hidden
    return DetectorParams(
        vocab=vocab,
        token_embeddings=_uniform(rng, (len(vocab), d1), fan=d1),
        tagger_w1=_uniform(rng, (d1, h1)),
        tagger_b1=np.zeros(h1),
        tagger_w2=_uniform(rng, (h1, 3)),
        tagger_b2=np.zeros(3),
        fusion_w3=_uniform(rng, (d1 + graph_dim, d1)),
        cls_w4=_uniform(rng, (d1, h2)),
        cls_b3=np.zeros(h2),
        cls_w5=_uniform(rng, (h2, 1)),
        cls_b4=np.zeros(1),
        dropout_rate=cfg.dropout_rate,
        lam=cfg.lam,
    )


def extend_vocab(
    params: DetectorParams, tokens: set[str], rng: np.random.Generator
) -> DetectorParams:
    """Append embedding rows for unseen tokens; existing rows untouched."""
    new = sorted(t for t in tokens if t not in params.index)
    if not new:
        return params
    extra = _uniform(rng, (len(new), params.token_dim), fan=params.token_dim)
    params.vocab = params.vocab + tuple(new)
    params.token_embeddings = np.concatenate([params.token_embeddings, extra])
    params.index = {tok: i for i, tok in enumerate(params.vocab)}
    return params


# -- recognition ------------------------------------------------------------


def recognize_lexicon(
    doc: UserDocument, kg: KnowledgeGraph, params: DetectorParams | None = None
) -> list[RecognizedEntity]:
    """Longest-match, left-to-right exact matching against graph surfaces."""
    lex = kg.lexicon()
    if not lex:
        return []
    longest = max(len(k) for k in lex)
    found: list[RecognizedEntity] = []
    for pi, post in enumerate(doc.posts):
        i = 0
        while i < len(post):
            hit = None
            for length in range(min(longest, len(post) - i), 0, -1):
                key = tuple(post[i:i + length])
                if key in lex:
                    hit = (key, lex[key])
                    break
            if hit is None:
                i += 1
                continue
            key, eid = hit
            ent = RecognizedEntity(
                surface=" ".join(key),
                span=(pi, i, i + len(key)),
                tag_path=("B",) + ("I",) * (len(key) - 1),
                matched_graph_entity=eid,
            )
            if params is not None:
                ent.ner_embedding = span_embedding(params, post, i, i + len(key))
            found.append(ent)
            i += len(key)
    return found


def span_embedding(
    params: DetectorParams, post: list[str], start: int, end: int
) -> np.ndarray:
    rows = [params.token_embeddings[params.token_id(t)] for t in post[start:end]]
    return np.mean(rows, axis=0)


def silver_tags(doc: UserDocument, kg: KnowledgeGraph) -> list[np.ndarray]:
    """Per-post BIO index arrays derived from lexicon matches."""
    tags = [np.full(len(post), _O, dtype=np.int64) for post in doc.posts]
    for ent in recognize_lexicon(doc, kg):
        pi, start, end = ent.span
        tags[pi][start] = _B
        tags[pi][start + 1:end] = _I
    return tags


def decode_bio(tokens: list[str], tag_ids: np.ndarray) -> list[tuple[int, int]]:
    """Spans from a BIO index sequence; stray I tags are ignored."""
    spans = []
    i = 0
    while i < len(tokens):
        if tag_ids[i] == _B:
            j = i + 1
            while j < len(tokens) and tag_ids[j] == _I:
                j += 1
            spans.append((i, j))
            i = j
        else:
            i += 1
    return spans


def recognize_tagger(
    doc: UserDocument, params: DetectorParams, kg: KnowledgeGraph | None = None
) -> list[RecognizedEntity]:
    """Spans from the trained tagger's argmax labels."""
    lex = kg.lexicon() if kg is not None else {}
    found = []
    for pi, post in enumerate(doc.posts):
        probs = tagger_forward(post, params)
        for start, end in decode_bio(post, np.argmax(probs, axis=1)):
            key = tuple(post[start:end])
            found.append(RecognizedEntity(
                surface=" ".join(key),
                span=(pi, start, end),
                tag_path=("B",) + ("I",) * (end - start - 1),
                matched_graph_entity=lex.get(key),
                ner_embedding=span_embedding(params, post, start, end),
            ))
    return found


# -- forward passes (evaluation mode, plain numpy) --------------------------


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def tagger_forward(tokens: list[str], params: DetectorParams) -> np.ndarray:
    """Per-token BIO probability rows; dropout off (evaluation)."""
    if not tokens:
        raise ValueError("empty token list")
    ids = [params.token_id(t) for t in tokens]
    x = params.token_embeddings[ids]
    hidden = np.maximum(x @ params.tagger_w1 + params.tagger_b1, 0.0)
    return _softmax_rows(hidden @ params.tagger_w2 + params.tagger_b2)


def one_hot_tags(tag_ids: np.ndarray) -> np.ndarray:
    out = np.zeros((len(tag_ids), 3))
    out[np.arange(len(tag_ids)), tag_ids] = 1.0
    return out


def ner_loss(probs: np.ndarray, gold: np.ndarray) -> float:
    """Mean per-token cross-entropy over the three BIO classes."""
    if probs.shape != gold.shape:
        raise ValueError(f"shape mismatch {probs.shape} vs {gold.shape}")
    return float(-np.mean(np.sum(gold * np.log(np.maximum(probs, EPS)), axis=1)))


def fuse(
    e_ner: np.ndarray, e_graph: np.ndarray, params: DetectorParams
) -> np.ndarray:
    """Residual fusion: e_ner + ReLU(W3 [e_ner; e_graph]); dropout off."""
    if e_ner.shape != (params.token_dim,):
        raise ValueError(f"ner embedding has dim {e_ner.shape}, want {params.token_dim}")
    if e_graph.shape != (params.graph_dim,):
        raise ValueError(f"graph embedding has dim {e_graph.shape}, want {params.graph_dim}")
    mixed = np.concatenate([e_ner, e_graph]) @ params.fusion_w3
    return e_ner + np.maximum(mixed, 0.0)


def pool(fused: np.ndarray, weights: np.ndarray, dim: int) -> np.ndarray:
    """Importance-weighted mean; the empty user maps to the zero vector."""
    if len(weights) == 0:
        return np.zeros(dim)
    return (weights @ fused) / max(float(weights.sum()), EPS)


def classify(
    fused: np.ndarray, weights: np.ndarray, params: DetectorParams
) -> float:
    pooled = pool(fused, np.asarray(weights, dtype=np.float64), params.token_dim)
    hidden = np.maximum(pooled @ params.cls_w4 + params.cls_b3, 0.0)
    logit = float((hidden @ params.cls_w5 + params.cls_b4)[0])
    return float(_sigmoid(logit))


def detection_loss(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Binary cross-entropy over the user batch, log arguments clamped."""
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if y_hat.size == 0:
        raise ValueError("empty batch")
    p = np.log(np.maximum(y_hat, EPS))
    q = np.log(np.maximum(1.0 - y_hat, EPS))
    return float(-np.mean(y * p + (1.0 - y) * q))


def predict_user(
    doc: UserDocument,
    kg: KnowledgeGraph,
    params: DetectorParams,
    graph_vectors: dict[str, np.ndarray],
    weights: dict[str, float] | None = None,
) -> tuple[float, list[RecognizedEntity]]:
    """Recognize, fuse, pool, classify; pure and dropout-free."""
    entities = recognize_lexicon(doc, kg, params)
    usable = [e for e in entities if e.matched_graph_entity in graph_vectors]
    if not usable:
        return classify(np.zeros((0, params.token_dim)), np.zeros(0), params), entities
    fused = np.stack([
        fuse(e.ner_embedding, graph_vectors[e.matched_graph_entity], params)
        for e in usable
    ])
    w = np.array([
        1.0 if weights is None else weights.get(e.matched_graph_entity, 1.0)
        for e in usable
    ])
    return classify(fused, w, params), entities


@dataclass
class EvalMetrics:
    precision: float
    recall: float
    f1: float
    true_pos: int
    false_pos: int
    false_neg: int
    true_neg: int


def prf(tp: int, fp: int, fn: int, tn: int) -> EvalMetrics:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if precision + recall else 0.0
    )
    return EvalMetrics(precision, recall, f1, tp, fp, fn, tn)


def evaluate(
    docs: list[UserDocument],
    kg: KnowledgeGraph,
    params: DetectorParams,
    graph_vectors: dict[str, np.ndarray],
    weights: dict[str, float] | None = None,
    threshold: float = 0.5,
) -> tuple[EvalMetrics, dict[str, float]]:
    predictions: dict[str, float] = {}
    tp = fp = fn = tn = 0
    for doc in docs:
        y_hat, _ = predict_user(doc, kg, params, graph_vectors, weights)
        predictions[doc.user_id] = y_hat
        decided = 1 if y_hat >= threshold else 0
        if decided and doc.label:
            tp += 1
        elif decided and not doc.label:
            fp += 1
        elif not decided and doc.label:
            fn += 1
        else:
            tn += 1
    return prf(tp, fp, fn, tn), predictions


# -- joint training ---------------------------------------------------------


NER_KEYS = ("tok", "tagger_w1", "tagger_b1", "tagger_w2", "tagger_b2")
DET_KEYS = ("tok", "fusion_w3", "cls_w4", "cls_b3", "cls_w5", "cls_b4")


def _ner_batch(docs, kg, params):
    """Flat token index array and one-hot silver tags over the whole slice."""
    ids, gold = [], []
    for doc in docs:
        tags = silver_tags(doc, kg)
        for post, post_tags in zip(doc.posts, tags):
            ids.extend(params.token_id(t) for t in post)
            gold.append(one_hot_tags(post_tags))
    return np.array(ids, dtype=np.int64), np.concatenate(gold)


def _ner_loss_t(leaves, token_ids, gold, rate=0.0, rng=None):
    x = ad.gather(leaves["tok"], token_ids)
    hidden = ad.relu(ad.add(ad.matmul(x, leaves["tagger_w1"]), leaves["tagger_b1"]))
    hidden = ad.dropout(hidden, rate, rng)
    logits = ad.add(ad.matmul(hidden, leaves["tagger_w2"]), leaves["tagger_b2"])
    log_probs = ad.clamped_log(ad.softmax(logits, axis=1), EPS)
    picked = ad.tsum(ad.mul(log_probs, gold), axis=1)
    return ad.mul(ad.tmean(picked), -1.0)


@dataclass
class _UserBatch:
    label: float
    spans: list[np.ndarray]  # token-id arrays, one per recognized entity
    e_graph: np.ndarray  # (k, d2)
    weights: np.ndarray  # (1, k)


def _det_batches(docs, kg, params, graph_vectors, weights):
    batches = []
    for doc in docs:
        spans, rows, w = [], [], []
        for ent in recognize_lexicon(doc, kg):
            eid = ent.matched_graph_entity
            if eid not in graph_vectors:
                continue
            pi, start, end = ent.span
            spans.append(np.array(
                [params.token_id(t) for t in doc.posts[pi][start:end]],
                dtype=np.int64,
            ))
            rows.append(graph_vectors[eid])
            w.append(1.0 if weights is None else weights.get(eid, 1.0))
        batches.append(_UserBatch(
            float(doc.label),
            spans,
            np.stack(rows) if rows else np.zeros((0, 1)),
            np.asarray([w], dtype=np.float64),
        ))
    return batches


def _det_loss_t(leaves, batches, params, rng):
    d1 = params.token_dim
    rate = params.dropout_rate
    logits = []
    for user in batches:
        if user.spans:
            e_ner = ad.stack([
                ad.tmean(ad.gather(leaves["tok"], span), axis=0)
                for span in user.spans
            ])
            mixed = ad.relu(ad.matmul(
                ad.concat([e_ner, ad.Tensor(user.e_graph)], axis=1),
                leaves["fusion_w3"],
            ))
            fused = ad.add(e_ner, ad.dropout(mixed, rate, rng))
            denom = max(float(user.weights.sum()), EPS)
            pooled = ad.mul(ad.matmul(ad.Tensor(user.weights), fused), 1.0 / denom)
        else:
            pooled = ad.Tensor(np.zeros((1, d1)))
        hidden = ad.relu(ad.add(ad.matmul(pooled, leaves["cls_w4"]), leaves["cls_b3"]))
        hidden = ad.dropout(hidden, rate, rng)
        logits.append(ad.add(ad.matmul(hidden, leaves["cls_w5"]), leaves["cls_b4"]))
    z = ad.concat(logits, axis=0)
    y = np.array([[u.label] for u in batches])
    pos = ad.mul(ad.log_sigmoid(z), y)
    neg = ad.mul(ad.log_sigmoid(ad.mul(z, -1.0)), 1.0 - y)
    return ad.mul(ad.tmean(ad.add(pos, neg)), -1.0)


def train_joint(
    docs: list[UserDocument],
    kg: KnowledgeGraph,
    graph_vectors: dict[str, np.ndarray],
    cfg: DetectorConfig,
    rng: np.random.Generator,
    params: DetectorParams | None = None,
    weights: dict[str, float] | None = None,
    epochs: int | None = None,
) -> tuple[DetectorParams, list[float], list[float]]:
    """Alternating optimization; returns (params, ner losses, detection
    losses) with one entry per epoch of the matching phase."""
    cfg.validate()
    if not docs:
        raise ValueError("empty corpus slice")
    if params is None:
        params = init_detector(build_vocab(docs, kg), _graph_dim(graph_vectors), cfg, rng)
    else:
        fresh = set()
        for doc in docs:
            for post in doc.posts:
                fresh.update(post)
        for key in kg.lexicon():
            fresh.update(key)
        extend_vocab(params, fresh, rng)
    token_ids, gold = _ner_batch(docs, kg, params)
    batches = _det_batches(docs, kg, params, graph_vectors, weights)
    arrays = params.arrays()
    ner_series, det_series = [], []
    total = cfg.epochs if epochs is None else epochs
    for epoch in range(1, total + 1):
        drop_rng = rng if params.dropout_rate > 0.0 else None
        if epoch % 2 == 1:
            leaves = ad.leaves({k: arrays[k] for k in NER_KEYS})
            loss = _ner_loss_t(leaves, token_ids, gold, params.dropout_rate, drop_rng)
            _check_finite(loss, "tagging", epoch, cfg.learning_rate)
            ner_series.append(loss.item())
            ad.backward(loss)
            sgd_step(leaves, cfg.learning_rate)
        else:
            leaves = ad.leaves({k: arrays[k] for k in DET_KEYS})
            loss = _det_loss_t(leaves, batches, params, drop_rng)
            _check_finite(loss, "detection", epoch, cfg.learning_rate)
            det_series.append(loss.item())
            if cfg.lam > 0.0:
                ad.backward(ad.mul(loss, cfg.lam))
                sgd_step(leaves, cfg.learning_rate)
    return params, ner_series, det_series


def _graph_dim(graph_vectors: dict[str, np.ndarray]) -> int:
    for vec in graph_vectors.values():
        return len(vec)
    return 1


def _check_finite(loss, phase: str, epoch: int, lr: float) -> None:
    if not np.isfinite(loss.value).all():
        raise RuntimeError(
            f"detector training diverged: {phase} loss {loss.item()} "
            f"at epoch {epoch}, lr {lr}"
        )


# -- discovery --------------------------------------------------------------


def mine_new_surfaces(
    docs: list[UserDocument],
    kg: KnowledgeGraph,
    min_count: int = 2,
    max_len: int = 3,
) -> list[tuple[str, int]]:
    """Frequent n-grams from depressed users' posts, outside every known or
    quarantined surface and clear of lexicon matches. Count is the number of
    containing posts; ties order alphabetically."""
    blocked = set(kg.surface_index())
    counts: Counter[str] = Counter()
    for doc in docs:
        if doc.label != 1:
            continue
        matched = {
            (ent.span[0], t)
            for ent in recognize_lexicon(doc, kg)
            for t in range(ent.span[1], ent.span[2])
        }
        for pi, post in enumerate(doc.posts):
            in_post: set[str] = set()
            for start in range(len(post)):
                for length in range(1, max_len + 1):
                    end = start + length
                    if end > len(post):
                        break
                    if any((pi, t) in matched for t in range(start, end)):
                        break
                    surface = " ".join(post[start:end])
                    if surface not in blocked:
                        in_post.add(surface)
            counts.update(in_post)
    ranked = [(s, c) for s, c in counts.items() if c >= min_count]
    ranked.sort(key=lambda item: (-item[1], item[0]))
    return ranked


# -- persistence ------------------------------------------------------------


def save_detector(params: DetectorParams, path: str) -> None:
    if any(t.startswith("[") for t in params.vocab):
        raise ValueError("vocabulary token collides with a section marker")
    lines = [
        DET_MAGIC,
        f"token_dim\t{params.token_dim}",
        f"graph_dim\t{params.graph_dim}",
        f"dropout\t{FLOAT_FMT(params.dropout_rate)}",
        f"lambda\t{FLOAT_FMT(params.lam)}",
        "[vocab]",
        *params.vocab,
    ]
    for name, arr in params.arrays().items():
        lines.append(f"[{name}]")
        rows = arr if arr.ndim == 2 else arr.reshape(1, -1)
        for row in rows:
            lines.append("\t".join(FLOAT_FMT(float(v)) for v in row))
    lines.append("[end]")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_detector(path: str) -> DetectorParams:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != DET_MAGIC:
        raise ValueError(f"{path}: not a {DET_MAGIC} file")
    if lines[-1] != "[end]":
        raise ValueError(f"{path}: truncated (missing [end])")
    sections: dict[str, list[str]] = {}
    header: list[str] = []
    current = header
    for line in lines[1:-1]:
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], [])
        else:
            current.append(line)
    meta = dict(line.split("\t") for line in header)

    def array(name: str, flat: bool = False) -> np.ndarray:
        rows = [
            [float(v) for v in line.split("\t")] for line in sections[name]
        ]
        arr = np.array(rows, dtype=np.float64)
        return arr.reshape(-1) if flat else arr

    return DetectorParams(
        vocab=tuple(sections["vocab"]),
        token_embeddings=array("tok"),
        tagger_w1=array("tagger_w1"),
        tagger_b1=array("tagger_b1", flat=True),
        tagger_w2=array("tagger_w2"),
        tagger_b2=array("tagger_b2", flat=True),
        fusion_w3=array("fusion_w3"),
        cls_w4=array("cls_w4"),
        cls_b3=array("cls_b3", flat=True),
        cls_w5=array("cls_w5"),
        cls_b4=array("cls_b4", flat=True),
        dropout_rate=float(meta["dropout"]),
        lam=float(meta["lambda"]),
    )
