"""Triplet scoring and embedding pretraining.

Scorer: reshape head and relation vectors to (rows, cols), stack vertically,
run a bank of small filters in valid (no padding) convolution, ReLU, flatten
row-major, project back to the embedding dimension, ReLU, dot with the tail:

    f(h, r, t) = ReLU(vec(ReLU([h_img ; r_img] * filters)) @ projection) . t

Training loss per positive with N sampled corruptions, averaged over a batch:

    -log sigmoid(f(h, r, t)) - sum_i log sigmoid(-f(h'_i, r, t'_i))

During training the h and t entering the scorer are the attention-aggregated
embeddings, so the attention parameters are trained jointly with this loss.
Negatives corrupt one endpoint with a same-class entity, filtered against the
active positive set.

All trainables are plain float64 arrays updated by SGD; the reverse-mode core
supplies gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, aggregate_all, aggregate_t, init_attention_params
from .graph import FACTOR_CLASSES, RELATIONS, KnowledgeGraph

FLOAT_FMT = repr  # shortest round-trip decimal


class SamplingExhaustedError(RuntimeError):
    """No admissible corruption exists for a positive triplet."""


@dataclass
class ConvEParams:
    filters: np.ndarray     # (n_filters, k, k)
    projection: np.ndarray  # (flattened feature size, dim)
    rows: int
    cols: int

    def feature_size(self) -> int:
        f, kh, kw = self.filters.shape
        return f * (2 * self.rows - kh + 1) * (self.cols - kw + 1)


@dataclass
class TrainConfig:
    dim: int = 64
    conv_rows: int = 8
    conv_cols: int = 8
    conv_filters: int = 8
    conv_kernel: int = 3
    learning_rate: float = 0.01
    negatives_per_positive: int = 4
    epochs: int = 20
    batch_size: int = 32

    def validate(self) -> None:
        if self.conv_rows * self.conv_cols != self.dim:
            raise ValueError(
                f"reshape geometry {self.conv_rows}x{self.conv_cols} does not "
                f"cover dim {self.dim}"
            )
        if 2 * self.conv_rows - self.conv_kernel + 1 <= 0:
            raise ValueError("kernel taller than stacked image")
        if self.conv_cols - self.conv_kernel + 1 <= 0:
            raise ValueError("kernel wider than image")
        if self.negatives_per_positive < 1:
            raise ValueError("need at least one negative per positive")


@dataclass
class EmbeddingTable:
    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    relations: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class GraphModel:
    """The full trainable bundle for the graph side."""

    emb: EmbeddingTable
    conv: ConvEParams
    attention: AttentionParams

    def effective_vectors(self, kg: KnowledgeGraph) -> dict[str, np.ndarray]:
        """Aggregated embeddings for every entity; the one representation
        used for scoring at rest, similarity, and fusion."""
        return aggregate_all(kg, self.emb.vectors, self.emb.relations, self.attention)


def init_model(kg: KnowledgeGraph, cfg: TrainConfig, rng: np.random.Generator) -> GraphModel:
    cfg.validate()
    scale = 1.0 / math.sqrt(cfg.dim)
    emb = EmbeddingTable(cfg.dim)
    for eid, ent in sorted(kg.entities.items()):
        if ent.status != "quarantined":
            emb.vectors[eid] = rng.uniform(-scale, scale, size=cfg.dim)
    for name in sorted(RELATIONS):
        emb.relations[name] = rng.uniform(-scale, scale, size=cfg.dim)
    k = cfg.conv_kernel
    conv = ConvEParams(
        filters=rng.uniform(-scale, scale, size=(cfg.conv_filters, k, k)),
        projection=None,  # set below once feature size is known
        rows=cfg.conv_rows,
        cols=cfg.conv_cols,
    )
    conv.projection = rng.uniform(-scale, scale, size=(conv.feature_size(), cfg.dim))
    attention = init_attention_params(cfg.dim, rng)
    return GraphModel(emb, conv, attention)


def init_vector(dim: int, rng: np.random.Generator) -> np.ndarray:
    scale = 1.0 / math.sqrt(dim)
    return rng.uniform(-scale, scale, size=dim)


# -- scoring ----------------------------------------------------------------


def conve_score(
    conv: ConvEParams, h: np.ndarray, r: np.ndarray, t: np.ndarray
) -> float:
    """Inference-path score of one triplet from explicit vectors."""
    stacked = np.concatenate(
        [h.reshape(conv.rows, conv.cols), r.reshape(conv.rows, conv.cols)], axis=0
    )
    kh, kw = conv.filters.shape[1:]
    windows = np.lib.stride_tricks.sliding_window_view(stacked, (kh, kw))
    feature_maps = np.maximum(
        np.einsum("ijpq,fpq->fij", windows, conv.filters), 0.0
    )
    hidden = np.maximum(feature_maps.ravel() @ conv.projection, 0.0)
    return float(hidden @ t)


def conve_score_batch_t(
    hs: ad.Tensor,
    rs: ad.Tensor,
    ts: ad.Tensor,
    filters: ad.Tensor,
    projection: ad.Tensor,
    rows: int,
    cols: int,
) -> ad.Tensor:
    """Differentiable batched scores: (B, d) x 3 -> (B,)."""
    b = hs.value.shape[0]
    h_img = ad.reshape(hs, (b, rows, cols))
    r_img = ad.reshape(rs, (b, rows, cols))
    stacked = ad.concat([h_img, r_img], axis=1)
    maps = ad.relu(ad.conv2d_valid(stacked, filters))
    hidden = ad.relu(ad.matmul(ad.reshape(maps, (b, -1)), projection))
    return ad.tsum(ad.mul(hidden, ts), axis=1)


# -- negative sampling ------------------------------------------------------


def sample_negatives(
    kg: KnowledgeGraph,
    key: tuple[str, str, str],
    n: int,
    rng: np.random.Generator,
    active: set[tuple[str, str, str]] | None = None,
    max_attempts: int = 100,
) -> list[tuple[str, str, str]]:
    """N corruptions of one positive; each replaces exactly one endpoint with
    a same-class entity, avoiding self-loops, the active positive set, and
    (preferring distinctness) earlier draws. A valid duplicate is accepted
    only after the attempt budget; when the same-class pools offer nothing at
    all the draw falls back to entities of any factor class, and only if that
    is exhausted too is the sampling-exhausted error raised."""
    head, relation, tail = key
    if active is None:
        active = {k for k, t in kg.triplets.items() if t.status == "active"}

    def pools_for(widen: bool) -> dict[str, list[str]]:
        pools: dict[str, list[str]] = {}
        for side, original in (("head", head), ("tail", tail)):
            cls = kg.entities[original].entity_class
            pools[side] = [
                eid
                for eid, ent in sorted(kg.entities.items())
                if (ent.entity_class in FACTOR_CLASSES if widen
                    else ent.entity_class == cls)
                and ent.status != "quarantined"
                and eid != original
            ]
        return pools

    def draw(pools, seen):
        fallback: tuple[str, str, str] | None = None
        for _attempt in range(max_attempts):
            side = "head" if rng.random() < 0.5 else "tail"
            if not pools[side]:
                side = "tail" if side == "head" else "head"
            pool = pools[side]
            replacement = pool[int(rng.integers(len(pool)))]
            if side == "head":
                cand = (replacement, relation, tail)
            else:
                cand = (head, relation, replacement)
            if cand[0] == cand[2]:
                continue
            cand = kg.canonical_key(*cand)
            if cand in active:
                continue
            if cand in seen:
                fallback = cand
                continue
            return cand
        return fallback

    narrow = pools_for(widen=False)
    wide = pools_for(widen=True)
    if not wide["head"] and not wide["tail"]:
        raise SamplingExhaustedError(f"no admissible corruption for {key}")
    out: list[tuple[str, str, str]] = []
    seen: set[tuple[str, str, str]] = set()
    for _ in range(n):
        chosen = None
        if narrow["head"] or narrow["tail"]:
            chosen = draw(narrow, seen)
        if chosen is None:
            chosen = draw(wide, seen)
        if chosen is None:
            raise SamplingExhaustedError(f"no admissible corruption for {key}")
        seen.add(chosen)
        out.append(chosen)
    return out


# -- training ---------------------------------------------------------------


def model_leaves(model: GraphModel, ent_ids: list[str]) -> tuple[dict, dict, dict]:
    """Leaf tensors over the model arrays plus the id -> row maps.

    Entity/relation matrices are fresh stacks (written back by the caller);
    conv and attention leaves share memory with the model arrays.
    """
    rel_names = sorted(model.emb.relations)
    leaves = {
        "entities": ad.Tensor(np.stack([model.emb.vectors[e] for e in ent_ids])),
        "relations": ad.Tensor(np.stack([model.emb.relations[r] for r in rel_names])),
        "conv_filters": ad.Tensor(model.conv.filters),
        "conv_projection": ad.Tensor(model.conv.projection),
        "att_relation_proj": ad.Tensor(model.attention.relation_proj),
        "att_entity_proj": ad.Tensor(model.attention.entity_proj),
        "att_relation_query": ad.Tensor(model.attention.relation_query),
        "att_entity_query": ad.Tensor(model.attention.entity_query),
    }
    ent_row = {e: i for i, e in enumerate(ent_ids)}
    rel_row = {r: i for i, r in enumerate(rel_names)}
    return leaves, ent_row, rel_row


def scored_batch_t(
    kg: KnowledgeGraph,
    keys: list[tuple[str, str, str]],
    leaves: dict,
    ent_row: dict[str, int],
    rel_row: dict[str, int],
    model: GraphModel,
) -> ad.Tensor:
    """Scores for a list of triplet keys using aggregated endpoint embeddings.

    One aggregation per unique endpoint entity, one batched convolution for
    the whole list."""
    unique = sorted({k[0] for k in keys} | {k[2] for k in keys})
    agg = {
        eid: aggregate_t(
            eid, kg, leaves["entities"], leaves["relations"], ent_row, rel_row,
            leaves, model.attention.leak,
        )
        for eid in unique
    }
    hs = ad.concat([agg[k[0]] for k in keys], axis=0)
    ts = ad.concat([agg[k[2]] for k in keys], axis=0)
    rs = ad.gather(leaves["relations"], [rel_row[k[1]] for k in keys])
    return conve_score_batch_t(
        hs, rs, ts, leaves["conv_filters"], leaves["conv_projection"],
        model.conv.rows, model.conv.cols,
    )


def kg_batch_loss_t(
    kg: KnowledgeGraph,
    batch: list[tuple[tuple[str, str, str], list[tuple[str, str, str]]]],
    leaves: dict,
    ent_row: dict[str, int],
    rel_row: dict[str, int],
    model: GraphModel,
) -> ad.Tensor:
    """Mean over positives of -log sig(f_pos) - sum_negs log sig(-f_neg)."""
    if not batch:
        raise ValueError("empty batch")
    keys = [pos for pos, _ in batch]
    for _pos, negs in batch:
        keys.extend(negs)
    scores = scored_batch_t(kg, keys, leaves, ent_row, rel_row, model)
    n_pos = len(batch)
    pos_scores = ad.gather(scores, list(range(n_pos)))
    neg_idx = list(range(n_pos, len(keys)))
    total = ad.tsum(ad.log_sigmoid(pos_scores))
    if neg_idx:
        neg_scores = ad.gather(scores, neg_idx)
        total = ad.add(total, ad.tsum(ad.log_sigmoid(ad.mul(neg_scores, -1.0))))
    return ad.mul(total, -1.0 / n_pos)


TRAINABLE_KEYS = (
    "entities", "relations", "conv_filters", "conv_projection",
    "att_relation_proj", "att_entity_proj", "att_relation_query",
    "att_entity_query",
)


def sgd_step(leaves: dict, lr: float) -> None:
    for name in sorted(leaves):
        leaf = leaves[name]
        if leaf.grad is not None:
            leaf.value -= lr * leaf.grad
            leaf.grad = None


def write_back(model: GraphModel, leaves: dict, ent_ids: list[str]) -> None:
    for i, eid in enumerate(ent_ids):
        model.emb.vectors[eid] = leaves["entities"].value[i].copy()
    for i, name in enumerate(sorted(model.emb.relations)):
        model.emb.relations[name] = leaves["relations"].value[i].copy()
    # conv and attention leaves share memory with the model; nothing to do


def pretrain(
    kg: KnowledgeGraph,
    corpus_triplets: list[tuple[str, str, str]],
    cfg: TrainConfig,
    rng: np.random.Generator,
    model: GraphModel | None = None,
    epochs: int | None = None,
) -> tuple[GraphModel, list[float]]:
    """Train the graph bundle on positive triplets with sampled corruptions.

    Returns the model and per-epoch mean losses. Pass an existing model to
    continue training (expansion-round retraining)."""
    cfg.validate()
    if model is None:
        model = init_model(kg, cfg, rng)
    positives = sorted(set(corpus_triplets))
    if not positives:
        raise ValueError("no positive triplets to train on")
    active = {k for k, t in kg.triplets.items() if t.status == "active"}
    ent_ids = sorted(model.emb.vectors)
    losses: list[float] = []
    for _epoch in range(epochs if epochs is not None else cfg.epochs):
        order = rng.permutation(len(positives))
        epoch_losses = []
        for start in range(0, len(positives), cfg.batch_size):
            chunk = [positives[i] for i in order[start:start + cfg.batch_size]]
            batch = [
                (key, sample_negatives(kg, key, cfg.negatives_per_positive, rng, active))
                for key in chunk
            ]
            leaves, ent_row, rel_row = model_leaves(model, ent_ids)
            loss = kg_batch_loss_t(kg, batch, leaves, ent_row, rel_row, model)
            if not math.isfinite(loss.item()):
                raise RuntimeError(
                    f"graph training diverged: loss {loss.item()} at epoch "
                    f"{len(losses)}, lr {cfg.learning_rate}"
                )
            ad.backward(loss)
            sgd_step(leaves, cfg.learning_rate)
            write_back(model, leaves, ent_ids)
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))
    return model, losses


# -- persistence ------------------------------------------------------------

EMB_MAGIC = "KGLOOP-EMB v1"


def _vec_line(tag: str, parts: list[str], vec: np.ndarray) -> str:
    return "\t".join([tag] + parts + [FLOAT_FMT(float(x)) for x in vec])


def save_model(model: GraphModel, path: str) -> None:
    conv = model.conv
    att = model.attention
    lines = [
        EMB_MAGIC,
        f"dim\t{model.emb.dim}",
        "conv\t{}\t{}\t{}\t{}\t{}".format(
            conv.rows, conv.cols, *conv.filters.shape
        ),
        f"leak\t{FLOAT_FMT(att.leak)}",
    ]
    for eid in sorted(model.emb.vectors):
        lines.append(_vec_line("entity", [eid], model.emb.vectors[eid]))
    for name in sorted(model.emb.relations):
        lines.append(_vec_line("relation", [name], model.emb.relations[name]))
    for f in range(conv.filters.shape[0]):
        for r in range(conv.filters.shape[1]):
            lines.append(_vec_line("filter", [str(f), str(r)], conv.filters[f, r]))
    for r in range(conv.projection.shape[0]):
        lines.append(_vec_line("proj", [str(r)], conv.projection[r]))
    for r in range(att.relation_proj.shape[0]):
        lines.append(_vec_line("att_relation_proj", [str(r)], att.relation_proj[r]))
    for r in range(att.entity_proj.shape[0]):
        lines.append(_vec_line("att_entity_proj", [str(r)], att.entity_proj[r]))
    lines.append(_vec_line("att_relation_query", [], att.relation_query))
    lines.append(_vec_line("att_entity_query", [], att.entity_query))
    lines.append("[end]")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path: str) -> GraphModel:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != EMB_MAGIC:
        raise ValueError(f"{path}: missing {EMB_MAGIC} header")
    if lines[-1] != "[end]":
        raise ValueError(f"{path}: truncated parameter snapshot")
    dim = int(lines[1].split("\t")[1])
    _, rows, cols, nf, kh, kw = lines[2].split("\t")
    leak = float(lines[3].split("\t")[1])
    conv = ConvEParams(
        filters=np.zeros((int(nf), int(kh), int(kw))),
        projection=None,
        rows=int(rows),
        cols=int(cols),
    )
    conv.projection = np.zeros((conv.feature_size(), dim))
    emb = EmbeddingTable(dim)
    att_rows: dict[str, list[tuple[int, np.ndarray]]] = {
        "att_relation_proj": [], "att_entity_proj": []
    }
    queries: dict[str, np.ndarray] = {}
    for line in lines[4:-1]:
        parts = line.split("\t")
        tag = parts[0]
        if tag == "entity":
            emb.vectors[parts[1]] = np.array([float(x) for x in parts[2:]])
        elif tag == "relation":
            emb.relations[parts[1]] = np.array([float(x) for x in parts[2:]])
        elif tag == "filter":
            conv.filters[int(parts[1]), int(parts[2])] = [float(x) for x in parts[3:]]
        elif tag == "proj":
            conv.projection[int(parts[1])] = [float(x) for x in parts[2:]]
        elif tag in att_rows:
            att_rows[tag].append((int(parts[1]), np.array([float(x) for x in parts[2:]])))
        elif tag in ("att_relation_query", "att_entity_query"):
            queries[tag] = np.array([float(x) for x in parts[1:]])
        else:
            raise ValueError(f"{path}: unknown row tag {tag!r}")
    att = AttentionParams(
        relation_proj=np.stack([v for _, v in sorted(att_rows["att_relation_proj"])]),
        entity_proj=np.stack([v for _, v in sorted(att_rows["att_entity_proj"])]),
        relation_query=queries["att_relation_query"],
        entity_query=queries["att_entity_query"],
        leak=leak,
    )
    return GraphModel(emb, conv, att)
