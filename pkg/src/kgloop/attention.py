"""Hierarchical neighborhood attention and transition scoring.

Three levels over an entity's one-hop neighborhood:

  relation level   a_hr = relation_proj @ [h ; v_r]
                   alpha_r = softmax_r(leaky(relation_query . a_hr))
  entity level     b_hrt = entity_proj @ [a_hr ; t]
                   beta_t = softmax_t(leaky(entity_query . b_hrt))   (within r)
  triple level     gamma_hrt = alpha_r * beta_t

The leaky slope (default 0.2) is part of the parameters. Transition scoring
turns a triple score into an edge affinity

  raw(h -> t) = exp(gamma * sqrt(out_degree(h, r))) * ln(pair_count + 1)

which is normalized over the head's outgoing candidates to a probability
before any path search consumes it.

Aggregation produces the effective embedding used by the triplet scorer and
all similarity queries:

  h' = ReLU( sum_{r,t} gamma_hrt * (relation_proj @ [t ; v_r]) + h )

Isolated entities pass through unchanged. Two implementations are kept in
lockstep: a numpy path for inference/search and a tensor path so training
losses backpropagate into the attention parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import KnowledgeGraph


class IsolatedEntityError(ValueError):
    """Attention asked of an entity with an empty neighborhood."""


@dataclass
class AttentionParams:
    relation_proj: np.ndarray  # (d, 2d), shared with the message transform
    entity_proj: np.ndarray    # (d, 2d)
    relation_query: np.ndarray  # (d,)
    entity_query: np.ndarray    # (d,)
    leak: float = 0.2

    @property
    def dim(self) -> int:
        return self.relation_proj.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "att_relation_proj": self.relation_proj,
            "att_entity_proj": self.entity_proj,
            "att_relation_query": self.relation_query,
            "att_entity_query": self.entity_query,
        }


def init_attention_params(
    dim: int, rng: np.random.Generator, leak: float = 0.2
) -> AttentionParams:
    scale = 1.0 / math.sqrt(dim)
    return AttentionParams(
        relation_proj=rng.uniform(-scale, scale, size=(dim, 2 * dim)),
        entity_proj=rng.uniform(-scale, scale, size=(dim, 2 * dim)),
        relation_query=rng.uniform(-scale, scale, size=dim),
        entity_query=rng.uniform(-scale, scale, size=dim),
        leak=leak,
    )


@dataclass
class AttentionScores:
    """Per-neighborhood attention maps for one head entity."""

    relation_level: dict[str, float]          # alpha, sums to 1 over relations
    entity_level: dict[tuple[str, str], float]  # beta, sums to 1 within a relation
    triple_level: dict[tuple[str, str], float]  # alpha * beta
    pre_activations: dict[str, np.ndarray] = field(default_factory=dict)


def _leaky(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0.0, x, slope * x)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _grouped_neighbors(kg: KnowledgeGraph, head: str) -> list[tuple[str, list[str]]]:
    rels = kg.adjacency.get(head, {})
    return [(rel, sorted(rels[rel])) for rel in sorted(rels) if rels[rel]]


def attention_scores(
    head: str,
    kg: KnowledgeGraph,
    ent_vectors: dict[str, np.ndarray],
    rel_vectors: dict[str, np.ndarray],
    params: AttentionParams,
) -> AttentionScores:
    groups = _grouped_neighbors(kg, head)
    if not groups:
        raise IsolatedEntityError(f"entity {head!r} has no neighbors")
    h = ent_vectors[head]
    pre: dict[str, np.ndarray] = {}
    logits = []
    # leaky applies to the probe score, not the pre-activation vector
    for rel, _ in groups:
        a = params.relation_proj @ np.concatenate([h, rel_vectors[rel]])
        pre[rel] = a
        logits.append(float(_leaky(np.array(params.relation_query @ a), params.leak)))
    alpha_vals = _softmax(np.array(logits))
    relation_level = {rel: float(v) for (rel, _), v in zip(groups, alpha_vals)}
    entity_level: dict[tuple[str, str], float] = {}
    triple_level: dict[tuple[str, str], float] = {}
    for rel, tails in groups:
        beta_logits = []
        for tail in tails:
            b = params.entity_proj @ np.concatenate([pre[rel], ent_vectors[tail]])
            beta_logits.append(
                float(_leaky(np.array(params.entity_query @ b), params.leak))
            )
        beta_vals = _softmax(np.array(beta_logits))
        for tail, bv in zip(tails, beta_vals):
            entity_level[(rel, tail)] = float(bv)
            triple_level[(rel, tail)] = float(relation_level[rel] * bv)
    return AttentionScores(relation_level, entity_level, triple_level, pre)


def transition_score(triple_attention: float, tail_fanout: int, pair_count: int) -> float:
    """Raw edge affinity; strictly increasing in pair count and attention,
    and in fanout whenever the attention weight is positive."""
    if not 0.0 <= triple_attention <= 1.0:
        raise ValueError(f"triple attention {triple_attention} outside [0, 1]")
    if tail_fanout < 1 or pair_count < 1:
        raise ValueError("fanout and pair count must be >= 1")
    return math.exp(triple_attention * math.sqrt(tail_fanout)) * math.log(pair_count + 1)


def transition_probabilities(
    head: str,
    kg: KnowledgeGraph,
    ent_vectors: dict[str, np.ndarray],
    rel_vectors: dict[str, np.ndarray],
    params: AttentionParams,
) -> dict[tuple[str, str], float]:
    """Normalized transition probabilities over the head's outgoing edges."""
    scores = attention_scores(head, kg, ent_vectors, rel_vectors, params)
    raw: dict[tuple[str, str], float] = {}
    for (rel, tail), gamma in sorted(scores.triple_level.items()):
        raw[(rel, tail)] = transition_score(
            gamma, kg.out_degree(head, rel), kg.pair_count(head, rel, tail)
        )
    total = sum(raw.values())
    return {key: value / total for key, value in raw.items()}


def aggregate(
    head: str,
    kg: KnowledgeGraph,
    ent_vectors: dict[str, np.ndarray],
    rel_vectors: dict[str, np.ndarray],
    params: AttentionParams,
) -> np.ndarray:
    """Effective embedding of the head under its neighborhood."""
    groups = _grouped_neighbors(kg, head)
    h = ent_vectors[head]
    if not groups:
        return h.copy()
    scores = attention_scores(head, kg, ent_vectors, rel_vectors, params)
    acc = h.copy()
    for rel, tails in groups:
        for tail in tails:
            message = params.relation_proj @ np.concatenate(
                [ent_vectors[tail], rel_vectors[rel]]
            )
            acc += scores.triple_level[(rel, tail)] * message
    return np.maximum(acc, 0.0)


def aggregate_all(
    kg: KnowledgeGraph,
    ent_vectors: dict[str, np.ndarray],
    rel_vectors: dict[str, np.ndarray],
    params: AttentionParams,
) -> dict[str, np.ndarray]:
    return {
        eid: aggregate(eid, kg, ent_vectors, rel_vectors, params)
        for eid, ent in sorted(kg.entities.items())
        if ent.status != "quarantined"
    }


# -- tensor path (training) -------------------------------------------------


def aggregate_t(
    head: str,
    kg: KnowledgeGraph,
    ent_matrix: ad.Tensor,
    rel_matrix: ad.Tensor,
    ent_row: dict[str, int],
    rel_row: dict[str, int],
    leaves: dict[str, ad.Tensor],
    leak: float,
) -> ad.Tensor:
    """Differentiable aggregation; mirrors `aggregate` exactly.

    `leaves` carries the attention parameter tensors keyed as in
    AttentionParams.arrays(). Returns a (1, d) tensor.
    """
    h_idx = [ent_row[head]]
    h_vec = ad.gather(ent_matrix, h_idx)  # (1, d)
    groups = _grouped_neighbors(kg, head)
    if not groups:
        return h_vec
    rp = leaves["att_relation_proj"]
    ep = leaves["att_entity_proj"]
    rq = ad.reshape(leaves["att_relation_query"], (-1, 1))
    eq_ = ad.reshape(leaves["att_entity_query"], (-1, 1))
    m = len(groups)
    rel_rows = [rel_row[rel] for rel, _ in groups]
    h_rep = ad.gather(ent_matrix, h_idx * m)            # (m, d)
    r_vecs = ad.gather(rel_matrix, rel_rows)            # (m, d)
    pre = ad.matmul(ad.concat([h_rep, r_vecs], axis=1), _t(rp))  # (m, d)
    alpha_logits = ad.leaky_relu(ad.matmul(pre, rq), leak)       # (m, 1)
    alpha = ad.softmax(ad.reshape(alpha_logits, (1, m)), axis=-1)  # (1, m)
    contribs = []
    for i, (rel, tails) in enumerate(groups):
        k = len(tails)
        tail_rows = [ent_row[t] for t in tails]
        t_vecs = ad.gather(ent_matrix, tail_rows)        # (k, d)
        a_rep = ad.gather(pre, [i] * k)                  # (k, d)
        b = ad.matmul(ad.concat([a_rep, t_vecs], axis=1), _t(ep))  # (k, d)
        beta_logits = ad.leaky_relu(ad.matmul(b, eq_), leak)       # (k, 1)
        beta = ad.softmax(ad.reshape(beta_logits, (1, k)), axis=-1)  # (1, k)
        r_rep = ad.gather(rel_matrix, [rel_row[rel]] * k)  # (k, d)
        msgs = ad.matmul(ad.concat([t_vecs, r_rep], axis=1), _t(rp))  # (k, d)
        alpha_i = ad.gather(ad.reshape(alpha, (m, 1)), [i])  # (1, 1)
        weighted = ad.matmul(beta, msgs)                  # (1, d)
        contribs.append(ad.mul(alpha_i, weighted))
    total = contribs[0]
    for extra in contribs[1:]:
        total = ad.add(total, extra)
    return ad.relu(ad.add(total, h_vec))


def _t(tensor: ad.Tensor) -> ad.Tensor:
    """Differentiable transpose of a 2-D tensor."""
    out = ad.Tensor(tensor.value.T, (tensor,))

    def back(g):
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.value)
        tensor.grad += g.T

    out._backward = back
    return out
