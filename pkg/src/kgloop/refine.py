"""Evidence harvesting and penalty-weighted graph refinement.

Harvest pairs every two entities recognized in the same post and counts the
pair once per post, under the positive counter for depressed authors and the
negative counter for everyone else. Each recognized entity also books one
label-free membership observation on its subcategory edge, so an entity's
tie to its class strengthens with use the same way its pair edges do. Pairs
seen with positive evidence become (or reinforce) active edges; negative
evidence only lands on edges that already exist.

Refinement minimizes

    sum_P -log sigmoid(f) + sum_N -w_c * log sigmoid(-f)

where N holds this slice's negatively-evidenced triplets. A triplet with
both kinds of evidence is a conflict: it leaves P, and its penalty
w_c = plausibility * matching weight is computed once at entry (softmax of
scores over the conflict set, grouped per head and relation) and frozen for
the whole call. Negative-only triplets keep w_c = 1. All knowledge-graph
parameters (embeddings, convolution, attention) step together; any cached
importance scores are stale afterwards and must be rebuilt by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kge
from .detector import UserDocument, recognize_lexicon
from .graph import (
    CLASS_NODE_IDS,
    SUBCAT,
    EndpointMismatchError,
    KnowledgeGraph,
    relation_for_classes,
)

SNIPPET_LIMIT = 280


@dataclass
class HarvestResult:
    positive: dict[tuple[str, str, str], int]
    negative: dict[tuple[str, str, str], int]
    provenance: dict[tuple[str, str, str], list[tuple[str, int, str]]]
    skipped_pairs: int = 0

    def conflicted(self) -> list[tuple[str, str, str]]:
        return sorted(set(self.positive) & set(self.negative))


def harvest(docs: list[UserDocument], kg: KnowledgeGraph) -> HarvestResult:
    """Count distinct recognized-entity pairs per post, plus one class
    membership observation per recognized entity per post.

    Pair evidence splits by author label; membership evidence (the entity's
    subcategory edge) accrues on every mention whoever wrote it."""
    result = HarvestResult({}, {}, {})
    for doc in docs:
        per_post: dict[int, list] = {}
        for ent in recognize_lexicon(doc, kg):
            per_post.setdefault(ent.span[0], []).append(ent)
        for pi, ents in sorted(per_post.items()):
            ids = sorted({e.matched_graph_entity for e in ents})
            snippet = " ".join(doc.posts[pi])[:SNIPPET_LIMIT]
            for eid in ids:
                cls = kg.entities[eid].entity_class
                class_node = CLASS_NODE_IDS.get(cls)
                if class_node is None:
                    continue
                key = (eid, SUBCAT, class_node)
                result.positive[key] = result.positive.get(key, 0) + 1
                result.provenance.setdefault(key, []).append(
                    (doc.user_id, doc.period, snippet)
                )
            seen: set[tuple[str, str, str]] = set()
            for i, a in enumerate(ids):
                for b in ids[i + 1:]:
                    try:
                        rel = relation_for_classes(
                            kg.entities[a].entity_class,
                            kg.entities[b].entity_class,
                        ).name
                    except EndpointMismatchError:
                        result.skipped_pairs += 1
                        continue
                    key = kg.canonical_key(a, rel, b)
                    if key in seen:
                        continue
                    seen.add(key)
                    side = result.positive if doc.label == 1 else result.negative
                    side[key] = side.get(key, 0) + 1
                    result.provenance.setdefault(key, []).append(
                        (doc.user_id, doc.period, snippet)
                    )
    return result


def apply_harvest(
    kg: KnowledgeGraph, result: HarvestResult, max_provenance: int = 5
) -> tuple[int, int]:
    """Merge harvest counts into the graph. Positive pairs create missing
    edges; negative-only pairs never do. Returns (new edges, touched)."""
    created = touched = 0
    for key in sorted(result.positive):
        head, rel, tail = key
        fresh = key not in kg.triplets
        trip = kg.add_triplet(head, rel, tail, pos_count=result.positive[key])
        room = max_provenance - len(trip.provenance)
        if room > 0:
            trip.provenance.extend(result.provenance[key][:room])
        created += fresh
        touched += 1
    for key in sorted(result.negative):
        if key not in kg.triplets:
            continue
        head, rel, tail = key
        kg.add_triplet(head, rel, tail, neg_count=result.negative[key])
        touched += 1
    return created, touched


# -- penalty weights --------------------------------------------------------


@dataclass
class ConflictRecord:
    key: tuple[str, str, str]
    pos_count: int
    neg_count: int
    score: float
    matching_weight: float
    plausibility: float
    penalty: float


def matching_weight(scores, tau: float) -> np.ndarray:
    """Softmax of conflict-set scores at temperature tau."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty conflict set")
    z = scores / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def plausibility(pos_count: int, neg_count: int) -> float:
    if pos_count + neg_count < 1:
        raise ValueError("no evidence to judge")
    return neg_count / (pos_count + neg_count)


def penalty(p: float, w_s: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"plausibility {p} outside [0, 1]")
    if not 0.0 <= w_s <= 1.0:
        raise ValueError(f"matching weight {w_s} outside [0, 1]")
    return p * w_s


def conflict_records(
    kg: KnowledgeGraph,
    model: kge.GraphModel,
    conflicted: list[tuple[str, str, str]],
    tau: float,
) -> dict[tuple[str, str, str], ConflictRecord]:
    """Frozen penalty weights for this refinement call, scored with the
    current aggregated embeddings."""
    if not conflicted:
        return {}
    effective = model.effective_vectors(kg)
    groups: dict[tuple[str, str], list[tuple[str, str, str]]] = {}
    for key in sorted(conflicted):
        if key not in kg.triplets:
            raise KeyError(f"conflicted triplet {key} not in graph")
        groups.setdefault((key[0], key[1]), []).append(key)
    records: dict[tuple[str, str, str], ConflictRecord] = {}
    for _, keys in sorted(groups.items()):
        scores = [
            kge.conve_score(
                model.conv,
                effective[k[0]],
                model.emb.relations[k[1]],
                effective[k[2]],
            )
            for k in keys
        ]
        weights = matching_weight(scores, tau)
        for key, f, w_s in zip(keys, scores, weights):
            trip = kg.triplets[key]
            p = plausibility(trip.pos_count, trip.neg_count)
            records[key] = ConflictRecord(
                key, trip.pos_count, trip.neg_count,
                float(f), float(w_s), p, penalty(p, float(w_s)),
            )
    return records


# -- refinement -------------------------------------------------------------


@dataclass
class RefineConfig:
    tau: float = 1.0
    learning_rate: float = 0.05
    steps: int = 50
    batch_size: int = 32

    def validate(self) -> None:
        if self.tau <= 0.0:
            raise ValueError("temperature must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("bad refinement schedule")


def refine(
    kg: KnowledgeGraph,
    positives,
    negatives,
    model: kge.GraphModel,
    cfg: RefineConfig,
    rng: np.random.Generator,
    steps: int | None = None,
) -> tuple[kge.GraphModel, list[float], dict[tuple[str, str, str], ConflictRecord]]:
    """Penalty-weighted refinement over harvested evidence. Returns the
    model, the per-step objective values, and the frozen conflict records."""
    cfg.validate()
    pos_keys = set(positives)
    neg_keys = set(negatives)
    for key in sorted(pos_keys | neg_keys):
        if key not in kg.triplets:
            raise KeyError(f"refinement key {key} not in graph")
    conflicted = sorted(pos_keys & neg_keys)
    records = conflict_records(kg, model, conflicted, cfg.tau)
    clean = sorted(pos_keys - set(conflicted))
    entries = [(key, 1.0, 1.0) for key in clean]
    for key in sorted(neg_keys):
        weight = records[key].penalty if key in records else 1.0
        entries.append((key, -1.0, weight))
    if not entries:
        raise ValueError("nothing to refine")
    ent_ids = sorted(model.emb.vectors)
    losses: list[float] = []
    total = cfg.steps if steps is None else steps
    for step in range(total):
        order = rng.permutation(len(entries))
        step_loss = 0.0
        for lo in range(0, len(entries), cfg.batch_size):
            batch = [entries[i] for i in order[lo:lo + cfg.batch_size]]
            keys = [key for key, _, _ in batch]
            signs = np.array([sign for _, sign, _ in batch])
            weights = np.array([w for _, _, w in batch])
            leaves, ent_row, rel_row = kge.model_leaves(model, ent_ids)
            scores = kge.scored_batch_t(kg, keys, leaves, ent_row, rel_row, model)
            terms = ad.mul(ad.log_sigmoid(ad.mul(scores, signs)), weights)
            loss = ad.mul(ad.tsum(terms), -1.0)
            if not np.isfinite(loss.value).all():
                raise RuntimeError(
                    f"refinement diverged: loss {loss.item()} at step {step}, "
                    f"lr {cfg.learning_rate}"
                )
            step_loss += loss.item()
            ad.backward(loss)
            kge.sgd_step(leaves, cfg.learning_rate)
            kge.write_back(model, leaves, ent_ids)
        losses.append(step_loss)
    return model, losses, records
