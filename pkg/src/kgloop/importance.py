"""Entity importance via most-probable paths to the depression node.

A path starts at a factor entity, walks co-mention and subcategory edges with
the normalized transition probabilities, and must finish with the two hops
(ClassNode, DepressionNode). The class hop probability is derived from class
co-mention frequency with additive smoothing:

    p(class -> depression) = (class count + 1) / (sum over classes + 5)

and can be overridden per class from config. A path's score r_path is the
product of its hop probabilities, so it lies in (0, 1] and never grows with
extra hops.

Search: UCT Monte Carlo tree search (UCB1 selection, single-child expansion,
uniform random rollout, max-reward backup) with subtree-exhaustion marking so
small graphs terminate early with the exact optimum; an exhaustive
depth-first oracle covers graphs small enough to enumerate.

Importance transfer: a recognized surface's weight is the similarity-weighted
sum of the cached r_path values of its top-M most similar graph entities
(unnormalized). r_path values are computed once per period and cached;
entities with no admissible path score 0 in the cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionParams,
    IsolatedEntityError,
    transition_probabilities,
)
from .graph import (
    CLASS_NODE_IDS,
    DEPRESSION_ID,
    FACTOR_CLASSES,
    SUBCAT,
    KnowledgeGraph,
    top_m_similar,
)


class NoPathError(RuntimeError):
    """No admissible path from the start entity to the depression node."""


@dataclass
class MctsConfig:
    budget: int = 2000
    max_depth: int = 5
    exploration: float = 1.414
    seed: int = 0

    def validate(self) -> None:
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.max_depth < 2:
            raise ValueError("max_depth must be >= 2 (subcategory + class hop)")
        if self.exploration < 0.0:
            raise ValueError("exploration constant must be >= 0")


@dataclass(frozen=True)
class PathResult:
    nodes: tuple[str, ...]
    hop_scores: tuple[float, ...]
    r_path: float


@dataclass
class TransitionTable:
    """Per-head transition probabilities, tails in sorted order.

    Factor entities carry their normalized outgoing probabilities (empty for
    isolated entities); each class node carries the single class hop to the
    depression node; the depression node is absorbing.
    """

    moves: dict[str, dict[str, float]]

    def probability(self, head: str, tail: str) -> float:
        return self.moves[head][tail]


def class_hop_scores(
    kg: KnowledgeGraph, overrides: dict[str, float] | None = None
) -> dict[str, float]:
    """Class-node -> depression hop probability per class node id.

    A co-mention triplet contributes its full evidence count to each distinct
    endpoint class.
    """
    counts = {cls: 0 for cls in FACTOR_CLASSES}
    for trip in kg.triplets.values():
        if trip.status != "active" or trip.relation == SUBCAT:
            continue
        total = trip.pos_count + trip.neg_count
        for cls in {
            kg.entities[trip.head].entity_class,
            kg.entities[trip.tail].entity_class,
        }:
            if cls in counts:
                counts[cls] += total
    denom = sum(counts.values()) + 5
    scores = {
        CLASS_NODE_IDS[cls]: (counts[cls] + 1) / denom for cls in FACTOR_CLASSES
    }
    for cls, value in (overrides or {}).items():
        if cls not in CLASS_NODE_IDS:
            raise ValueError(f"unknown class {cls!r} in class hop override")
        if not 0.0 < value <= 1.0:
            raise ValueError(f"class hop override for {cls} outside (0, 1]")
        scores[CLASS_NODE_IDS[cls]] = value
    return scores


def build_transition_table(
    kg: KnowledgeGraph,
    ent_vectors: dict[str, np.ndarray],
    rel_vectors: dict[str, np.ndarray],
    params: AttentionParams,
    overrides: dict[str, float] | None = None,
) -> TransitionTable:
    """Normalized move probabilities for every node, from the attention maps
    over effective embeddings plus the smoothed class hops."""
    moves: dict[str, dict[str, float]] = {}
    for node_id, score in class_hop_scores(kg, overrides).items():
        moves[node_id] = {DEPRESSION_ID: score}
    moves[DEPRESSION_ID] = {}
    for ent in kg.factor_entities():
        try:
            probs = transition_probabilities(
                ent.entity_id, kg, ent_vectors, rel_vectors, params
            )
        except IsolatedEntityError:
            moves[ent.entity_id] = {}
            continue
        moves[ent.entity_id] = {
            tail: p for (_rel, tail), p in sorted(probs.items(), key=lambda kv: kv[0][1])
        }
    return TransitionTable(moves)


def _finish(nodes: list[str], table: TransitionTable) -> PathResult:
    hops = tuple(
        table.probability(a, b) for a, b in zip(nodes, nodes[1:])
    )
    r_path = 1.0
    for p in hops:
        r_path *= p
    return PathResult(tuple(nodes), hops, r_path)


def brute_force_best_path(
    kg: KnowledgeGraph, table: TransitionTable, start: str, max_depth: int
) -> PathResult:
    """Exhaustive enumeration of simple paths; max product, ties resolved to
    the lexicographically smallest node sequence. Small graphs only."""
    factor_count = len(kg.factor_entities())
    if factor_count > 14:
        raise ValueError(
            f"{factor_count} factor entities; exhaustive search capped at 14"
        )
    ent = kg.entities.get(start)
    if ent is None or ent.entity_class not in FACTOR_CLASSES:
        raise ValueError(f"start {start!r} is not a factor entity")
    best: tuple[float, tuple[str, ...]] | None = None

    def dfs(node: str, visited: set, product: float, path: list, depth: int):
        nonlocal best
        if node == DEPRESSION_ID:
            if best is None or product > best[0]:
                best = (product, tuple(path))
            return
        if depth == max_depth:
            return
        for tail, p in sorted(table.moves[node].items()):
            if tail in visited:
                continue
            extended = product * p
            if best is not None and extended < best[0]:
                continue  # completions only shrink the product
            visited.add(tail)
            path.append(tail)
            dfs(tail, visited, extended, path, depth + 1)
            path.pop()
            visited.remove(tail)

    dfs(start, {start}, 1.0, [start], 0)
    if best is None:
        raise NoPathError(f"no path from {start!r} within depth {max_depth}")
    return _finish(list(best[1]), table)


class _SearchNode:
    __slots__ = (
        "path", "product", "visits", "best_reward", "children", "untried",
        "terminal", "exhausted",
    )

    def __init__(self, path: tuple[str, ...], product: float, table, max_depth):
        self.path = path
        self.product = product
        self.visits = 0
        self.best_reward = 0.0
        self.children: dict[str, _SearchNode] = {}
        last = path[-1]
        if last == DEPRESSION_ID or len(path) - 1 >= max_depth:
            self.untried: list[str] = []
        else:
            seen = set(path)
            self.untried = sorted(t for t in table.moves[last] if t not in seen)
        self.terminal = not self.untried
        self.exhausted = self.terminal


def mcts_best_path(
    kg: KnowledgeGraph,
    table: TransitionTable,
    start: str,
    cfg: MctsConfig,
    rng: np.random.Generator | None = None,
) -> PathResult:
    """UCT search for the highest-product path; exact when the budget
    exhausts the reachable path space."""
    cfg.validate()
    ent = kg.entities.get(start)
    if ent is None or ent.entity_class not in FACTOR_CLASSES:
        raise ValueError(f"start {start!r} is not a factor entity")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    root = _SearchNode((start,), 1.0, table, cfg.max_depth)
    best: tuple[float, tuple[str, ...]] | None = None

    def consider(product: float, nodes: tuple[str, ...]) -> None:
        nonlocal best
        if best is None or product > best[0] or (
            product == best[0] and nodes < best[1]
        ):
            best = (product, nodes)

    for _ in range(cfg.budget):
        if root.exhausted:
            break
        node = root
        lineage = [root]
        # selection: descend fully expanded internal nodes by UCB1
        while not node.terminal and not node.untried:
            log_n = math.log(node.visits) if node.visits > 0 else 0.0
            pick = None
            pick_score = None
            for tail in sorted(node.children):
                child = node.children[tail]
                if child.exhausted:
                    continue
                ucb = child.best_reward + cfg.exploration * math.sqrt(
                    log_n / child.visits
                )
                if pick_score is None or ucb > pick_score:
                    pick, pick_score = child, ucb
            if pick is None:
                break  # children all exhausted; marking happens below
            node = pick
            lineage.append(node)
        # expansion: one untried move, chosen uniformly
        if node.untried:
            tail = node.untried.pop(int(rng.integers(len(node.untried))))
            child = _SearchNode(
                node.path + (tail,),
                node.product * table.probability(node.path[-1], tail),
                table, cfg.max_depth,
            )
            node.children[tail] = child
            node = child
            lineage.append(node)
        # rollout: uniform random continuation to the depression node
        current = node.path[-1]
        if current == DEPRESSION_ID:
            reward = node.product
            consider(reward, node.path)
        else:
            walk = list(node.path)
            seen = set(walk)
            product = node.product
            while current != DEPRESSION_ID and len(walk) - 1 < cfg.max_depth:
                options = sorted(t for t in table.moves[current] if t not in seen)
                if not options:
                    break
                current = options[int(rng.integers(len(options)))]
                product *= table.probability(walk[-1], current)
                walk.append(current)
                seen.add(current)
            if current == DEPRESSION_ID:
                reward = product
                consider(reward, tuple(walk))
            else:
                reward = 0.0
        # backup: visit counts and max reward, then exhaustion marking
        for item in lineage:
            item.visits += 1
            item.best_reward = max(item.best_reward, reward)
        for item in reversed(lineage):
            if not item.terminal and not item.untried and item.children and all(
                c.exhausted for c in item.children.values()
            ):
                item.exhausted = True
    if best is None:
        raise NoPathError(
            f"no complete path from {start!r} in {cfg.budget} rollouts"
        )
    return _finish(list(best[1]), table)


# -- importance transfer ----------------------------------------------------


@dataclass
class ImportanceScore:
    surface: str
    matches: tuple[tuple[str, float, float], ...]  # (entity, sim, r_path)
    weight: float


@dataclass
class ImportanceCache:
    """Per-period best-path scores for every factor entity; 0.0 when no path
    exists."""

    period: int
    r_path: dict[str, float] = field(default_factory=dict)
    best_paths: dict[str, PathResult | None] = field(default_factory=dict)


def build_importance_cache(
    kg: KnowledgeGraph,
    table: TransitionTable,
    cfg: MctsConfig,
    period: int | None = None,
) -> ImportanceCache:
    """Run the path search once per factor entity with an entity-rank seeded
    stream so results do not depend on iteration interleaving."""
    cache = ImportanceCache(kg.period if period is None else period)
    for rank, ent in enumerate(kg.factor_entities()):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, rank)))
        try:
            result = mcts_best_path(kg, table, ent.entity_id, cfg, rng)
        except NoPathError:
            cache.r_path[ent.entity_id] = 0.0
            cache.best_paths[ent.entity_id] = None
            continue
        cache.r_path[ent.entity_id] = result.r_path
        cache.best_paths[ent.entity_id] = result
    return cache


def entity_importance(
    surface: str,
    query: np.ndarray,
    kg: KnowledgeGraph,
    vectors: dict[str, np.ndarray],
    cache: ImportanceCache,
    m: int,
) -> ImportanceScore:
    """Similarity-weighted transfer of cached path scores to one recognized
    surface (unnormalized sum over the top-M matches)."""
    ranked = top_m_similar(kg, vectors, query, m)
    if not ranked:
        raise ValueError("no graph entities with embeddings to match against")
    matches = tuple(
        (eid, sim, cache.r_path.get(eid, 0.0)) for eid, sim in ranked
    )
    weight = float(sum(sim * r for _eid, sim, r in matches))
    return ImportanceScore(surface, matches, weight)
