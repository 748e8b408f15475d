"""Candidate discovery and the two-reviewer expansion gate.

Mined surfaces become candidate triplets in one of three shapes: a co-mention
with an existing entity (scenario i), a co-mention with another new surface
(scenario ii), or, for a surface never seen next to anything, a bare
subcategory link to its proposed class (scenario iii). A candidate enters the
graph only after two independent reviewers each answer both questions
(is the entity real, is the relation right) with yes; two full rejections
quarantine the surface so it is never proposed again, and anything else
leaves the candidate held for the next round.

Every decision is appended to a tab-separated log; replaying the log against
the same candidate file reproduces the queue states exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import kge
from .detector import DetectorParams, UserDocument, recognize_lexicon, tokenize
from .graph import (
    CLASS_NODE_IDS,
    SUBCAT,
    Entity,
    KnowledgeGraph,
    ZeroVectorError,
    cosine_similarity,
    relation_for_classes,
)

CAND_MAGIC = "KGLOOP-CAND v1"
SCENARIOS = ("i", "ii", "iii")
SNIPPET_LIMIT = 280

_ID_RE = re.compile(r"[^a-z0-9]+")


class ReviewError(ValueError):
    """A decision the queue cannot accept."""


@dataclass
class ExpandConfig:
    novelty_threshold: float = 0.85
    prototype_floor: float = 0.3
    min_count: int = 2
    max_len: int = 3
    max_pairs_per_surface: int = 3
    max_provenance: int = 3

    def validate(self) -> None:
        if not 0.0 < self.novelty_threshold <= 1.0:
            raise ValueError("novelty threshold outside (0, 1]")
        if not 0.0 <= self.prototype_floor < 1.0:
            raise ValueError("prototype floor outside [0, 1)")
        if self.min_count < 1 or self.max_len < 1:
            raise ValueError("bad mining bounds")
        if self.max_pairs_per_surface < 1 or self.max_provenance < 1:
            raise ValueError("bad candidate bounds")


@dataclass
class CandidateTriplet:
    candidate_id: str
    surface: str
    proposed_class: str
    relation: str
    endpoint: str
    scenario: str
    new_category_flag: bool
    count: int
    provenance: list[str] = field(default_factory=list)
    period: int = 0
    review_state: str = "pending"


@dataclass(frozen=True)
class ReviewDecision:
    candidate_id: str
    reviewer_id: str
    q1: bool
    q2: bool
    timestamp: str
    note: str = ""

    def verdict(self) -> bool:
        return self.q1 and self.q2


# -- surface geometry -------------------------------------------------------


def surface_vector(params: DetectorParams, surface: str) -> np.ndarray:
    """Mean token embedding of a surface string."""
    tokens = tokenize(surface)
    if not tokens:
        raise ValueError(f"surface {surface!r} has no tokens")
    rows = [params.token_embeddings[params.token_id(t)] for t in tokens]
    return np.mean(rows, axis=0)


def _max_similarity(vec: np.ndarray, others: list[np.ndarray]) -> float:
    best = -1.0
    for other in others:
        try:
            best = max(best, cosine_similarity(vec, other))
        except ZeroVectorError:
            continue
    return best


def class_prototypes(
    kg: KnowledgeGraph, params: DetectorParams
) -> dict[str, np.ndarray]:
    """Per-class mean of member primary-surface embeddings."""
    members: dict[str, list[np.ndarray]] = {}
    for ent in kg.factor_entities():
        members.setdefault(ent.entity_class, []).append(
            surface_vector(params, ent.surface)
        )
    return {cls: np.mean(vecs, axis=0) for cls, vecs in sorted(members.items())}


def propose_class(
    vec: np.ndarray, prototypes: dict[str, np.ndarray], floor: float
) -> tuple[str, bool]:
    """Nearest class prototype; flags the proposal when even the best match
    sits below the floor. Ties break on class name."""
    if not prototypes:
        raise ValueError("no class prototypes to compare against")
    scored = []
    for cls in sorted(prototypes):
        try:
            sim = cosine_similarity(vec, prototypes[cls])
        except ZeroVectorError:
            sim = -1.0
        scored.append((-sim, cls))
    neg_sim, cls = min(scored)
    return cls, -neg_sim < floor


# -- candidate generation ---------------------------------------------------


def _clean_occurrences(
    post: list[str], needle: tuple[str, ...], masked: set[int]
) -> bool:
    n = len(needle)
    for i in range(len(post) - n + 1):
        if tuple(post[i:i + n]) == needle and not any(
            j in masked for j in range(i, i + n)
        ):
            return True
    return False


def generate_candidates(
    docs: list[UserDocument],
    kg: KnowledgeGraph,
    params: DetectorParams,
    period: int,
    cfg: ExpandConfig,
    mined: list[tuple[str, int]] | None = None,
) -> list[CandidateTriplet]:
    """Candidate triplets for this period's mined surfaces.

    Surfaces too close to any known surface are dropped as variants. Each
    survivor yields its strongest co-mention pairs; a surface with none gets
    the bare subcategory fallback.
    """
    from .detector import mine_new_surfaces

    cfg.validate()
    if mined is None:
        mined = mine_new_surfaces(docs, kg, cfg.min_count, cfg.max_len)
    if not mined:
        return []
    known = [
        surface_vector(params, s)
        for ent in kg.factor_entities()
        for s in ent.all_surfaces()
    ]
    prototypes = class_prototypes(kg, params)
    novel: dict[str, tuple[int, str, bool]] = {}
    for surface, count in mined:
        vec = surface_vector(params, surface)
        if _max_similarity(vec, known) >= cfg.novelty_threshold:
            continue
        cls, flagged = propose_class(vec, prototypes, cfg.prototype_floor)
        novel[surface] = (count, cls, flagged)
    if not novel:
        return []

    # co-mention pass: (surface, partner) -> [post count, snippets]
    with_existing: dict[tuple[str, str], list] = {}
    with_novel: dict[tuple[str, str], list] = {}
    needles = {s: tuple(s.split()) for s in novel}
    for doc in docs:
        if doc.label != 1:
            continue
        matched: dict[int, set[int]] = {i: set() for i in range(len(doc.posts))}
        present_ids: dict[int, set[str]] = {i: set() for i in range(len(doc.posts))}
        for ent in recognize_lexicon(doc, kg):
            pi, start, end = ent.span
            matched[pi].update(range(start, end))
            present_ids[pi].add(ent.matched_graph_entity)
        for pi, post in enumerate(doc.posts):
            here = [
                s for s, needle in sorted(needles.items())
                if _clean_occurrences(post, needle, matched[pi])
            ]
            if not here:
                continue
            snippet = " ".join(post)[:SNIPPET_LIMIT]
            for s in here:
                for eid in sorted(present_ids[pi]):
                    slot = with_existing.setdefault((s, eid), [0, []])
                    slot[0] += 1
                    slot[1].append(snippet)
            for i, a in enumerate(here):
                for b in here[i + 1:]:
                    slot = with_novel.setdefault((a, b), [0, []])
                    slot[0] += 1
                    slot[1].append(snippet)

    candidates: list[CandidateTriplet] = []
    for surface in sorted(novel):
        count, cls, flagged = novel[surface]
        pairs: list[tuple[int, str, str, str, list[str]]] = []
        for (s, eid), (n, snips) in with_existing.items():
            if s != surface:
                continue
            rel = relation_for_classes(cls, kg.entities[eid].entity_class).name
            pairs.append((n, "i", rel, eid, snips))
        for (a, b), (n, snips) in with_novel.items():
            if surface not in (a, b):
                continue
            other = b if a == surface else a
            rel = relation_for_classes(cls, novel[other][1]).name
            pairs.append((n, "ii", rel, f"surface:{other}", snips))
        pairs.sort(key=lambda p: (-p[0], p[1], p[3]))
        if not pairs:
            pairs = [(count, "iii", SUBCAT, CLASS_NODE_IDS[cls], [])]
        for n, scenario, rel, endpoint, snips in pairs[:cfg.max_pairs_per_surface]:
            candidates.append(
                CandidateTriplet(
                    candidate_id="",
                    surface=surface,
                    proposed_class=cls,
                    relation=rel,
                    endpoint=endpoint,
                    scenario=scenario,
                    new_category_flag=flagged,
                    count=n,
                    provenance=snips[:cfg.max_provenance],
                    period=period,
                )
            )
    candidates.sort(key=lambda c: (c.surface, c.scenario, c.endpoint))
    for i, cand in enumerate(candidates):
        cand.candidate_id = f"p{period:03d}-{i:03d}"
    return candidates


# -- review queue -----------------------------------------------------------

_DECIDED = ("approved", "rejected", "inconsistent")


class ReviewQueue:
    """Candidates awaiting two-reviewer verdicts.

    States: pending -> awaiting_second -> approved | rejected | inconsistent.
    Approval needs yes to both questions from both reviewers; two full
    rejections reject; any other pairing is inconsistent and held.
    """

    def __init__(self) -> None:
        self.candidates: dict[str, CandidateTriplet] = {}
        self.votes: dict[str, dict[str, ReviewDecision]] = {}
        self.decisions: list[ReviewDecision] = []
        self.applied: set[str] = set()

    def add_candidates(self, cands: list[CandidateTriplet]) -> None:
        for cand in cands:
            if cand.candidate_id in self.candidates:
                raise ReviewError(f"duplicate candidate id {cand.candidate_id!r}")
            if cand.scenario not in SCENARIOS:
                raise ReviewError(f"unknown scenario {cand.scenario!r}")
            self.candidates[cand.candidate_id] = cand
            self.votes[cand.candidate_id] = {}

    def by_state(self, state: str) -> list[CandidateTriplet]:
        return sorted(
            (c for c in self.candidates.values() if c.review_state == state),
            key=lambda c: (c.period, c.candidate_id),
        )

    def pending(self) -> list[CandidateTriplet]:
        return self.by_state("pending") + self.by_state("awaiting_second")

    def submit(self, decision: ReviewDecision) -> str:
        cand = self.candidates.get(decision.candidate_id)
        if cand is None:
            raise ReviewError(f"unknown candidate {decision.candidate_id!r}")
        if cand.review_state in _DECIDED:
            raise ReviewError(
                f"candidate {cand.candidate_id!r} already {cand.review_state}"
            )
        votes = self.votes[cand.candidate_id]
        if decision.reviewer_id in votes:
            raise ReviewError(
                f"reviewer {decision.reviewer_id!r} already voted on "
                f"{cand.candidate_id!r}"
            )
        if not decision.reviewer_id:
            raise ReviewError("empty reviewer id")
        votes[decision.reviewer_id] = decision
        self.decisions.append(decision)
        if len(votes) == 1:
            cand.review_state = "awaiting_second"
        else:
            verdicts = [v.verdict() for v in votes.values()]
            if all(verdicts):
                cand.review_state = "approved"
            elif not any(verdicts):
                cand.review_state = "rejected"
            else:
                cand.review_state = "inconsistent"
        return cand.review_state

    def drain_decided(self) -> list[CandidateTriplet]:
        """Decided candidates not yet folded into the graph; each is handed
        out exactly once so expansion rounds never apply a verdict twice."""
        out = [
            c for c in self.by_state("approved") + self.by_state("rejected")
            if c.candidate_id not in self.applied
        ]
        out.sort(key=lambda c: (c.period, c.candidate_id))
        self.applied.update(c.candidate_id for c in out)
        return out


def oracle_reviews(
    queue: ReviewQueue,
    true_surfaces: set[str],
    timestamp: str = "1970-01-01T00:00:00+00:00",
) -> list[ReviewDecision]:
    """Two deterministic reviewers that approve exactly the true surfaces.
    Votes only on candidates nobody has touched yet."""
    decisions = []
    for cand in queue.by_state("pending"):
        keep = cand.surface in true_surfaces
        for reviewer in ("oracle_a", "oracle_b"):
            decisions.append(
                ReviewDecision(cand.candidate_id, reviewer, keep, keep, timestamp)
            )
    return decisions


# -- graph mutation ---------------------------------------------------------


@dataclass
class ExpansionSummary:
    added_entities: list[str]
    added_edges: list[tuple[str, str, str]]
    quarantined: list[str]
    skipped_edges: int = 0


def _entity_id_for(kg: KnowledgeGraph, surface: str) -> str:
    base = _ID_RE.sub("_", surface).strip("_") or "entity"
    eid, n = base, 1
    while eid in kg.entities:
        n += 1
        eid = f"{base}_{n}"
    return eid


def apply_decisions(
    kg: KnowledgeGraph,
    model: kge.GraphModel,
    candidates: list[CandidateTriplet],
    rng: np.random.Generator,
    period: int,
) -> ExpansionSummary:
    """Fold a drained batch of decided candidates into the graph.

    Approved surfaces become discovered entities with a fresh embedding and a
    subcategory edge; scenario edges land where both endpoints exist. Twice-
    rejected surfaces are quarantined. Undecided candidates are ignored.
    """
    summary = ExpansionSummary([], [], [])
    approved = sorted(
        (c for c in candidates if c.review_state == "approved"),
        key=lambda c: (c.period, c.candidate_id),
    )
    for cand in approved:
        if cand.surface in kg.surface_index():
            continue
        eid = _entity_id_for(kg, cand.surface)
        kg.add_entity(
            Entity(eid, cand.proposed_class, cand.surface,
                   first_period=period, status="discovered")
        )
        model.emb.vectors[eid] = kge.init_vector(model.emb.dim, rng)
        trip = kg.add_triplet(
            eid, SUBCAT, CLASS_NODE_IDS[cand.proposed_class], pos_count=1
        )
        summary.added_entities.append(eid)
        summary.added_edges.append(trip.key())
    surfaces = kg.surface_index()
    seen_pairs: set[tuple[str, str, str]] = set()
    for cand in approved:
        if cand.scenario == "iii":
            continue
        head = surfaces.get(cand.surface)
        if cand.scenario == "i":
            tail = cand.endpoint if cand.endpoint in kg.entities else None
        else:
            tail = surfaces.get(cand.endpoint.removeprefix("surface:"))
            if tail is not None and kg.entities[tail].status == "quarantined":
                tail = None
        if head is None or tail is None or head == tail:
            summary.skipped_edges += 1
            continue
        key = kg.canonical_key(head, cand.relation, tail)
        if key in seen_pairs:
            # the mirrored scenario-ii candidate already landed this edge
            continue
        seen_pairs.add(key)
        trip = kg.add_triplet(
            head, cand.relation, tail, pos_count=cand.count,
            provenance=[("expansion", period, s) for s in cand.provenance],
        )
        if trip.key() not in summary.added_edges:
            summary.added_edges.append(trip.key())
    rejected = sorted(
        (c for c in candidates if c.review_state == "rejected"),
        key=lambda c: (c.period, c.candidate_id),
    )
    for cand in rejected:
        if cand.surface in kg.surface_index():
            continue
        eid = _entity_id_for(kg, cand.surface)
        kg.add_entity(
            Entity(eid, cand.proposed_class, cand.surface,
                   first_period=period, status="quarantined")
        )
        summary.quarantined.append(eid)
    return summary


# -- serialization ----------------------------------------------------------


def save_candidates(path: str, candidates: list[CandidateTriplet], period: int) -> None:
    lines = [CAND_MAGIC, f"period\t{period}"]
    for cand in candidates:
        for text in (cand.surface, cand.relation, cand.endpoint):
            if "\t" in text or "\n" in text:
                raise ValueError(f"unserializable field {text!r}")
        lines.append(
            "candidate\t" + "\t".join(
                (
                    cand.candidate_id, cand.surface, cand.proposed_class,
                    cand.relation, cand.endpoint, cand.scenario,
                    "1" if cand.new_category_flag else "0",
                    str(cand.count), str(cand.period), cand.review_state,
                )
            )
        )
        for snip in cand.provenance:
            lines.append(f"prov\t{cand.candidate_id}\t{snip}")
    lines.append("[end]")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_candidates(path: str) -> tuple[list[CandidateTriplet], int]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CAND_MAGIC:
        raise ValueError(f"not a {CAND_MAGIC} file")
    if "[end]" not in lines:
        raise ValueError("truncated candidate file")
    period = 0
    out: list[CandidateTriplet] = []
    index: dict[str, CandidateTriplet] = {}
    for line in lines[1:lines.index("[end]")]:
        tag, _, rest = line.partition("\t")
        if tag == "period":
            period = int(rest)
        elif tag == "candidate":
            f = rest.split("\t")
            if len(f) != 10:
                raise ValueError(f"malformed candidate line {line!r}")
            cand = CandidateTriplet(
                candidate_id=f[0], surface=f[1], proposed_class=f[2],
                relation=f[3], endpoint=f[4], scenario=f[5],
                new_category_flag=f[6] == "1", count=int(f[7]),
                period=int(f[8]), review_state=f[9],
            )
            out.append(cand)
            index[cand.candidate_id] = cand
        elif tag == "prov":
            cid, _, snip = rest.partition("\t")
            index[cid].provenance.append(snip)
        else:
            raise ValueError(f"unknown line tag {tag!r}")
    return out, period


def format_decision(d: ReviewDecision) -> str:
    for text in (d.reviewer_id, d.candidate_id, d.timestamp, d.note):
        if "\t" in text or "\n" in text:
            raise ValueError(f"unserializable field {text!r}")
    base = "\t".join(
        (
            d.reviewer_id, d.candidate_id,
            "yes" if d.q1 else "no", "yes" if d.q2 else "no",
            d.timestamp,
        )
    )
    return base + ("\t" + d.note if d.note else "")


def parse_decision(line: str) -> ReviewDecision:
    f = line.rstrip("\n").split("\t")
    if len(f) not in (5, 6):
        raise ValueError(f"malformed decision line {line!r}")
    if f[2] not in ("yes", "no") or f[3] not in ("yes", "no"):
        raise ValueError(f"malformed verdict in {line!r}")
    return ReviewDecision(
        candidate_id=f[1], reviewer_id=f[0],
        q1=f[2] == "yes", q2=f[3] == "yes",
        timestamp=f[4], note=f[5] if len(f) == 6 else "",
    )


def append_decisions(path: str, decisions: list[ReviewDecision]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(format_decision(d) + "\n")


def replay_decisions(queue: ReviewQueue, path: str) -> int:
    """Re-apply a decision log in order; returns the number applied."""
    applied = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                queue.submit(parse_decision(line))
                applied += 1
    return applied
