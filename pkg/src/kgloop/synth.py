"""Synthetic time-sliced corpora with known entity-importance ground truth.

Every configured surface has an explicit emission rate per author class, so
the true importance ordering is just the ratio of those rates: signal
surfaces lean positive, common surfaces are emitted evenly, and emergent
surfaces start firing (positives only) at their onset period. A generator
this transparent is what makes trend assertions on the full loop testable.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .detector import UserDocument, make_document
from .graph import (
    CLASS_NODE_IDS,
    FACTOR_CLASSES,
    SUBCAT,
    Entity,
    KnowledgeGraph,
    reserved_entities,
)

_ID_RE = re.compile(r"[^a-z0-9]+")

DEFAULT_FILLER = (
    "today", "really", "just", "still", "about", "maybe", "some", "quiet",
    "morning", "evening", "walk", "coffee", "weather", "music", "week",
)


@dataclass
class SynthConfig:
    users_per_period: int = 40
    depressed_fraction: float = 0.5
    posts_per_user: int = 4
    # (surface, rate when depressed, rate when not)
    signal: tuple[tuple[str, float, float], ...] = (
        ("hopeless", 0.8, 0.05),
        ("worthless", 0.7, 0.05),
        ("insomnia", 0.6, 0.1),
        ("fatigue", 0.5, 0.15),
    )
    # (surface, rate for everyone)
    common: tuple[tuple[str, float], ...] = (
        ("tired", 0.3),
        ("stress", 0.25),
    )
    # (surface, onset period, rate when depressed from onset on)
    emergent: tuple[tuple[str, int, float], ...] = ()
    filler: tuple[str, ...] = DEFAULT_FILLER
    seed: int = 0

    def validate(self) -> None:
        if self.users_per_period < 1:
            raise ValueError("need at least one user per period")
        if not 0.0 <= self.depressed_fraction <= 1.0:
            raise ValueError("depressed fraction outside [0, 1]")
        if self.posts_per_user < 1:
            raise ValueError("need at least one post per user")
        if not self.filler:
            raise ValueError("empty filler vocabulary")
        for surface, pos, neg in self.signal:
            if not surface or not (0.0 <= pos <= 1.0 and 0.0 <= neg <= 1.0):
                raise ValueError(f"bad signal spec {(surface, pos, neg)}")
        for surface, rate in self.common:
            if not surface or not 0.0 <= rate <= 1.0:
                raise ValueError(f"bad common spec {(surface, rate)}")
        for surface, onset, rate in self.emergent:
            if not surface or not 0.0 <= rate <= 1.0:
                raise ValueError(f"bad emergent spec {(surface, onset, rate)}")
            if onset < 2:
                raise ValueError(f"emergent onset before period 2: {surface}")
        if len(self.emergent) > self.posts_per_user:
            raise ValueError("more emergent surfaces than posts per user")
        surfaces = self.known_surfaces() + [s for s, _, _ in self.emergent]
        if len(set(surfaces)) != len(surfaces):
            raise ValueError("duplicate surface across entity sets")

    def known_surfaces(self) -> list[str]:
        return [s for s, _, _ in self.signal] + [s for s, _ in self.common]


@dataclass(frozen=True)
class RankedSurface:
    surface: str
    ratio: float


def ground_truth_ranking(cfg: SynthConfig, period: int) -> list[RankedSurface]:
    """Surfaces active by this period, strongest depression lean first.
    The lean is the positive-class rate over the negative-class rate."""
    rows: list[RankedSurface] = []
    for surface, pos, neg in cfg.signal:
        rows.append(RankedSurface(surface, pos / neg if neg > 0 else math.inf))
    for surface, _rate in cfg.common:
        rows.append(RankedSurface(surface, 1.0))
    for surface, onset, rate in cfg.emergent:
        if period >= onset and rate > 0:
            rows.append(RankedSurface(surface, math.inf))
    rows.sort(key=lambda r: (-r.ratio, r.surface))
    return rows


def synth_corpus(
    cfg: SynthConfig, period: int
) -> tuple[list[UserDocument], list[RankedSurface]]:
    """One period's users plus the ground-truth importance ranking."""
    cfg.validate()
    if period < 1:
        raise ValueError("periods are numbered from 1")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, period)))
    n_pos = round(cfg.users_per_period * cfg.depressed_fraction)
    docs: list[UserDocument] = []
    for idx in range(cfg.users_per_period):
        label = 1 if idx < n_pos else 0
        active = [
            (surface, rate) for surface, onset, rate in cfg.emergent
            if label == 1 and period >= onset
        ]
        # each active emergent gets its own post so they never co-occur
        slots: dict[str, int] = {}
        if active:
            perm = rng.permutation(cfg.posts_per_user)
            slots = {surface: int(perm[i]) for i, (surface, _r) in enumerate(active)}
        posts = []
        for post_idx in range(cfg.posts_per_user):
            emitted: list[str] = []
            for surface, pos, neg in cfg.signal:
                if rng.random() < (pos if label == 1 else neg):
                    emitted.append(surface)
            for surface, rate in cfg.common:
                if rng.random() < rate:
                    emitted.append(surface)
            for surface, rate in active:
                if slots[surface] == post_idx and rng.random() < rate:
                    emitted.append(surface)
            words: list[str] = []
            for surface in emitted:
                words.append(str(rng.choice(cfg.filler)))
                words.extend(surface.split())
            pad = rng.integers(2, 5)
            words.extend(str(w) for w in rng.choice(cfg.filler, size=pad))
            posts.append(" ".join(words))
        docs.append(make_document(f"p{period}_u{idx:03d}", label, posts, period))
    return docs, ground_truth_ranking(cfg, period)


def seed_graph_for(cfg: SynthConfig) -> KnowledgeGraph:
    """Starter graph whose lexicon covers the non-emergent surfaces.

    Classes are dealt round-robin over the surfaces in config order; emergent
    surfaces stay out so the loop has something to discover.
    """
    cfg.validate()
    kg = KnowledgeGraph()
    for ent in reserved_entities():
        kg.add_entity(ent)
    for i, surface in enumerate(cfg.known_surfaces()):
        cls = FACTOR_CLASSES[i % len(FACTOR_CLASSES)]
        eid = _ID_RE.sub("_", surface).strip("_")
        kg.add_entity(Entity(eid, cls, surface, status="seed"))
        kg.add_triplet(eid, SUBCAT, CLASS_NODE_IDS[cls], pos_count=1)
    return kg


# -- corpus files -----------------------------------------------------------


def save_corpus(path: str, docs: list[UserDocument]) -> None:
    """One post per line: user id, label, period, post text."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            for post in doc.posts:
                fh.write(f"{doc.user_id}\t{doc.label}\t{doc.period}\t"
                         + " ".join(post) + "\n")


def load_corpus(path: str) -> list[UserDocument]:
    """Read a corpus file back, grouping consecutive lines per user."""
    rows: dict[str, tuple[int, int, list[str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"line {n}: expected 4 tab-separated fields")
            user_id, label_s, period_s, text = parts
            try:
                label, period = int(label_s), int(period_s)
            except ValueError as exc:
                raise ValueError(f"line {n}: non-numeric label or period") from exc
            if user_id in rows:
                prev_label, prev_period, posts = rows[user_id]
                if (prev_label, prev_period) != (label, period):
                    raise ValueError(
                        f"line {n}: user {user_id!r} changes label or period"
                    )
                posts.append(text)
            else:
                rows[user_id] = (label, period, [text])
    return [
        make_document(uid, label, posts, period)
        for uid, (label, period, posts) in rows.items()
    ]


# -- rank agreement ---------------------------------------------------------


def _average_ranks(values: list[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mean_rank = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def spearman(xs: list[float], ys: list[float]) -> float:
    """Rank correlation with average ranks for ties."""
    if len(xs) != len(ys):
        raise ValueError("length mismatch")
    if len(xs) < 2:
        raise ValueError("need at least two points")
    rx = np.array(_average_ranks(list(xs)))
    ry = np.array(_average_ranks(list(ys)))
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        raise ValueError("constant ranking has no correlation")
    return float(rx @ ry) / denom
