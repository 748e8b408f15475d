"""Knowledge-graph store: typed entities, a fixed relation registry, counted
triplets, and versioned snapshot IO.

Schema
------
Entity classes: five factor classes (PsySym, PhySym, Event, Med, Therapy)
plus the structural classes ClassNode (exactly five, one per factor class)
and DepressionNode (exactly one). Structural nodes have reserved ids.

Relations: 16 kinds. `r_subcat` is directed (factor entity -> its ClassNode);
five same-class co-occurrence kinds and ten cross-class kinds are undirected.
Every unordered pair of factor classes admits exactly one relation, so a
co-mention between two typed entities always has a well-defined kind.

Storage: undirected triplets are stored once, in canonical orientation
(lexicographically smaller entity id first). Adjacency materializes both
directions for undirected kinds and only head -> tail for `r_subcat`.

Counts: pos_count / neg_count accumulate corpus co-mention evidence from
depression-labeled and control users respectively.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

PSY_SYM = "PsySym"
PHY_SYM = "PhySym"
EVENT = "Event"
MED = "Med"
THERAPY = "Therapy"
CLASS_NODE = "ClassNode"
DEPRESSION_NODE = "DepressionNode"

FACTOR_CLASSES = (PSY_SYM, PHY_SYM, EVENT, MED, THERAPY)
ALL_CLASSES = FACTOR_CLASSES + (CLASS_NODE, DEPRESSION_NODE)

DEPRESSION_ID = "depression"
CLASS_NODE_IDS = {
    PSY_SYM: "psy_sym_class",
    PHY_SYM: "phy_sym_class",
    EVENT: "event_class",
    MED: "med_class",
    THERAPY: "therapy_class",
}
CLASS_FOR_NODE_ID = {v: k for k, v in CLASS_NODE_IDS.items()}
RESERVED_IDS = (DEPRESSION_ID,) + tuple(CLASS_NODE_IDS[c] for c in FACTOR_CLASSES)

ENTITY_STATUSES = ("seed", "discovered", "quarantined")
TRIPLET_STATUSES = ("active", "candidate", "rejected")

SUBCAT = "r_subcat"


class SchemaError(ValueError):
    """Malformed schema file or schema-violating mutation."""


class EndpointMismatchError(SchemaError):
    """Triplet endpoints are not admissible for the relation kind."""


class UnknownEntityError(SchemaError):
    """Referenced entity id is not in the graph."""


class SelfLoopError(SchemaError):
    """Head and tail are the same entity."""


class ZeroVectorError(ValueError):
    """Cosine similarity asked of a zero-norm vector."""


@dataclass(frozen=True)
class RelationKind:
    """A relation label with direction and admissible endpoint classes.

    For undirected kinds `endpoint_classes` is the unordered class pair (a
    frozenset of one or two classes). `r_subcat` is special-cased: head must
    be a factor entity and tail must be that class's ClassNode.
    """

    name: str
    directed: bool
    endpoint_classes: frozenset


def _rel(name: str, a: str, b: str) -> RelationKind:
    return RelationKind(name, False, frozenset((a, b)))


RELATIONS: dict[str, RelationKind] = {
    SUBCAT: RelationKind(SUBCAT, True, frozenset((CLASS_NODE,))),
    "r_med_co": _rel("r_med_co", MED, MED),
    "r_psy_co": _rel("r_psy_co", PSY_SYM, PSY_SYM),
    "r_phy_co": _rel("r_phy_co", PHY_SYM, PHY_SYM),
    "r_event_co": _rel("r_event_co", EVENT, EVENT),
    "r_therapy_co": _rel("r_therapy_co", THERAPY, THERAPY),
    "r_phy_psy_co": _rel("r_phy_psy_co", PHY_SYM, PSY_SYM),
    "r_life_psy": _rel("r_life_psy", EVENT, PSY_SYM),
    "r_life_phy": _rel("r_life_phy", EVENT, PHY_SYM),
    "r_therapy_psy": _rel("r_therapy_psy", THERAPY, PSY_SYM),
    "r_therapy_phy": _rel("r_therapy_phy", THERAPY, PHY_SYM),
    "r_life_therapy": _rel("r_life_therapy", EVENT, THERAPY),
    "r_med_psy": _rel("r_med_psy", MED, PSY_SYM),
    "r_med_phy": _rel("r_med_phy", MED, PHY_SYM),
    "r_life_med": _rel("r_life_med", EVENT, MED),
    "r_med_therapy_co": _rel("r_med_therapy_co", MED, THERAPY),
}

_PAIR_TO_RELATION: dict[frozenset, str] = {
    kind.endpoint_classes: name
    for name, kind in RELATIONS.items()
    if not kind.directed
}


def relation_for_classes(class_a: str, class_b: str) -> RelationKind:
    """The unique undirected kind admitting this unordered factor-class pair."""
    key = frozenset((class_a, class_b))
    name = _PAIR_TO_RELATION.get(key)
    if name is None:
        raise EndpointMismatchError(
            f"no relation admits endpoint classes ({class_a}, {class_b})"
        )
    return RELATIONS[name]


def normalize_surface(text: str) -> str:
    """Unicode lowercase + whitespace collapse; the one normal form for
    surfaces, aliases, and post tokens."""
    return " ".join(text.lower().split())


@dataclass
class Entity:
    entity_id: str
    entity_class: str
    surface: str
    aliases: tuple[str, ...] = ()
    first_period: int = 0
    status: str = "seed"

    def all_surfaces(self) -> tuple[str, ...]:
        return (self.surface,) + self.aliases


@dataclass
class Triplet:
    head: str
    relation: str
    tail: str
    pos_count: int = 0
    neg_count: int = 0
    provenance: list[tuple[str, int, str]] = field(default_factory=list)
    status: str = "active"

    def key(self) -> tuple[str, str, str]:
        return (self.head, self.relation, self.tail)


class KnowledgeGraph:
    """Mutable store with derived adjacency. Single-writer discipline; use
    `copy()` for value-semantic snapshots handed to readers."""

    def __init__(self, period: int = 0):
        self.period = period
        self.entities: dict[str, Entity] = {}
        self.triplets: dict[tuple[str, str, str], Triplet] = {}
        # adjacency[head][relation] -> sorted list of tails
        self.adjacency: dict[str, dict[str, list[str]]] = {}

    # -- mutation -----------------------------------------------------------

    def add_entity(self, ent: Entity) -> None:
        if ent.entity_class not in ALL_CLASSES:
            raise SchemaError(f"unknown entity class {ent.entity_class!r}")
        if ent.status not in ENTITY_STATUSES:
            raise SchemaError(f"unknown entity status {ent.status!r}")
        if ent.entity_id in self.entities:
            raise SchemaError(f"duplicate entity id {ent.entity_id!r}")
        norm = normalize_surface(ent.surface)
        if not norm:
            raise SchemaError(f"empty surface for entity {ent.entity_id!r}")
        aliases = tuple(normalize_surface(a) for a in ent.aliases)
        if any(not a for a in aliases):
            raise SchemaError(f"empty alias for entity {ent.entity_id!r}")
        taken = self.surface_index()
        for s in (norm,) + aliases:
            if s in taken:
                raise SchemaError(
                    f"surface {s!r} already names entity {taken[s]!r}"
                )
        self.entities[ent.entity_id] = replace(ent, surface=norm, aliases=aliases)
        if ent.status != "quarantined":
            self.adjacency.setdefault(ent.entity_id, {})

    def canonical_key(self, head: str, relation: str, tail: str) -> tuple[str, str, str]:
        kind = RELATIONS.get(relation)
        if kind is None:
            raise SchemaError(f"unknown relation {relation!r}")
        if kind.directed:
            return (head, relation, tail)
        return (head, relation, tail) if head <= tail else (tail, relation, head)

    def _check_endpoints(self, head: str, relation: str, tail: str) -> None:
        for eid in (head, tail):
            if eid not in self.entities:
                raise UnknownEntityError(f"unknown entity {eid!r}")
        if head == tail:
            raise SelfLoopError(f"self-loop on {head!r} via {relation}")
        kind = RELATIONS[relation]
        h, t = self.entities[head], self.entities[tail]
        if kind.directed:
            if h.entity_class not in FACTOR_CLASSES or t.entity_class != CLASS_NODE:
                raise EndpointMismatchError(
                    f"{relation} requires factor head and ClassNode tail, got "
                    f"({h.entity_class}, {t.entity_class})"
                )
            if CLASS_NODE_IDS[h.entity_class] != tail:
                raise EndpointMismatchError(
                    f"{head!r} ({h.entity_class}) cannot subclass under {tail!r}"
                )
            return
        got = frozenset((h.entity_class, t.entity_class))
        if got != kind.endpoint_classes:
            raise EndpointMismatchError(
                f"{relation} admits classes {sorted(kind.endpoint_classes)}, got "
                f"({h.entity_class}, {t.entity_class})"
            )

    def add_triplet(
        self,
        head: str,
        relation: str,
        tail: str,
        pos_count: int = 0,
        neg_count: int = 0,
        provenance: list[tuple[str, int, str]] | None = None,
        status: str = "active",
    ) -> Triplet:
        """Insert or merge (counts accumulate, provenance appends)."""
        if status not in TRIPLET_STATUSES:
            raise SchemaError(f"unknown triplet status {status!r}")
        if pos_count < 0 or neg_count < 0:
            raise SchemaError("negative evidence counts")
        self._check_endpoints(head, relation, tail)
        key = self.canonical_key(head, relation, tail)
        trip = self.triplets.get(key)
        if trip is None:
            trip = Triplet(*key, pos_count, neg_count, list(provenance or ()), status)
            self.triplets[key] = trip
            self._index_edge(key)
        else:
            trip.pos_count += pos_count
            trip.neg_count += neg_count
            if provenance:
                trip.provenance.extend(provenance)
        return trip

    def _index_edge(self, key: tuple[str, str, str]) -> None:
        head, relation, tail = key
        self._adj_insert(head, relation, tail)
        if not RELATIONS[relation].directed:
            self._adj_insert(tail, relation, head)

    def _adj_insert(self, head: str, relation: str, tail: str) -> None:
        tails = self.adjacency.setdefault(head, {}).setdefault(relation, [])
        if tail not in tails:
            tails.append(tail)
            tails.sort()

    def rebuild_adjacency(self) -> None:
        self.adjacency = {
            eid: {}
            for eid, e in self.entities.items()
            if e.status != "quarantined"
        }
        for key in self.triplets:
            self._index_edge(key)

    # -- queries ------------------------------------------------------------

    def neighbors(self, entity_id: str) -> list[tuple[str, str]]:
        """Sorted (relation, tail) pairs reachable one hop from the entity."""
        rels = self.adjacency.get(entity_id, {})
        return sorted(
            (rel, tail) for rel, tails in rels.items() for tail in tails
        )

    def tails(self, entity_id: str, relation: str) -> list[str]:
        return list(self.adjacency.get(entity_id, {}).get(relation, ()))

    def out_degree(self, entity_id: str, relation: str) -> int:
        return len(self.adjacency.get(entity_id, {}).get(relation, ()))

    def pair_count(self, head: str, relation: str, tail: str) -> int:
        """Co-mention evidence for the pair; seed edges floor at 1."""
        trip = self.triplets.get(self.canonical_key(head, relation, tail))
        if trip is None:
            raise UnknownEntityError(f"no triplet ({head}, {relation}, {tail})")
        return max(trip.pos_count + trip.neg_count, 1)

    def factor_entities(self) -> list[Entity]:
        return [
            e
            for _, e in sorted(self.entities.items())
            if e.entity_class in FACTOR_CLASSES and e.status != "quarantined"
        ]

    def surface_index(self) -> dict[str, str]:
        """Normalized surface/alias -> entity id, quarantined included (their
        surfaces stay reserved so rejected knowledge is not re-proposed)."""
        idx: dict[str, str] = {}
        for eid, ent in self.entities.items():
            for s in ent.all_surfaces():
                idx[s] = eid
        return idx

    def lexicon(self) -> dict[tuple[str, ...], str]:
        """Token-tuple -> entity id for matching; structural and quarantined
        entities are excluded."""
        lex: dict[tuple[str, ...], str] = {}
        for eid, ent in sorted(self.entities.items()):
            if ent.entity_class not in FACTOR_CLASSES or ent.status == "quarantined":
                continue
            for s in ent.all_surfaces():
                lex[tuple(s.split())] = eid
        return lex

    def stats(self) -> tuple[int, int]:
        """(node count, edge count) of graph content: quarantined entities and
        non-active triplets are not knowledge."""
        nodes = sum(1 for e in self.entities.values() if e.status != "quarantined")
        edges = sum(1 for t in self.triplets.values() if t.status == "active")
        return nodes, edges

    def copy(self) -> "KnowledgeGraph":
        kg = KnowledgeGraph(self.period)
        kg.entities = {
            eid: replace(e, aliases=tuple(e.aliases))
            for eid, e in self.entities.items()
        }
        kg.triplets = {
            key: Triplet(
                t.head, t.relation, t.tail, t.pos_count, t.neg_count,
                [tuple(p) for p in t.provenance], t.status,
            )
            for key, t in self.triplets.items()
        }
        kg.adjacency = {
            eid: {rel: list(tails) for rel, tails in rels.items()}
            for eid, rels in self.adjacency.items()
        }
        return kg

    def validate(self) -> None:
        """Check every structural invariant; raises SchemaError on violation."""
        class_nodes = [
            e for e in self.entities.values() if e.entity_class == CLASS_NODE
        ]
        depression = [
            e for e in self.entities.values() if e.entity_class == DEPRESSION_NODE
        ]
        if len(depression) != 1 or depression[0].entity_id != DEPRESSION_ID:
            raise SchemaError("graph must contain exactly the reserved DepressionNode")
        if sorted(e.entity_id for e in class_nodes) != sorted(CLASS_NODE_IDS.values()):
            raise SchemaError("graph must contain exactly the five reserved ClassNodes")
        seen: dict[str, str] = {}
        for eid, ent in self.entities.items():
            for s in ent.all_surfaces():
                if s in seen and seen[s] != eid:
                    raise SchemaError(f"surface {s!r} names two entities")
                seen[s] = eid
        for key, trip in self.triplets.items():
            if key != self.canonical_key(trip.head, trip.relation, trip.tail):
                raise SchemaError(f"non-canonical triplet key {key}")
            self._check_endpoints(trip.head, trip.relation, trip.tail)
        rebuilt = self.copy()
        rebuilt.rebuild_adjacency()
        if rebuilt.adjacency != self.adjacency:
            raise SchemaError("adjacency out of sync with triplet set")


def reserved_entities() -> list[Entity]:
    ents = [Entity(DEPRESSION_ID, DEPRESSION_NODE, "depression")]
    surface = {
        PSY_SYM: "psychological symptom class",
        PHY_SYM: "physical symptom class",
        EVENT: "life event class",
        MED: "medication class",
        THERAPY: "therapy class",
    }
    for cls in FACTOR_CLASSES:
        ents.append(Entity(CLASS_NODE_IDS[cls], CLASS_NODE, surface[cls]))
    return ents


# -- schema file IO ---------------------------------------------------------


def _data_lines(path: str) -> list[tuple[int, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            out.append((n, line))
    return out


def load_schema(entities_path: str, triplets_path: str) -> KnowledgeGraph:
    """Build a graph from the two seed TSVs.

    Entities: id, class, surface, pipe-joined aliases (last column optional).
    Triplets: head, relation, tail, pos_count, neg_count.
    Every factor entity is linked to its ClassNode via r_subcat whether or not
    the triplet file lists the link.
    """
    kg = KnowledgeGraph()
    for n, line in _data_lines(entities_path):
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise SchemaError(f"{entities_path}:{n}: expected 3 or 4 columns")
        eid, cls, surface = cols[0], cols[1], cols[2]
        aliases = tuple(a for a in cols[3].split("|") if a) if len(cols) == 4 else ()
        try:
            kg.add_entity(Entity(eid, cls, surface, aliases))
        except SchemaError as exc:
            raise SchemaError(f"{entities_path}:{n}: {exc}") from exc
    for ent in reserved_entities():
        if ent.entity_id not in kg.entities:
            raise SchemaError(
                f"{entities_path}: missing reserved entity {ent.entity_id!r}"
            )
    for n, line in _data_lines(triplets_path):
        cols = line.split("\t")
        if len(cols) != 5:
            raise SchemaError(f"{triplets_path}:{n}: expected 5 columns")
        head, rel, tail = cols[0], cols[1], cols[2]
        try:
            pos, neg = int(cols[3]), int(cols[4])
        except ValueError as exc:
            raise SchemaError(f"{triplets_path}:{n}: counts must be integers") from exc
        try:
            kg.add_triplet(head, rel, tail, pos, neg)
        except SchemaError as exc:
            raise SchemaError(f"{triplets_path}:{n}: {exc}") from exc
    for ent in kg.factor_entities():
        kg.add_triplet(ent.entity_id, SUBCAT, CLASS_NODE_IDS[ent.entity_class])
    kg.validate()
    return kg


KG_MAGIC = "KGLOOP-KG v1"


def _prov_dump(prov: list[tuple[str, int, str]]) -> str:
    return json.dumps(
        [[u, p, s] for u, p, s in prov], ensure_ascii=True, separators=(",", ":")
    )


def save_graph(kg: KnowledgeGraph, path: str) -> None:
    """Canonical snapshot: byte-identical for equal graphs."""
    lines = [KG_MAGIC, f"period\t{kg.period}", "[entities]"]
    for eid in sorted(kg.entities):
        e = kg.entities[eid]
        lines.append(
            "\t".join(
                (e.entity_id, e.entity_class, e.surface, "|".join(e.aliases),
                 str(e.first_period), e.status)
            )
        )
    lines.append("[triplets]")
    for key in sorted(kg.triplets):
        t = kg.triplets[key]
        lines.append(
            "\t".join(
                (t.head, t.relation, t.tail, str(t.pos_count), str(t.neg_count),
                 t.status, _prov_dump(t.provenance))
            )
        )
    lines.append("[end]")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_graph(path: str) -> KnowledgeGraph:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != KG_MAGIC:
        raise SchemaError(f"{path}: missing {KG_MAGIC} header")
    if not lines or lines[-1] != "[end]":
        raise SchemaError(f"{path}: truncated snapshot (no [end] marker)")
    body = lines[1:-1]
    if not body or not body[0].startswith("period\t"):
        raise SchemaError(f"{path}: missing period line")
    kg = KnowledgeGraph(period=int(body[0].split("\t")[1]))
    try:
        ent_at = body.index("[entities]")
        tri_at = body.index("[triplets]")
    except ValueError as exc:
        raise SchemaError(f"{path}: missing section marker") from exc
    for line in body[ent_at + 1:tri_at]:
        cols = line.split("\t")
        if len(cols) != 6:
            raise SchemaError(f"{path}: bad entity row {line!r}")
        aliases = tuple(a for a in cols[3].split("|") if a)
        kg.add_entity(
            Entity(cols[0], cols[1], cols[2], aliases, int(cols[4]), cols[5])
        )
    for line in body[tri_at + 1:]:
        cols = line.split("\t")
        if len(cols) != 7:
            raise SchemaError(f"{path}: bad triplet row {line!r}")
        prov = [(u, int(p), s) for u, p, s in json.loads(cols[6])]
        kg.add_triplet(
            cols[0], cols[1], cols[2], int(cols[3]), int(cols[4]), prov, cols[5]
        )
    kg.validate()
    return kg


# -- similarity -------------------------------------------------------------


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity undefined for zero vector")
    return float(np.dot(a, b) / (na * nb))


def top_m_similar(
    kg: KnowledgeGraph,
    vectors: dict[str, np.ndarray],
    query: np.ndarray,
    m: int,
) -> list[tuple[str, float]]:
    """M most similar factor entities, descending similarity, ties by id.
    Structural nodes never appear."""
    if m <= 0:
        raise ValueError("m must be positive")
    scored = []
    for ent in kg.factor_entities():
        vec = vectors.get(ent.entity_id)
        if vec is None:
            continue
        scored.append((ent.entity_id, cosine_similarity(query, vec)))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:m]
