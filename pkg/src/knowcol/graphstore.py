"""In-memory knowledge graph with subgraph extraction and triple sampling.

Entities (Wikidata QIDs) and relation types (PIDs) are interned to dense
integer ids at build time; the original strings stay available through
the graph. Triples are deduplicated, and an adjacency index maps every
entity to the triples it appears in (as head or tail).

The graph is immutable after construction, so any number of workers may
read it concurrently. The sampling helpers take caller-owned seeded
generators and are fully deterministic given those seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Triple",
    "KnowledgeGraph",
    "build_graph",
    "expand_entity_set",
    "induced_subgraph",
    "entity_triples",
    "sample_negatives",
]


@dataclass(frozen=True, order=True)
class Triple:
    """A directed labeled edge (head entity, relation type, tail entity).

    Fields are interned integer ids; resolve them back to QID/PID strings
    through the owning :class:`KnowledgeGraph`.
    """

    head: int
    relation: int
    tail: int


class KnowledgeGraph:
    """Directed labeled graph over interned entity and relation ids."""

    def __init__(self, entity_qids, relation_pids, triples):
        self.entity_qids: list[str] = list(entity_qids)
        self.relation_pids: list[str] = list(relation_pids)
        self.triples: list[Triple] = list(triples)
        self._entity_index = {q: i for i, q in enumerate(self.entity_qids)}
        self._relation_index = {p: i for i, p in enumerate(self.relation_pids)}
        if len(self._entity_index) != len(self.entity_qids):
            raise ValueError("duplicate entity QIDs")
        if len(self._relation_index) != len(self.relation_pids):
            raise ValueError("duplicate relation PIDs")
        self._adjacency: dict[int, list[int]] = {e: [] for e in range(len(self.entity_qids))}
        for ti, t in enumerate(self.triples):
            self._adjacency[t.head].append(ti)
            if t.tail != t.head:
                self._adjacency[t.tail].append(ti)

    @property
    def n_entities(self) -> int:
        return len(self.entity_qids)

    @property
    def n_relations(self) -> int:
        return len(self.relation_pids)

    @property
    def entities(self) -> range:
        """All interned entity ids."""
        return range(self.n_entities)

    def qid(self, entity_id: int) -> str:
        return self.entity_qids[entity_id]

    def pid(self, relation_id: int) -> str:
        return self.relation_pids[relation_id]

    def entity_id(self, qid: str) -> int:
        try:
            return self._entity_index[qid]
        except KeyError:
            raise ValueError(f"unknown entity QID {qid!r}") from None

    def relation_id(self, pid: str) -> int:
        try:
            return self._relation_index[pid]
        except KeyError:
            raise ValueError(f"unknown relation PID {pid!r}") from None

    def has_entity(self, qid: str) -> bool:
        return qid in self._entity_index

    def has_relation(self, pid: str) -> bool:
        return pid in self._relation_index

    def adjacent_triple_indices(self, entity_id: int) -> list[int]:
        """Indices of triples where the entity appears as head or tail."""
        if entity_id not in self._adjacency:
            raise ValueError(f"unknown entity id {entity_id}")
        return list(self._adjacency[entity_id])

    def triple_qids(self) -> list[tuple[str, str, str]]:
        """All triples as (head QID, PID, tail QID) string tuples."""
        return [(self.qid(t.head), self.pid(t.relation), self.qid(t.tail))
                for t in self.triples]

    def __repr__(self):
        return (f"KnowledgeGraph(entities={self.n_entities}, "
                f"relations={self.n_relations}, triples={len(self.triples)})")


def build_graph(triples: list[tuple[str, str, str]]) -> KnowledgeGraph:
    """Intern QID/PID strings and build a deduplicated, indexed graph.

    Entities and relations are numbered in first-appearance order; the
    entity set is exactly the union of all heads and tails. Duplicate
    (head, relation, tail) lines are dropped silently; self-loops are kept.
    """
    entity_qids: list[str] = []
    relation_pids: list[str] = []
    e_index: dict[str, int] = {}
    r_index: dict[str, int] = {}
    seen: set[tuple[int, int, int]] = set()
    out: list[Triple] = []

    def intern_entity(q: str) -> int:
        if not q:
            raise ValueError("empty QID")
        if q not in e_index:
            e_index[q] = len(entity_qids)
            entity_qids.append(q)
        return e_index[q]

    def intern_relation(p: str) -> int:
        if not p:
            raise ValueError("empty PID")
        if p not in r_index:
            r_index[p] = len(relation_pids)
            relation_pids.append(p)
        return r_index[p]

    for h_q, r_p, t_q in triples:
        key = (intern_entity(h_q), intern_relation(r_p), intern_entity(t_q))
        if key in seen:
            continue
        seen.add(key)
        out.append(Triple(*key))
    return KnowledgeGraph(entity_qids, relation_pids, out)


def expand_entity_set(kg: KnowledgeGraph, seeds: set[int],
                      hierarchy_relations: set[int]) -> set[int]:
    """Add the one-hop hierarchy targets of every seed entity.

    Returns ``seeds ∪ { e' : (e, r, e') with e in seeds and r hierarchical }``.
    Exactly one hop: newly added entities are not expanded further.
    """
    if not hierarchy_relations:
        raise ValueError("hierarchy_relations must be non-empty")
    for e in seeds:
        if not (0 <= e < kg.n_entities):
            raise ValueError(f"seed entity id {e} not in graph "
                             "(catalog/graph mismatch)")
    expanded = set(seeds)
    for e in seeds:
        for ti in kg.adjacent_triple_indices(e):
            t = kg.triples[ti]
            if t.head == e and t.relation in hierarchy_relations:
                expanded.add(t.tail)
    return expanded


def induced_subgraph(kg: KnowledgeGraph, keep: set[int]) -> KnowledgeGraph:
    """Restrict the graph to ``keep``: triples with both endpoints inside.

    The output entity set is exactly ``keep`` (isolated entities included);
    the relation set shrinks to relations occurring in retained triples.
    """
    keep_sorted = sorted(keep)
    qids = [kg.qid(e) for e in keep_sorted]
    kept = [t for t in kg.triples if t.head in keep and t.tail in keep]
    e_map = {e: i for i, e in enumerate(keep_sorted)}
    r_map: dict[int, int] = {}
    pids: list[str] = []
    for t in kept:
        if t.relation not in r_map:
            r_map[t.relation] = len(pids)
            pids.append(kg.pid(t.relation))
    new_triples = [Triple(e_map[t.head], r_map[t.relation], e_map[t.tail]) for t in kept]
    return KnowledgeGraph(qids, pids, new_triples)


def entity_triples(kg: KnowledgeGraph, entity_id: int, cap: int,
                   rng: np.random.Generator) -> list[Triple]:
    """Triples containing the entity, capped by uniform sampling.

    At or under the cap every triple is returned in canonical sorted order;
    above it a seeded uniform sample (without replacement) of size ``cap``
    is drawn and then sorted. Deterministic given the generator's seed.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    indices = kg.adjacent_triple_indices(entity_id)
    bundle = [kg.triples[i] for i in indices]
    if len(bundle) > cap:
        pick = rng.choice(len(bundle), size=cap, replace=False)
        bundle = [bundle[i] for i in pick]
    return sorted(bundle)


def sample_negatives(entities, positive: Triple, k: int,
                     rng: np.random.Generator) -> list[Triple]:
    """Draw ``k`` corrupted variants of a positive triple.

    Each draw replaces exactly one endpoint: the head with probability 1/2,
    otherwise the tail, by a uniform pick from ``entities`` minus the
    replaced endpoint. The relation is never corrupted. Draws are with
    replacement across the k samples and deterministic given the seed.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pool = np.array(sorted(set(entities)), dtype=np.int64)
    if pool.size < 2:
        raise ValueError("need at least 2 entities to corrupt a triple")
    out: list[Triple] = []
    for _ in range(k):
        corrupt_head = rng.random() < 0.5
        keep_out = positive.head if corrupt_head else positive.tail
        # Uniform over the pool minus the replaced endpoint: skip its slot.
        slot = int(np.searchsorted(pool, keep_out))
        present = slot < pool.size and pool[slot] == keep_out
        j = int(rng.integers(0, pool.size - 1)) if present else int(rng.integers(0, pool.size))
        if present and j >= slot:
            j += 1
        replacement = int(pool[j])
        if corrupt_head:
            out.append(Triple(replacement, positive.relation, positive.tail))
        else:
            out.append(Triple(positive.head, positive.relation, replacement))
    return out
