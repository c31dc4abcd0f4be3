"""Seed selection and relation-typed subgraph expansion.

A subgraph starts as a *triplet unit* (every triple of one relation touching
the seed) and grows one new relation type at a time: all triples of the new
relation that touch any current node are added together.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator

from .kg import KnowledgeGraph, Triple, UnknownEntityError

logger = logging.getLogger(__name__)

DEFAULT_CAP = 64


class EmptySelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SeedCriteria:
    min_type_prefixes: int = 2
    min_relation_types: int = 3
    sample_size: int = 1000
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        if self.min_type_prefixes < 1 or self.min_relation_types < 1:
            raise ValueError("criteria counts must be >= 1")


@dataclass(frozen=True)
class Subgraph:
    seed: str
    triples: tuple[Triple, ...]
    relation_types: tuple[str, ...]

    @cached_property
    def node_set(self) -> frozenset[str]:
        return frozenset(e for t in self.triples for e in (t.head, t.tail))

    @property
    def j(self) -> int:
        return len(self.relation_types)

    @cached_property
    def canonical(self) -> tuple[Triple, ...]:
        return tuple(sorted(self.triples))

    def digest(self) -> bytes:
        payload = json.dumps(self.canonical, ensure_ascii=False, separators=(",", ":"))
        return hashlib.blake2b(payload.encode("utf-8"), digest_size=16).digest()

    def to_json(self) -> dict:
        return {"seed": self.seed, "j": self.j, "triples": [list(t) for t in self.triples]}

    @classmethod
    def from_json(cls, row: dict) -> "Subgraph":
        triples = tuple(Triple(*t) for t in row["triples"])
        rels: dict[str, None] = {}
        for t in triples:
            rels.setdefault(t.relation)
        sub = cls(row["seed"], triples, tuple(rels))
        if "j" in row and row["j"] != sub.j:
            raise ValueError(f"j={row['j']} disagrees with {sub.j} relation types")
        return sub


@dataclass
class ExpansionStats:
    """Counters filled in while enumerating."""

    per_j: Counter = field(default_factory=Counter)
    capped: int = 0
    duplicates: int = 0

    def to_json(self) -> dict:
        return {
            "per_j": {str(k): v for k, v in sorted(self.per_j.items())},
            "capped": self.capped,
            "duplicates": self.duplicates,
        }


def select_initial_entities(kg: KnowledgeGraph, criteria: SeedCriteria) -> list[str]:
    """Randomly sample entities spanning several types and relations.

    Returns a sorted list of ``min(sample_size, |eligible|)`` entities.
    """
    if not kg.triples:
        raise EmptySelectionError("graph is empty")
    eligible = sorted(
        e
        for e in kg.entities
        if len(kg.type_prefixes_of(e)) >= criteria.min_type_prefixes
        and len(kg.relation_types_of(e)) >= criteria.min_relation_types
    )
    if not eligible:
        raise EmptySelectionError(
            f"no entity has >= {criteria.min_type_prefixes} type prefixes "
            f"and >= {criteria.min_relation_types} relation types"
        )
    rng = random.Random(criteria.rng_seed)
    picked = rng.sample(eligible, min(criteria.sample_size, len(eligible)))
    return sorted(picked)


def build_triplet_units(kg: KnowledgeGraph, e: str) -> list[Subgraph]:
    if not kg.has_entity(e):
        raise UnknownEntityError(e)
    return [Subgraph(e, tuple(kg.incident(e, r)), (r,)) for r in kg.relations_in_order(e)]


def expansion_candidates(kg: KnowledgeGraph, s: Subgraph) -> list[str]:
    """Relations not yet in ``s`` that touch one of its nodes, in discovery order."""
    present = set(s.relation_types)
    found: dict[str, None] = {}
    for node in _node_order(s):
        for r in kg.relations_in_order(node):
            if r not in present:
                found.setdefault(r)
    return list(found)


def _node_order(s: Subgraph) -> list[str]:
    seen: dict[str, None] = {}
    for t in s.triples:
        seen.setdefault(t.head)
        seen.setdefault(t.tail)
    return list(seen)


def expand_subgraph(
    kg: KnowledgeGraph,
    s: Subgraph,
    cap: int | None = None,
    stats: ExpansionStats | None = None,
) -> list[Subgraph]:
    """Grow ``s`` by each new incident relation type, one child per relation.

    Children whose triple count would exceed ``cap`` are skipped (and counted
    in ``stats.capped``).
    """
    children = []
    nodes = _node_order(s)
    for r in expansion_candidates(kg, s):
        added: set[Triple] = set()
        for n in nodes:
            added.update(kg.incident(n, r))
        if cap is not None and len(s.triples) + len(added) > cap:
            if stats is not None:
                stats.capped += 1
            continue
        ordered = sorted(added, key=kg.position)
        children.append(Subgraph(s.seed, s.triples + tuple(ordered), s.relation_types + (r,)))
    return children


def _seed_subgraphs(
    kg: KnowledgeGraph, seed: str, max_j: int, cap: int | None, stats: ExpansionStats
) -> list[Subgraph]:
    """All distinct subgraphs with 2..max_j relation types grown from one seed."""
    if not kg.has_entity(seed):
        return []
    found: dict[tuple[Triple, ...], Subgraph] = {}
    frontier = []
    for unit in build_triplet_units(kg, seed):
        if cap is not None and len(unit.triples) > cap:
            stats.capped += 1
            continue
        frontier.append(unit)
    for _ in range(2, max_j + 1):
        nxt: dict[tuple[Triple, ...], Subgraph] = {}
        for s in frontier:
            for child in expand_subgraph(kg, s, cap, stats):
                key = child.canonical
                if key in nxt:
                    stats.duplicates += 1
                    continue
                nxt[key] = child
        found.update(nxt)
        frontier = list(nxt.values())
    return [found[k] for k in sorted(found)]


_WORKER_KG: KnowledgeGraph | None = None


def _init_worker(kg: KnowledgeGraph) -> None:
    global _WORKER_KG
    _WORKER_KG = kg


def _worker(args: tuple[str, int, int | None]) -> tuple[list[Subgraph], ExpansionStats]:
    seed, max_j, cap = args
    assert _WORKER_KG is not None
    stats = ExpansionStats()
    return _seed_subgraphs(_WORKER_KG, seed, max_j, cap, stats), stats


def enumerate_subgraphs(
    kg: KnowledgeGraph,
    seeds: Iterable[str],
    max_j: int,
    cap: int | None = DEFAULT_CAP,
    stats: ExpansionStats | None = None,
    workers: int = 1,
) -> Iterator[Subgraph]:
    """Stream every distinct subgraph with ``2 <= j <= max_j`` from the seeds.

    Seeds are processed in sorted order and each seed's batch is sorted by
    canonical form, so the stream is identical for any worker count.  A
    subgraph reachable from several seeds is emitted once, under the first.
    """
    if max_j not in (2, 3):
        raise ValueError(f"max_j must be 2 or 3, got {max_j}")
    stats = stats if stats is not None else ExpansionStats()
    ordered = sorted(set(seeds))
    seen: set[bytes] = set()

    def batches() -> Iterator[tuple[list[Subgraph], ExpansionStats]]:
        if workers <= 1:
            for seed in ordered:
                local = ExpansionStats()
                yield _seed_subgraphs(kg, seed, max_j, cap, local), local
            return
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ctx.Pool(workers, initializer=_init_worker, initargs=(kg,)) as pool:
            yield from pool.imap(_worker, [(s, max_j, cap) for s in ordered], chunksize=4)

    for batch, local in batches():
        stats.capped += local.capped
        stats.duplicates += local.duplicates
        for s in batch:
            d = s.digest()
            if d in seen:
                stats.duplicates += 1
                continue
            seen.add(d)
            stats.per_j[s.j] += 1
            yield s
