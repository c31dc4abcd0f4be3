"""In-memory knowledge graph of (head, relation, tail) triples.

Entity and relation identifiers are interned surface strings, so identity
comparisons and dict lookups stay cheap while keeping the data printable.
Triples keep their load order, which every downstream ordering relies on.
"""

from __future__ import annotations

import json
import sys
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple


class KGError(ValueError):
    """Base error for graph loading problems."""


class KGParseError(KGError):
    def __init__(self, path: str | Path, line_no: int, message: str) -> None:
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class EmptyGraphError(KGError):
    pass


class UnknownEntityError(KeyError):
    pass


class Triple(NamedTuple):
    head: str
    relation: str
    tail: str

    @property
    def is_self_loop(self) -> bool:
        return self.head == self.tail


def intern_triple(head: str, relation: str, tail: str) -> Triple:
    return Triple(sys.intern(head), sys.intern(relation), sys.intern(tail))


def type_prefix(relation: str) -> str:
    """First path component of a relation, e.g. ``/film/x/y`` -> ``film``."""
    parts = [p for p in relation.split("/") if p]
    return parts[0] if parts else relation


class KnowledgeGraph:
    """Deduplicated, indexed, read-only triple store.

    ``types`` optionally overrides the relation-derived type prefixes for the
    given entities (entities absent from the mapping keep derived types).
    """

    def __init__(
        self,
        triples: Iterable[Triple | tuple[str, str, str]],
        types: dict[str, set[str]] | None = None,
    ) -> None:
        order: dict[Triple, int] = {}
        for t in triples:
            t = t if isinstance(t, Triple) else intern_triple(*t)
            if t not in order:
                order[t] = len(order)
        self._position = order
        self.triples: tuple[Triple, ...] = tuple(order)

        self.out_index: dict[tuple[str, str], set[str]] = defaultdict(set)
        self.in_index: dict[tuple[str, str], set[str]] = defaultdict(set)
        # dicts as ordered sets: iteration follows first incidence in load order
        self._relations_of: dict[str, dict[str, None]] = defaultdict(dict)
        self._incident: dict[tuple[str, str], list[Triple]] = defaultdict(list)
        self._entities: dict[str, None] = {}
        self._relations: dict[str, None] = {}
        self._heads_of: dict[str, set[str]] = defaultdict(set)
        self._tails_of: dict[str, set[str]] = defaultdict(set)

        for t in self.triples:
            h, r, tl = t
            self.out_index[(h, r)].add(tl)
            self.in_index[(tl, r)].add(h)
            self._relations_of[h][r] = None
            self._relations_of[tl][r] = None
            self._incident[(h, r)].append(t)
            if tl != h:
                self._incident[(tl, r)].append(t)
            self._entities.setdefault(h)
            self._entities.setdefault(tl)
            self._relations.setdefault(r)
            self._heads_of[r].add(h)
            self._tails_of[r].add(tl)

        self.out_index = dict(self.out_index)
        self.in_index = dict(self.in_index)
        self._type_override = {e: set(v) for e, v in (types or {}).items()}
        self._prefix_cache: dict[str, frozenset[str]] = {}

    # ------------------------------------------------------------------ access

    @property
    def entities(self) -> list[str]:
        return list(self._entities)

    @property
    def relations(self) -> list[str]:
        return list(self._relations)

    @property
    def self_loops(self) -> list[Triple]:
        return [t for t in self.triples if t.is_self_loop]

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, triple: object) -> bool:
        return triple in self._position

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            set(self.triples) == set(other.triples)
            and self.out_index == other.out_index
            and self.in_index == other.in_index
        )

    __hash__ = None  # type: ignore[assignment]

    def has_entity(self, e: str) -> bool:
        return e in self._entities

    def position(self, t: Triple) -> int:
        """Load-order index of a stored triple."""
        return self._position[t]

    def neighbors(self, e: str, r: str) -> set[str]:
        """Entities linked to ``e`` by ``r`` as subject or object."""
        return self.out_index.get((e, r), set()) | self.in_index.get((e, r), set())

    def relation_types_of(self, e: str) -> set[str]:
        return set(self._relations_of.get(e, ()))

    def relations_in_order(self, e: str) -> list[str]:
        return list(self._relations_of.get(e, ()))

    def type_prefixes_of(self, e: str) -> frozenset[str]:
        if e in self._type_override:
            return frozenset(self._type_override[e])
        cached = self._prefix_cache.get(e)
        if cached is None:
            cached = frozenset(type_prefix(r) for r in self._relations_of.get(e, ()))
            self._prefix_cache[e] = cached
        return cached

    def incident(self, e: str, r: str) -> list[Triple]:
        """Triples with relation ``r`` touching ``e``, in load order."""
        return self._incident.get((e, r), [])

    def heads_of(self, r: str) -> set[str]:
        return self._heads_of.get(r, set())

    def tails_of(self, r: str) -> set[str]:
        return self._tails_of.get(r, set())

    def stats(self) -> dict[str, int]:
        return {
            "triples": len(self.triples),
            "entities": len(self._entities),
            "relations": len(self._relations),
        }

    def iter_jsonl(self) -> Iterator[str]:
        for t in self.triples:
            yield json.dumps(list(t), ensure_ascii=False)


# ------------------------------------------------------------------- loading


def _parse_tsv(path: Path) -> Iterator[Triple]:
    with path.open(encoding="utf-8", newline="\n") as fh:
        for no, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3 or not all(fields):
                raise KGParseError(path, no, f"expected 3 tab-separated fields, got {len(fields)}")
            yield intern_triple(*fields)


def _parse_jsonl(path: Path) -> Iterator[Triple]:
    with path.open(encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise KGParseError(path, no, f"invalid JSON: {exc.msg}") from None
            if (
                not isinstance(row, list)
                or len(row) != 3
                or not all(isinstance(x, str) and x for x in row)
            ):
                raise KGParseError(path, no, "expected a three-element string array")
            yield intern_triple(*row)


def load_types(path: str | Path) -> dict[str, set[str]]:
    """Read an explicit ``entity<TAB>type`` file."""
    types: dict[str, set[str]] = defaultdict(set)
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise KGParseError(path, no, "expected entity<TAB>type")
            types[sys.intern(fields[0])].add(fields[1])
    return dict(types)


def load_triples(
    path: str | Path,
    format: str = "tsv",
    types: dict[str, set[str]] | None = None,
) -> KnowledgeGraph:
    path = Path(path)
    if format == "tsv":
        rows = _parse_tsv(path)
    elif format == "jsonl":
        rows = _parse_jsonl(path)
    else:
        raise ValueError(f"unknown triple format {format!r}")
    kg = KnowledgeGraph(rows, types=types)
    if not kg.triples:
        raise EmptyGraphError(f"{path}: no triples")
    return kg
