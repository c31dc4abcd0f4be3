"""Entity clustering and placeholder-abstracted logical paths.

Entities of a subgraph that are linked to exactly the same neighbours under
every relation (either direction) are interchangeable and form one cluster.
Clusters that bridge two or more abstract facts become placeholders
(``#0``, ``#1``, ...); clusters touching a single abstract fact stay literal
and anchor the path to concrete names.
"""

from __future__ import annotations

import dataclasses
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

from .kg import KnowledgeGraph, Triple
from .subgraphs import Subgraph

PLACEHOLDER = "placeholder"
LITERAL = "literal-anchor"


class LogicalPathError(ValueError):
    pass


class IncompleteClusterError(LogicalPathError):
    """A cluster pair is linked by only part of its member cross product.

    Happens when equivalent entities reach a shared neighbour in opposite
    directions; such a subgraph has no exact placeholder abstraction.
    """


class AbstractSelfLoopError(LogicalPathError):
    pass


@dataclass(frozen=True)
class EntityCluster:
    id: int
    members: tuple[str, ...]
    kind: str = PLACEHOLDER


@dataclass(frozen=True)
class Placeholder:
    index: int

    def __str__(self) -> str:
        return f"#{self.index}"


@dataclass(frozen=True)
class Literal:
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.names:
            raise ValueError("literal reference needs at least one name")


ClusterRef = Union[Placeholder, Literal]


@dataclass(frozen=True)
class LogicalTriple:
    subject: ClusterRef
    relation: str
    object: ClusterRef

    def __post_init__(self) -> None:
        if isinstance(self.subject, Placeholder) and self.subject == self.object:
            raise AbstractSelfLoopError(f"abstract self-loop on {self.subject}")


@dataclass(frozen=True)
class StructuralSignature:
    hop_count: int
    degree_pattern: tuple[tuple[int, int], ...]

    def __str__(self) -> str:
        pattern = ",".join(f"{i}-{o}" for i, o in self.degree_pattern)
        return f"{self.hop_count}|{pattern}"

    @classmethod
    def parse(cls, text: str) -> "StructuralSignature":
        hops, _, pattern = text.partition("|")
        pairs = tuple(
            (int(a), int(b)) for a, b in (p.split("-") for p in pattern.split(",") if p)
        )
        return cls(int(hops), pairs)


@dataclass(frozen=True)
class LogicalPath:
    """Abstract facts plus the clusters they range over.

    Placeholder clusters are numbered first (``clusters[k]`` is ``#k``);
    literal clusters follow.
    """

    triples: tuple[LogicalTriple, ...]
    clusters: tuple[EntityCluster, ...]
    eligible_targets: frozenset[int] = frozenset()
    source: Subgraph | None = field(default=None, compare=False)
    id: str | None = field(default=None, compare=False)

    @property
    def hop_count(self) -> int:
        return len(self.triples)

    @property
    def placeholders(self) -> list[EntityCluster]:
        return [c for c in self.clusters if c.kind == PLACEHOLDER]

    def members(self, ref: ClusterRef) -> tuple[str, ...]:
        if isinstance(ref, Placeholder):
            return self.clusters[ref.index].members
        return ref.names

    def entities(self) -> set[str]:
        return {m for c in self.clusters for m in c.members}

    def expand(self) -> set[Triple]:
        """Concrete triples denoted by the path (cross product per fact)."""
        out = set()
        for lt in self.triples:
            for h in self.members(lt.subject):
                for t in self.members(lt.object):
                    out.add(Triple(h, lt.relation, t))
        return out

    def signature(self) -> StructuralSignature:
        return structural_signature(self)

    def rows(self, compact: bool = False) -> list[list]:
        """Triples as JSON-ready rows; ``compact`` prints one-name literals bare."""

        def ref(r: ClusterRef):
            if isinstance(r, Placeholder):
                return str(r)
            if compact and len(r.names) == 1:
                return r.names[0]
            return list(r.names)

        return [[ref(lt.subject), lt.relation, ref(lt.object)] for lt in self.triples]

    def to_json(self) -> dict:
        row: dict = {}
        if self.id is not None:
            row["id"] = self.id
        if self.source is not None:
            row["seed"] = self.source.seed
        row.update(
            {
                "triples": self.rows(),
                "clusters": {f"#{c.id}": list(c.members) for c in self.placeholders},
                "eligible": [f"#{k}" for k in sorted(self.eligible_targets)],
                "hops": self.hop_count,
                "signature": str(self.signature()),
            }
        )
        return row

    @classmethod
    def from_json(cls, row: dict) -> "LogicalPath":
        placeholders = sorted(
            (int(k.lstrip("#")), tuple(v)) for k, v in row["clusters"].items()
        )
        if [k for k, _ in placeholders] != list(range(len(placeholders))):
            raise LogicalPathError("placeholder ids must be contiguous from #0")
        clusters = [EntityCluster(k, m, PLACEHOLDER) for k, m in placeholders]
        literal_ids: dict[tuple[str, ...], int] = {}

        def ref(x) -> ClusterRef:
            if isinstance(x, str):
                if not x.startswith("#"):
                    raise LogicalPathError(f"bad cluster reference {x!r}")
                k = int(x[1:])
                if k >= len(placeholders):
                    raise LogicalPathError(f"unknown placeholder {x}")
                return Placeholder(k)
            names = tuple(x)
            if names not in literal_ids:
                literal_ids[names] = len(clusters)
                clusters.append(EntityCluster(len(clusters), names, LITERAL))
            return Literal(names)

        triples = tuple(LogicalTriple(ref(s), r, ref(o)) for s, r, o in row["triples"])
        eligible = frozenset(int(k.lstrip("#")) for k in row.get("eligible", []))
        path = cls(triples, tuple(clusters), eligible, id=row.get("id"))
        if "hops" in row and row["hops"] != path.hop_count:
            raise LogicalPathError("hops disagrees with triple count")
        return path

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False)


# ---------------------------------------------------------------- clustering


def _neighbourhoods(triples: Iterable[Triple]) -> dict[str, dict[str, set[str]]]:
    neigh: dict[str, dict[str, set[str]]] = defaultdict(lambda: defaultdict(set))
    for h, r, t in triples:
        neigh[h][r].add(t)
        neigh[t][r].add(h)
    return neigh


def _appearance_order(triples: Iterable[Triple]) -> list[str]:
    seen: dict[str, None] = {}
    for t in triples:
        seen.setdefault(t.head)
        seen.setdefault(t.tail)
    return list(seen)


def cluster_entities(s: Subgraph) -> list[EntityCluster]:
    """Partition the subgraph's nodes by relation-wise neighbourhood.

    Clusters and their members are ordered by first appearance in the
    subgraph's triple order.  ``kind`` reflects the placeholder/literal rule
    applied by :func:`to_logical_path`.
    """
    neigh = _neighbourhoods(s.triples)
    rels = s.relation_types
    groups: dict[tuple, list[str]] = {}
    for e in _appearance_order(s.triples):
        key = tuple(frozenset(neigh[e].get(r, ())) for r in rels)
        groups.setdefault(key, []).append(e)
    clusters = [EntityCluster(i, tuple(m)) for i, m in enumerate(groups.values())]
    facts = _abstract_facts(s.triples, clusters)
    uses = _fact_counts(facts)
    return [
        dataclasses.replace(c, kind=PLACEHOLDER if uses[c.id] >= 2 else LITERAL)
        for c in clusters
    ]


def _abstract_facts(
    triples: Sequence[Triple], clusters: Sequence[EntityCluster]
) -> dict[tuple[int, str, int], list[Triple]]:
    cid = {m: c.id for c in clusters for m in c.members}
    facts: dict[tuple[int, str, int], list[Triple]] = {}
    for t in triples:
        facts.setdefault((cid[t.head], t.relation, cid[t.tail]), []).append(t)
    return facts


def _fact_counts(facts: Iterable[tuple[int, str, int]]) -> dict[int, int]:
    uses: dict[int, int] = defaultdict(int)
    for a, _, b in facts:
        uses[a] += 1
        if b != a:
            uses[b] += 1
    return uses


def to_logical_path(
    s: Subgraph, clusters: Sequence[EntityCluster] | None = None
) -> LogicalPath:
    """Abstract a subgraph into logical triples over its clusters.

    Parallel facts between the same clusters collapse into one logical
    triple.  Raises :class:`IncompleteClusterError` when a collapsed fact
    does not cover its full member cross product, since the abstraction
    would then denote triples that are not in the subgraph.
    """
    clusters = list(clusters) if clusters is not None else cluster_entities(s)
    facts = _abstract_facts(s.triples, clusters)
    by_id = {c.id: c for c in clusters}
    for (a, r, b), members in facts.items():
        expected = len(by_id[a].members) * len(by_id[b].members)
        if len(set(members)) != expected:
            raise IncompleteClusterError(
                f"relation {r} links {len(set(members))} of {expected} member pairs"
            )
    uses = _fact_counts(facts)

    # placeholders numbered by first appearance in logical-triple order
    renum: dict[int, int] = {}
    for a, _, b in facts:
        for c in (a, b):
            if uses[c] >= 2 and c not in renum:
                renum[c] = len(renum)
    n_ph = len(renum)
    literal_ids = [c.id for c in clusters if c.id not in renum]
    for i, c in enumerate(literal_ids):
        renum[c] = n_ph + i

    new_clusters = sorted(
        (
            EntityCluster(renum[c.id], c.members, PLACEHOLDER if renum[c.id] < n_ph else LITERAL)
            for c in clusters
        ),
        key=lambda c: c.id,
    )

    def ref(c: int) -> ClusterRef:
        k = renum[c]
        return Placeholder(k) if k < n_ph else Literal(by_id[c].members)

    triples = tuple(LogicalTriple(ref(a), r, ref(b)) for a, r, b in facts)
    return LogicalPath(triples, tuple(new_clusters), source=s)


# ----------------------------------------------------------- identifiability


class _Problem:
    """Conjunctive query over the global graph for a subset of logical triples."""

    def __init__(self, kg: KnowledgeGraph, path: LogicalPath, triples: Sequence[LogicalTriple]):
        self.kg = kg
        self.domains: dict[int, set[str]] = {}
        self.binary: list[tuple[int, str, int]] = []
        self.unsatisfiable = False
        for lt in triples:
            s, r, o = lt.subject, lt.relation, lt.object
            if isinstance(s, Literal) and isinstance(o, Literal):
                if not all((h, r, t) in kg for h in s.names for t in o.names):
                    self.unsatisfiable = True
            elif isinstance(o, Literal):
                allowed = set.intersection(*(kg.in_index.get((l, r), set()) for l in o.names))
                self._restrict(s.index, allowed)
            elif isinstance(s, Literal):
                allowed = set.intersection(*(kg.out_index.get((l, r), set()) for l in s.names))
                self._restrict(o.index, allowed)
            else:
                self._restrict(s.index, kg.heads_of(r))
                self._restrict(o.index, kg.tails_of(r))
                self.binary.append((s.index, r, o.index))

    def _restrict(self, var: int, allowed: set[str]) -> None:
        if var in self.domains:
            self.domains[var] &= allowed
        else:
            self.domains[var] = set(allowed)

    def _supported(self, x: str, var_is_head: bool, r: str, other: set[str]) -> bool:
        idx = self.kg.out_index if var_is_head else self.kg.in_index
        return not idx.get((x, r), set()).isdisjoint(other)

    def arc_consistency(self, domains: dict[int, set[str]]) -> bool:
        """Prune ``domains`` in place; False if some domain empties."""
        changed = True
        while changed:
            changed = False
            for a, r, b in self.binary:
                for var, other, head in ((a, b, True), (b, a, False)):
                    keep = {x for x in domains[var] if self._supported(x, head, r, domains[other])}
                    if len(keep) != len(domains[var]):
                        domains[var] = keep
                        changed = True
                        if not keep:
                            return False
        return all(domains.values())

    def acyclic(self) -> bool:
        parent = {v: v for v in self.domains}

        def find(v: int) -> int:
            while parent[v] != v:
                parent[v] = parent[parent[v]]
                v = parent[v]
            return v

        for a, _, b in self.binary:
            ra, rb = find(a), find(b)
            if ra == rb:
                return False
            parent[ra] = rb
        return True

    def has_solution(self, domains: dict[int, set[str]]) -> bool:
        domains = {k: set(v) for k, v in domains.items()}
        if not self.arc_consistency(domains):
            return False
        open_vars = [v for v, d in domains.items() if len(d) > 1]
        if not open_vars:
            return True
        var = min(open_vars, key=lambda v: (len(domains[v]), v))
        for x in sorted(domains[var]):
            trial = dict(domains)
            trial[var] = {x}
            if self.has_solution(trial):
                return True
        return False

    def projection_equals(self, var: int, members: set[str]) -> bool:
        """Whether the exact answer set of ``var`` is ``members``."""
        if self.unsatisfiable:
            return False
        if var not in self.domains:
            return set(self.kg.entities) == members
        domains = {k: set(v) for k, v in self.domains.items()}
        if not self.arc_consistency(domains):
            return False
        if not domains[var] >= members:
            return False
        extra = domains[var] - members
        if not extra:
            return self.acyclic() or self._all_supported(var, members, domains)
        if self.acyclic():
            return False
        for x in sorted(extra):
            trial = dict(domains)
            trial[var] = {x}
            if self.has_solution(trial):
                return False
        return self._all_supported(var, members, domains)

    def _all_supported(self, var: int, members: set[str], domains: dict[int, set[str]]) -> bool:
        for x in sorted(members):
            trial = dict(domains)
            trial[var] = {x}
            if not self.has_solution(trial):
                return False
        return True


def identifies(
    kg: KnowledgeGraph, path: LogicalPath, subset: Sequence[int], target: int
) -> bool:
    """Do the triples at ``subset`` pin ``#target`` to exactly its members in ``kg``?"""
    problem = _Problem(kg, path, [path.triples[i] for i in subset])
    return problem.projection_equals(target, set(path.clusters[target].members))


def exclusion_witnesses(kg: KnowledgeGraph, path: LogicalPath) -> dict[int, tuple[int, ...]]:
    """Map each excluded placeholder to a minimal identifying proper subset.

    Adding triples can only shrink a placeholder's answer set, and the answer
    set always contains the members, so a placeholder is identifiable by some
    proper subset iff it is by one that drops a single triple.  That witness
    is then greedily shrunk until no triple can be removed.
    """
    n = path.hop_count
    out: dict[int, tuple[int, ...]] = {}
    if n < 2:
        return out
    for c in path.placeholders:
        witness = None
        for drop in range(n):
            subset = [i for i in range(n) if i != drop]
            if identifies(kg, path, subset, c.id):
                witness = subset
                break
        if witness is None:
            continue
        for i in list(witness):
            if len(witness) == 1:
                break
            trial = [w for w in witness if w != i]
            if identifies(kg, path, trial, c.id):
                witness = trial
        out[c.id] = tuple(witness)
    return out


def eligible_targets(kg: KnowledgeGraph, path: LogicalPath) -> set[int]:
    excluded = exclusion_witnesses(kg, path)
    return {c.id for c in path.placeholders if c.id not in excluded}


def with_eligibility(kg: KnowledgeGraph, path: LogicalPath) -> LogicalPath:
    return dataclasses.replace(path, eligible_targets=frozenset(eligible_targets(kg, path)))


# ----------------------------------------------------------------- signature


def structural_signature(path: LogicalPath) -> StructuralSignature:
    """Hop count plus the sorted (in, out) degree multiset of the cluster graph."""
    deg: dict[ClusterRef, list[int]] = {}
    for lt in path.triples:
        deg.setdefault(lt.subject, [0, 0])[1] += 1
        deg.setdefault(lt.object, [0, 0])[0] += 1
    return StructuralSignature(path.hop_count, tuple(sorted((i, o) for i, o in deg.values())))
