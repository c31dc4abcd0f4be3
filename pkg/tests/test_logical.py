from __future__ import annotations

import dataclasses
import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hopforge.kg import KnowledgeGraph, Triple
from hopforge.logical import (
    LITERAL,
    PLACEHOLDER,
    AbstractSelfLoopError,
    EntityCluster,
    IncompleteClusterError,
    Literal,
    LogicalPath,
    LogicalTriple,
    Placeholder,
    cluster_entities,
    eligible_targets,
    exclusion_witnesses,
    identifies,
    structural_signature,
    to_logical_path,
)
from hopforge.subgraphs import Subgraph, enumerate_subgraphs

from .conftest import BATMAN, DUB, EPISODE, SPECIAL
from .oracles import brute_excluded, brute_projection, pairwise_partition, random_triples, scan_neighbors

FILMS = ["Sailor_Moon_S_the_Movie", "Case_Closed:_Captured_in_Her_Eyes", "Dragon_Ball:_Mystical_Adventure"]


def _sub(triples, seed=None) -> Subgraph:
    triples = tuple(Triple(*t) for t in triples)
    rels = tuple(dict.fromkeys(t.relation for t in triples))
    return Subgraph(seed or triples[0].head, triples, rels)


def test_voices_clusters(voices_subgraph):
    got = {c.members for c in cluster_entities(voices_subgraph)}
    assert got == {
        ("Shinichiro_Mik", "Kikuko_Inoue"),
        (BATMAN,),
        ("Batman-US",),
        ("Seiyū-GB",),
        tuple(FILMS),
    }


def test_single_triple_clusters():
    clusters = cluster_entities(_sub([("a", "/x/r", "b")]))
    assert [c.members for c in clusters] == [("a",), ("b",)]


def test_voices_logical_triples(voices_path):
    assert voices_path.rows(compact=True) == [
        ["#0", DUB, "#1"],
        ["Batman-US", DUB, "#1"],
        ["#2", EPISODE, "#0"],
        [FILMS, SPECIAL, "#2"],
    ]
    assert voices_path.clusters[0].members == ("Shinichiro_Mik", "Kikuko_Inoue")
    assert voices_path.clusters[1].members == (BATMAN,)
    assert voices_path.clusters[2].members == ("Seiyū-GB",)
    assert [c.kind for c in voices_path.clusters] == [PLACEHOLDER] * 3 + [LITERAL] * 2
    assert voices_path.hop_count == 4


def test_single_triple_path():
    p = to_logical_path(_sub([("a", "/x/r", "b")]))
    assert p.triples == (LogicalTriple(Literal(("a",)), "/x/r", Literal(("b",))),)
    assert p.hop_count == 1


def test_json_roundtrip(voices_path):
    again = LogicalPath.from_json(voices_path.to_json())
    assert again.triples == voices_path.triples
    assert again.clusters == voices_path.clusters
    assert again.expand() == voices_path.expand()


def test_incomplete_cluster_is_rejected():
    # a and c share neighbour b but in opposite directions
    s = _sub([("a", "/x/r", "b"), ("b", "/x/r", "c"), ("b", "/x/s", "d")])
    assert {c.members for c in cluster_entities(s)} >= {("a", "c")}
    with pytest.raises(IncompleteClusterError):
        to_logical_path(s)


def test_abstract_self_loop_forbidden():
    with pytest.raises(AbstractSelfLoopError):
        LogicalTriple(Placeholder(0), "/x/r", Placeholder(0))


def _random_subgraphs(seed: int, limit: int = 6):
    rng = random.Random(seed)
    kg = KnowledgeGraph(random_triples(rng, rng.randint(4, 15), rng.randint(2, 4), rng.randint(4, 40)))
    seeds = rng.sample(kg.entities, min(2, len(kg.entities)))
    subs = list(itertools.islice(enumerate_subgraphs(kg, seeds, 3, cap=None), limit))
    return kg, subs


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 100_000))
def test_clustering_matches_pairwise_oracle(seed):
    _, subs = _random_subgraphs(seed)
    for s in subs:
        clusters = cluster_entities(s)
        assert {frozenset(c.members) for c in clusters} == pairwise_partition(s.triples)
        nodes = [m for c in clusters for m in c.members]
        assert sorted(nodes) == sorted(s.node_set)
        for c in clusters:
            for r in s.relation_types:
                sets = {frozenset(scan_neighbors(s.triples, m, r)) for m in c.members}
                assert len(sets) == 1
        # maximality: no two clusters can merge
        for a, b in itertools.combinations(clusters, 2):
            assert any(
                scan_neighbors(s.triples, a.members[0], r) != scan_neighbors(s.triples, b.members[0], r)
                for r in s.relation_types
            )


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 100_000))
def test_expansion_roundtrip(seed):
    _, subs = _random_subgraphs(seed)
    for s in subs:
        try:
            p = to_logical_path(s)
        except IncompleteClusterError:
            continue
        assert p.expand() == set(s.triples)
        placeholders = {r.index for lt in p.triples for r in (lt.subject, lt.object) if isinstance(r, Placeholder)}
        assert placeholders == {c.id for c in p.placeholders}


def test_signature_voices(voices_path):
    sig = structural_signature(voices_path)
    # degrees of #0,#1,Batman-US,#2,films counted from the four logical triples
    assert sig.hop_count == 4
    assert sorted(sig.degree_pattern) == sorted([(1, 1), (2, 0), (0, 1), (1, 1), (0, 1)])
    assert str(sig) == "4|0-1,0-1,1-1,1-1,2-0"


def test_signature_single():
    p = to_logical_path(_sub([("a", "/x/r", "b")]))
    assert structural_signature(p).degree_pattern == ((0, 1), (1, 0))


def _renumbered(p: LogicalPath, perm: list[int]) -> LogicalPath:
    def ref(r):
        return Placeholder(perm[r.index]) if isinstance(r, Placeholder) else r

    triples = tuple(LogicalTriple(ref(t.subject), t.relation, ref(t.object)) for t in p.triples)
    clusters = tuple(
        sorted(
            (dataclasses.replace(c, id=perm[c.id]) if c.kind == PLACEHOLDER else c for c in p.clusters),
            key=lambda c: c.id,
        )
    )
    return LogicalPath(triples, clusters)


def test_signature_invariant_under_renaming(voices_path):
    for perm in itertools.permutations(range(3)):
        assert structural_signature(_renumbered(voices_path, list(perm))) == structural_signature(
            voices_path
        )


def test_empty_subset_cannot_identify():
    kg = KnowledgeGraph([("x", "/t/r", "A"), ("y", "/t/s", "z")])
    p = LogicalPath(
        (LogicalTriple(Placeholder(0), "/t/r", Literal(("A",))),),
        (EntityCluster(0, ("x",)), EntityCluster(1, ("A",), LITERAL)),
    )
    assert eligible_targets(kg, p) == {0}


def test_voices_eligibility_matches_oracle(voices_kg, voices_path):
    excluded = set(exclusion_witnesses(voices_kg, voices_path))
    assert excluded == brute_excluded(voices_kg.triples, voices_kg.entities, voices_path)
    assert eligible_targets(voices_kg, voices_path) == set()


def test_extended_fixture_keeps_bridge_target(extended_kg, voices_path):
    assert eligible_targets(extended_kg, voices_path) == {1}
    assert brute_excluded(extended_kg.triples, extended_kg.entities, voices_path) == {0, 2}


def test_target_pinned_by_one_of_three():
    # #0 -r-> A, #0 -s-> B, #0 -t-> C; only x has /k/t to C, so triple 2 alone pins #0
    kg = KnowledgeGraph(
        [
            ("x", "/k/r", "A"), ("x", "/k/s", "B"), ("x", "/k/t", "C"),
            ("y", "/k/r", "A"), ("y", "/k/s", "B"),
            ("x", "/k/u", "D"), ("y", "/k/u", "D"),
        ]
    )
    p = LogicalPath(
        (
            LogicalTriple(Placeholder(0), "/k/r", Literal(("A",))),
            LogicalTriple(Placeholder(0), "/k/s", Literal(("B",))),
            LogicalTriple(Placeholder(0), "/k/t", Literal(("C",))),
        ),
        (
            EntityCluster(0, ("x",)),
            EntityCluster(1, ("A",), LITERAL),
            EntityCluster(2, ("B",), LITERAL),
            EntityCluster(3, ("C",), LITERAL),
        ),
    )
    witnesses = exclusion_witnesses(kg, p)
    assert witnesses == {0: (2,)}
    assert brute_projection(kg.triples, kg.entities, p, witnesses[0], 0) == {"x"}


def test_cyclic_constraints_use_search():
    # #0 -r-> #1, #1 -s-> #0 (2-cycle) with a literal anchor; AC alone keeps spurious values
    kg = KnowledgeGraph(
        [
            ("a", "/k/r", "b"), ("b", "/k/s", "a"),
            ("c", "/k/r", "d"), ("d", "/k/s", "e"), ("e", "/k/r", "f"), ("f", "/k/s", "c"),
            ("a", "/k/t", "L"), ("c", "/k/t", "L"), ("e", "/k/t", "L"),
        ]
    )
    p = LogicalPath(
        (
            LogicalTriple(Placeholder(0), "/k/r", Placeholder(1)),
            LogicalTriple(Placeholder(1), "/k/s", Placeholder(0)),
            LogicalTriple(Placeholder(0), "/k/t", Literal(("L",))),
        ),
        (EntityCluster(0, ("a",)), EntityCluster(1, ("b",)), EntityCluster(2, ("L",), LITERAL)),
    )
    for subset in itertools.chain.from_iterable(itertools.combinations(range(3), k) for k in range(4)):
        for target in (0, 1):
            expected = brute_projection(kg.triples, kg.entities, p, subset, target) == set(
                p.clusters[target].members
            )
            assert identifies(kg, p, subset, target) == expected, (subset, target)
