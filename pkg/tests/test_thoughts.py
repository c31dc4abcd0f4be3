from __future__ import annotations

import dataclasses
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hopforge.gateway import ChatRequest, Gateway
from hopforge.kg import KnowledgeGraph
from hopforge.logical import LogicalPath, Placeholder, with_eligibility
from hopforge.qa import QAPair
from hopforge.thoughts import (
    AnswerMismatchError,
    DistillationError,
    MissingKnowledgeError,
    OrderingError,
    RefinementError,
    SFTRecord,
    SpecialTokens,
    StrayTokenError,
    ThoughtIteration,
    assemble_record,
    build_sft_dataset,
    build_sft_record,
    distill_initial_thought,
    matching_triples,
    parse_response,
    plan_iterations,
    retrieve_knowledge,
    serialize_response,
    split_segments,
)

from .builders import Scripted, named_graph, random_paths, task_of
from .conftest import BATMAN, EPISODE
from .oracles import is_topological


def _qa(path: LogicalPath, target: int, verified: bool = True, qid: str = "q") -> QAPair:
    return QAPair(qid, "Which one is it?", path.clusters[target].members, target, path, verified)


@pytest.fixture()
def bridge_qa(extended_kg, voices_path) -> QAPair:
    path = dataclasses.replace(with_eligibility(extended_kg, voices_path), id="p0")
    return _qa(path, 1, qid="p0#1")


def test_plan_voices_target_0(voices_path):
    order = [s.triple_index for s in plan_iterations(_qa(voices_path, 0))]
    assert sorted(order) == [0, 1, 2, 3]
    # the film-list triple feeds #2, which feeds #0
    assert order.index(3) < order.index(2)
    assert order.index(1) < order.index(0)
    assert order == [1, 0, 3, 2]


def test_plan_voices_target_1(voices_path):
    plan = plan_iterations(_qa(voices_path, 1))
    assert [(s.step, s.triple_index) for s in plan] == [(1, 1), (2, 3), (3, 2), (4, 0)]
    assert plan[0].text.startswith("Which entity links Batman-US to #1")


def test_plan_uses_verified_subquestions(voices_path):
    qa = dataclasses.replace(_qa(voices_path, 1), subquestions=((3, "Which group voiced those films?"),))
    texts = {s.triple_index: s.text for s in plan_iterations(qa)}
    assert texts[3] == "Which group voiced those films?"


def test_plan_requires_verification(voices_path):
    with pytest.raises(ValueError):
        plan_iterations(_qa(voices_path, 1, verified=False))


@pytest.fixture(scope="module")
def random_pool() -> list[LogicalPath]:
    pool: list[LogicalPath] = []
    seed = 0
    while len(pool) < 150:
        rng = random.Random(1000 + seed)
        pool.extend(random_paths(rng, named_graph(rng, 10, 4, 26), eligible_only=False))
        seed += 1
    return pool


def test_plan_is_topological_on_random_paths(random_pool):
    planned = 0
    for path in random_pool:
        for c in path.placeholders:
            try:
                order = [s.triple_index for s in plan_iterations(_qa(path, c.id))]
            except OrderingError:
                continue
            planned += 1
            assert sorted(order) == list(range(path.hop_count))
            assert is_topological(path, c.id, order)
    assert planned > 100


def test_split_segments():
    assert split_segments("[Step 1] a\n[Step 2] b") == [(1, "a"), (2, "b")]
    assert split_segments("intro\n[Step 1] a") == [(0, "intro\n"), (1, "a")]
    assert split_segments("nothing") == [(0, "nothing")]


def test_distill_returns_one_draft_per_step(bridge_qa):
    plan = plan_iterations(bridge_qa)
    drafts = distill_initial_thought(Gateway(Scripted()), bridge_qa, plan)
    assert len(drafts) == len(plan) == 4


def test_distill_rejects_missing_step(bridge_qa):
    plan = plan_iterations(bridge_qa)
    short = "\n".join(f"[Step {i}] thinking" for i in range(1, len(plan)))
    gw = Gateway(Scripted(thinking_distillation=short))
    with pytest.raises(DistillationError) as exc:
        distill_initial_thought(gw, bridge_qa, plan)
    assert exc.value.reason == "segment-mismatch"


def test_distill_retry_recovers(bridge_qa):
    plan = plan_iterations(bridge_qa)
    replies = iter(["[Step 1] only one", "\n".join(f"[Step {i}] ok {i}" for i in range(1, 5))])
    gw = Gateway(Scripted(thinking_distillation=lambda r: next(replies)))
    assert distill_initial_thought(gw, bridge_qa, plan, attempts=2) == [f"ok {i}" for i in range(1, 5)]


def test_retrieve_voices_episode_triple(voices_kg, voices_path):
    lt = voices_path.triples[2]
    assert (lt.subject, lt.relation, lt.object) == (Placeholder(2), EPISODE, Placeholder(0))
    found = matching_triples(voices_kg, voices_path, lt)
    assert [(t.head, t.tail) for t in found] == [("Seiyū-GB", "Shinichiro_Mik"), ("Seiyū-GB", "Kikuko_Inoue")]
    text = retrieve_knowledge(voices_kg, voices_path, lt)
    assert text.splitlines() == [f"Seiyū-GB | {EPISODE} | Shinichiro_Mik", f"Seiyū-GB | {EPISODE} | Kikuko_Inoue"]


def test_retrieve_nothing_raises(voices_path):
    unrelated = KnowledgeGraph([("Seiyū-GB", "/other/rel", "Kikuko_Inoue")])
    with pytest.raises(MissingKnowledgeError):
        retrieve_knowledge(unrelated, voices_path, voices_path.triples[2])


def test_refinement_call_log(extended_kg, bridge_qa):
    gw = Gateway(Scripted())
    record, iterations = build_sft_record(gw, extended_kg, bridge_qa)
    tasks = [task_of(_req(c)) for c in gw.calls]
    assert tasks == ["thinking-distillation"] + ["thought-refinement"] * 3 + [
        "thought-refinement-final",
        "output-generation",
    ]
    prompts = [c.messages[-1]["content"] for c in gw.calls[1:5]]
    for k, prompt in enumerate(prompts):
        # every earlier refined step is in context, later ones are not
        for j, it in enumerate(iterations):
            assert (it.refined in prompt) == (j < k)
    assert "Final answer to reach: Batman:_Gotham_Knight" in gw.calls[-1].messages[-1]["content"]
    assert record.think == "\n\n".join(it.refined for it in iterations)
    assert record.provenance["iterations"] == 4


def _req(call):
    return ChatRequest(tuple((m["role"], m["content"]) for m in call.messages))


def test_empty_refinement(extended_kg, bridge_qa):
    gw = Gateway(Scripted(thought_refinement="  "))
    with pytest.raises(RefinementError):
        build_sft_record(gw, extended_kg, bridge_qa)


def test_answer_mismatch(extended_kg, bridge_qa):
    gw = Gateway(Scripted(output_generation="Final answer: The_Dark_Knight"))
    with pytest.raises(AnswerMismatchError) as exc:
        build_sft_record(gw, extended_kg, bridge_qa)
    assert exc.value.reason == "answer-mismatch"


def test_stray_token_in_output(extended_kg, bridge_qa):
    gw = Gateway(Scripted(output_generation=f"<output>Final answer: {BATMAN}"))
    with pytest.raises(StrayTokenError):
        build_sft_record(gw, extended_kg, bridge_qa)


def test_answer_match_is_normalized(bridge_qa):
    its = [ThoughtIteration(1, "q", "d", "k", "refined")]
    gw = Gateway(Scripted(output_generation="final answer: the batman:_gotham_knight!"))
    rec = assemble_record(gw, bridge_qa, its)
    assert rec.response == "<think>refined</think><output>final answer: the batman:_gotham_knight!</output>"


_text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=60).filter(
    lambda s: not any(t in s for t in SpecialTokens().all())
)


@settings(max_examples=100, deadline=None)
@given(_text, _text, st.lists(st.text(min_size=1, max_size=10), min_size=1, max_size=3), st.integers(2, 6))
def test_record_roundtrip(think, output, answers, hops):
    rec = SFTRecord("id", "q?", think, output, tuple(answers), hops)
    row = json.loads(json.dumps(rec.to_json()))
    assert SFTRecord.from_json(row) == rec
    assert parse_response(rec.response, rec.tokens) == (think, output)


@pytest.mark.parametrize(
    "text",
    [
        "<think>a</think><output>b",
        "<think>a</think><think></think><output>b</output>",
        "<output>b</output><think>a</think>",
        "<think>a</think> <output>b</output>",
        "x<think>a</think><output>b</output>",
    ],
)
def test_parse_response_strict(text):
    with pytest.raises(StrayTokenError):
        parse_response(text, SpecialTokens())


def test_custom_tokens():
    tok = SpecialTokens("[T]", "[/T]", "[O]", "[/O]")
    text = serialize_response("a", "b", tok)
    assert text == "[T]a[/T][O]b[/O]"
    assert parse_response(text, tok) == ("a", "b")


def test_dataset_discards_with_reasons(extended_kg, bridge_qa):
    unverified = dataclasses.replace(bridge_qa, id="u", verified=False)
    broken = dataclasses.replace(bridge_qa, id="b", question="BROKEN question")

    def output(req):
        return "no idea" if "BROKEN" in req.messages[-1][1] else f"Final answer: {BATMAN}"

    gw = Gateway(Scripted(output_generation=output))
    out = build_sft_dataset(gw, extended_kg, [bridge_qa, unverified, broken], concurrency=2)
    assert [r.id for r in out.records] == ["p0#1"]
    assert [(d["id"], d["reason"]) for d in out.discards] == [("b", "answer-mismatch")]
