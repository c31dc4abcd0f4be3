from __future__ import annotations

import dataclasses
import json
import random
import re

import pytest

from hopforge.gateway import ChatRequest, Gateway, GatewayError, StubBackend, prompt_hash
from hopforge.logical import LogicalPath, with_eligibility
from hopforge.qa import (
    AnswerLeakError,
    EmptySampleError,
    IneligibleTargetError,
    QAPair,
    QuestionConstraints,
    SamplingPlan,
    curate,
    format_logical_triples,
    generate_question,
    parse_decomposition,
    render_question_prompt,
    sample_paths,
    verify_question,
)

from .builders import Scripted, named_graph, random_paths


@pytest.fixture(scope="module")
def path_pool() -> list[LogicalPath]:
    pool: list[LogicalPath] = []
    seed = 0
    while len(pool) < 120:
        rng = random.Random(seed)
        pool.extend(random_paths(rng, named_graph(rng, 12, 4, 30)))
        seed += 1
    return pool


@pytest.fixture()
def bridge_path(extended_kg, voices_path) -> LogicalPath:
    return dataclasses.replace(with_eligibility(extended_kg, voices_path), id="p0")


def test_sampling_respects_quota_and_hops(path_pool):
    plan = SamplingPlan(per_signature_quota=2, hop_range=(2, 4), rng_seed=1)
    result = sample_paths(path_pool, plan)
    assert all(2 <= p.hop_count <= 4 for p in result.paths)
    assert all(n <= 2 for n in result.per_signature.values())
    assert sum(result.per_signature.values()) == len(result.paths)
    assert result.signature_count == len(result.per_signature)
    assert 0 < result.coverage <= 1


def test_sampling_takes_whole_group_under_quota(path_pool):
    result = sample_paths(path_pool, SamplingPlan(per_signature_quota=10_000))
    eligible = [p for p in path_pool if p.eligible_targets and 2 <= p.hop_count <= 6]
    assert len(result.paths) == len(eligible)


def test_sampling_is_deterministic(path_pool):
    plan = SamplingPlan(per_signature_quota=1, rng_seed=7)
    a = [p.id for p in sample_paths(path_pool, plan).paths]
    b = [p.id for p in sample_paths(list(path_pool), plan).paths]
    assert a == b


def test_sampling_empty_inputs(voices_path):
    with pytest.raises(EmptySampleError):
        sample_paths([], SamplingPlan())
    # the bare voices graph pins every placeholder, so nothing is eligible
    with pytest.raises(EmptySampleError):
        sample_paths([voices_path], SamplingPlan())


def test_plan_validation():
    with pytest.raises(ValueError):
        SamplingPlan(per_signature_quota=0)
    with pytest.raises(ValueError):
        SamplingPlan(hop_range=(1, 6))


def test_prompt_for_voices_path(voices_path):
    path = dataclasses.replace(voices_path, eligible_targets=frozenset({0}))
    prompt = render_question_prompt(path, 0)
    rows = re.findall(r"^(\d+)\. (\[.*\])$", prompt, re.MULTILINE)
    assert [int(n) for n, _ in rows] == [1, 2, 3, 4]
    assert [json.loads(r) for _, r in rows] == path.rows()
    assert "Question target: #0" in prompt
    for name in ("Shinichiro_Mik", "Kikuko_Inoue"):
        assert name not in prompt


def test_prompt_rejects_ineligible_target(bridge_path):
    with pytest.raises(IneligibleTargetError):
        render_question_prompt(bridge_path, 0)


def test_prompt_leak_is_caught(bridge_path):
    leaky = QuestionConstraints(extra=("Hint: it rhymes with Batman:_Gotham_Knight.",))
    with pytest.raises(AnswerLeakError):
        render_question_prompt(bridge_path, 1, leaky)


def test_no_answer_leak_on_random_paths(path_pool):
    for path in path_pool[:100]:
        for target in path.eligible_targets:
            prompt = render_question_prompt(path, target)
            for name in path.clusters[target].members:
                assert name not in prompt


def test_generate_from_stub_fixture(bridge_path):
    prompt = render_question_prompt(bridge_path, 1)
    req = ChatRequest.user(prompt, max_tokens=1024)
    gw = Gateway(StubBackend({prompt_hash(req): "Which film did Batman-US dub?\nextra line"}))
    qa = generate_question(gw, bridge_path, 1)
    assert qa.question == "Which film did Batman-US dub?"
    assert qa.answers == ("Batman:_Gotham_Knight",)
    assert qa.id == "p0#1"
    assert not qa.verified


def test_generate_missing_fixture_raises(bridge_path):
    with pytest.raises(GatewayError):
        generate_question(Gateway(StubBackend({})), bridge_path, 1)


@pytest.mark.parametrize(
    "reply, reason",
    [
        ('{"a": 1, "b": 2, "c": 3}', None),
        ('Here you go: {"a": "1", "b": [2], "c": 3} thanks', None),
        ('{"a": [1, 2], "b": 3}', "sub-question maps to several triples"),
        ('{"a": 1, "b": 2, "c": 7}', "unknown triple"),
        ('{"a": 1, "b": 1, "c": 3}', "duplicate triple"),
        ('{"a": 1, "b": 2}', "uncovered triple"),
        ("no json at all", "unverifiable reply"),
        ('{"a": "one"}', "unverifiable reply"),
        ("{}", "unverifiable reply"),
    ],
)
def test_parse_decomposition(reply, reason):
    mapping, why = parse_decomposition(reply, 3)
    assert why == reason
    assert (mapping is None) == (reason is not None)
    if mapping:
        assert sorted(mapping) == [0, 1, 2]


def _unverified(path: LogicalPath, n: int) -> QAPair:
    return QAPair(f"q{n}", f"question {n}?", path.clusters[1].members, 1, path)


def test_verification_pass_rate_matches_script(bridge_path):
    good = json.dumps({"s1": 1, "s2": 2, "s3": 3, "s4": 4})
    bad = json.dumps({"s1": 1, "s2": 1, "s3": 3, "s4": 4})
    script = {f"question {i}?": (good if i % 4 else bad) for i in range(20)}

    def reply(req):
        m = re.search(r"^Question: (.*)$", req.messages[-1][1], re.MULTILINE)
        return script[m.group(1)]

    gw = Gateway(Scripted(question_verification=reply))
    results = [verify_question(gw, _unverified(bridge_path, i)) for i in range(20)]
    assert sum(r.verified for r in results) == 15
    for r in results:
        if r.verified:
            assert [t for t, _ in r.subquestions] == [0, 1, 2, 3]
        else:
            assert r.reason == "duplicate triple"


def test_verification_retries(bridge_path):
    replies = iter(["nonsense", json.dumps({"a": 1, "b": 2, "c": 3, "d": 4})])
    gw = Gateway(Scripted(question_verification=lambda r: next(replies)))
    qa = verify_question(gw, _unverified(bridge_path, 0), attempts=2)
    assert qa.verified
    assert [c.params["sample_index"] for c in gw.calls] == [None, 1]


def test_verify_twice_rejected(bridge_path):
    gw = Gateway(Scripted())
    qa = verify_question(gw, _unverified(bridge_path, 0))
    with pytest.raises(ValueError):
        verify_question(gw, qa)


def test_qapair_roundtrip(bridge_path):
    qa = verify_question(Gateway(Scripted()), _unverified(bridge_path, 3))
    row = json.loads(json.dumps(qa.to_json()))
    back = QAPair.from_json(row)
    assert back == qa
    assert row["signature"] == "4|0-1,0-1,1-1,1-1,2-0"
    row["answers"] = ["Someone_Else"]
    with pytest.raises(ValueError):
        QAPair.from_json(row)


def test_curate_keeps_order_and_reports_failures(bridge_path):
    calls = {"n": 0}

    def second_generation_fails(req):
        calls["n"] += 1
        if calls["n"] == 2:
            raise GatewayError("boom")
        return "Which film is it?"

    gw = Gateway(Scripted(question_generation=second_generation_fails))
    jobs = [(bridge_path, 1, "a"), (bridge_path, 1, "b"), (bridge_path, 1, "c")]
    out = curate(gw, jobs, concurrency=1)
    assert [qa.id for qa in out.pairs] == ["a", "c"]
    assert all(qa.verified for qa in out.pairs)
    assert [f["id"] for f in out.failures] == ["b"]


def test_curate_gateway_error_becomes_failure(bridge_path):
    def boom(req):
        raise GatewayError("down")

    out = curate(Gateway(boom), [(bridge_path, 1, "a")])
    assert out.pairs == []
    assert out.failures == [{"id": "a", "reason": "GatewayError", "detail": "down"}]


def test_format_logical_triples_numbering(bridge_path):
    lines = format_logical_triples(bridge_path).splitlines()
    assert [ln.split(".")[0] for ln in lines] == ["1", "2", "3", "4"]
