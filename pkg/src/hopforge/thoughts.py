"""Long-form think/output SFT records grounded in knowledge-graph facts.

Each verified QA pair is planned into one sub-question per logical triple.
A draft reasoning is distilled in numbered segments, then every segment is
rewritten in order with the KG triples behind its logical triple and all
previously refined segments as context.
"""

from __future__ import annotations

import heapq
import re
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

from .evaluation import normalize_answer
from .gateway import Gateway, GatewayError
from .kg import KnowledgeGraph, Triple
from .logical import Literal, LogicalPath, LogicalTriple, Placeholder
from .prompts import Templates, default_templates
from .qa import QAPair


class ThoughtError(ValueError):
    """A record that has to be discarded; ``reason`` is a short stable tag."""

    reason = "thought-error"


class OrderingError(ThoughtError):
    reason = "ordering"


class DistillationError(ThoughtError):
    reason = "segment-mismatch"


class MissingKnowledgeError(ThoughtError):
    reason = "missing-knowledge"


class RefinementError(ThoughtError):
    reason = "empty-refinement"


class AnswerMismatchError(ThoughtError):
    reason = "answer-mismatch"


class StrayTokenError(ThoughtError):
    reason = "stray-token"


@dataclass(frozen=True)
class SpecialTokens:
    think_open: str = "<think>"
    think_close: str = "</think>"
    output_open: str = "<output>"
    output_close: str = "</output>"

    def all(self) -> tuple[str, str, str, str]:
        return (self.think_open, self.think_close, self.output_open, self.output_close)

    def slots(self) -> dict[str, str]:
        return {
            "THINK_OPEN": self.think_open,
            "THINK_CLOSE": self.think_close,
            "OUTPUT_OPEN": self.output_open,
            "OUTPUT_CLOSE": self.output_close,
        }


@dataclass(frozen=True)
class SubQuestion:
    step: int
    triple_index: int
    text: str


@dataclass(frozen=True)
class ThoughtIteration:
    n: int
    question: str
    draft: str
    knowledge: str
    refined: str


# ------------------------------------------------------------------ planning


def _ref_text(ref) -> str:
    if isinstance(ref, Placeholder):
        return str(ref)
    return ", ".join(ref.names)


def describe_triple(lt: LogicalTriple) -> str:
    return f"Which entity links {_ref_text(lt.subject)} to {_ref_text(lt.object)} via {lt.relation}?"


def plan_iterations(qa: QAPair) -> list[SubQuestion]:
    """Order the logical triples from the literal anchors toward the target.

    A triple is handled only after every triple hanging off its far end
    (the endpoint further from the target).  Ties go to the earlier triple.
    """
    if not qa.verified:
        raise ValueError(f"{qa.id} has not been verified")
    path = qa.path
    if not any(isinstance(r, Literal) for lt in path.triples for r in (lt.subject, lt.object)):
        raise OrderingError("logical graph has no literal anchor")
    adj: dict[Any, set] = {}
    for lt in path.triples:
        adj.setdefault(lt.subject, set()).add(lt.object)
        adj.setdefault(lt.object, set()).add(lt.subject)
    root = Placeholder(qa.target)
    if root not in adj:
        raise OrderingError(f"target {root} does not occur in the path")
    dist = {root: 0}
    queue = deque([root])
    while queue:
        cur = queue.popleft()
        for nb in adj[cur]:
            if nb not in dist:
                dist[nb] = dist[cur] + 1
                queue.append(nb)
    if len(dist) != len(adj):
        raise OrderingError("logical graph is disconnected from the target")

    far: list[Any] = []
    near: list[Any] = []
    for lt in path.triples:
        ds, do = dist[lt.subject], dist[lt.object]
        if ds == do:
            far.append(None)
            near.append(None)
        elif ds > do:
            far.append(lt.subject)
            near.append(lt.object)
        else:
            far.append(lt.object)
            near.append(lt.subject)

    n = path.hop_count
    deps: list[set[int]] = [set() for _ in range(n)]
    for i, lt in enumerate(path.triples):
        ends = {far[i]} if far[i] is not None else {lt.subject, lt.object}
        for j in range(n):
            if j != i and near[j] is not None and near[j] in ends:
                deps[i].add(j)
    users: list[list[int]] = [[] for _ in range(n)]
    for i, ds in enumerate(deps):
        for j in ds:
            users[j].append(i)
    pending = [len(d) for d in deps]
    ready = [i for i in range(n) if not pending[i]]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for u in users[i]:
            pending[u] -= 1
            if not pending[u]:
                heapq.heappush(ready, u)
    if len(order) != n:
        raise OrderingError("cyclic dependencies between logical triples")

    texts = dict(qa.subquestions)
    return [
        SubQuestion(step, i, texts.get(i) or describe_triple(path.triples[i]))
        for step, i in enumerate(order, 1)
    ]


# -------------------------------------------------------------- distillation

_STEP = re.compile(r"^[ \t]*\[Step[ \t]+(\d+)\][ \t]*", re.MULTILINE)


def split_segments(text: str) -> list[tuple[int, str]]:
    """Split a draft on ``[Step n]`` markers; text before the first marker is kept as step 0."""
    marks = list(_STEP.finditer(text))
    out = []
    if not marks or text[: marks[0].start()].strip():
        out.append((0, text[: marks[0].start()] if marks else text))
    for k, m in enumerate(marks):
        end = marks[k + 1].start() if k + 1 < len(marks) else len(text)
        out.append((int(m.group(1)), text[m.end():end].strip()))
    return out


def distill_initial_thought(
    gateway: Gateway,
    qa: QAPair,
    plan: Sequence[SubQuestion],
    templates: Templates | None = None,
    attempts: int = 1,
) -> list[str]:
    templates = templates or default_templates()
    prompt = templates.render(
        "thinking_distillation",
        QUESTION=qa.question,
        ANSWER="; ".join(qa.answers),
        SUBQUESTIONS="\n".join(f"Sub-question {s.step}: {s.text}" for s in plan),
        N=len(plan),
    )
    want = list(range(1, len(plan) + 1))
    problem = "no attempt made"
    for attempt in range(attempts):
        reply = gateway.chat(gateway.request(prompt, sample_index=attempt or None))
        segments = split_segments(reply)
        numbers = [n for n, _ in segments]
        if numbers != want:
            problem = f"expected steps {want}, got {numbers}"
            continue
        if not all(text for _, text in segments):
            problem = "empty step"
            continue
        return [text for _, text in segments]
    raise DistillationError(f"{qa.id}: {problem}")


# ----------------------------------------------------------------- retrieval


def matching_triples(kg: KnowledgeGraph, path: LogicalPath, lt: LogicalTriple) -> list[Triple]:
    found = [
        Triple(h, lt.relation, t)
        for h in path.members(lt.subject)
        for t in path.members(lt.object)
        if (h, lt.relation, t) in kg
    ]
    return sorted(found, key=kg.position)


def render_knowledge(triples: Sequence[Triple]) -> str:
    return "\n".join(f"{h} | {r} | {t}" for h, r, t in triples)


def retrieve_knowledge(kg: KnowledgeGraph, path: LogicalPath, lt: LogicalTriple) -> str:
    triples = matching_triples(kg, path, lt)
    if not triples:
        raise MissingKnowledgeError(f"no KG triple matches {lt}")
    return render_knowledge(triples)


# ---------------------------------------------------------------- refinement


def _previous_text(previous: Sequence[str]) -> str:
    if not previous:
        return "(none)"
    return "\n\n".join(f"Step {i}: {p}" for i, p in enumerate(previous, 1))


def refine_thought(
    gateway: Gateway,
    qa: QAPair,
    sub: SubQuestion,
    draft: str,
    knowledge: str,
    previous: Sequence[str],
    total: int,
    templates: Templates | None = None,
) -> str:
    templates = templates or default_templates()
    name = "thought_refinement_last" if sub.step == total else "thought_refinement"
    prompt = templates.render(
        name,
        QUESTION=qa.question,
        STEP=sub.step,
        N=total,
        SUBQUESTION=sub.text,
        PREVIOUS=_previous_text(previous),
        DRAFT=draft,
        KNOWLEDGE=knowledge,
        ANSWER="; ".join(qa.answers),
    )
    text = gateway.complete(prompt).strip()
    if not text:
        raise RefinementError(f"{qa.id}: empty refinement at step {sub.step}")
    return text


# ------------------------------------------------------------------- records


def serialize_response(think: str, output: str, tokens: SpecialTokens) -> str:
    return tokens.think_open + think + tokens.think_close + tokens.output_open + output + tokens.output_close


def parse_response(text: str, tokens: SpecialTokens) -> tuple[str, str]:
    """Inverse of :func:`serialize_response`; strict about token count and order."""
    for tok in tokens.all():
        if text.count(tok) != 1:
            raise StrayTokenError(f"token {tok!r} occurs {text.count(tok)} times")
    a, b, c, d = (text.index(t) for t in tokens.all())
    if not (a == 0 and a < b < c < d and text.endswith(tokens.output_close)):
        raise StrayTokenError("special tokens are out of order")
    if c != b + len(tokens.think_close):
        raise StrayTokenError("text between think and output segments")
    return text[len(tokens.think_open):b], text[c + len(tokens.output_open):d]


@dataclass(frozen=True)
class SFTRecord:
    id: str
    question: str
    think: str
    output: str
    answers: tuple[str, ...]
    hops: int
    tokens: SpecialTokens = SpecialTokens()
    provenance: dict[str, Any] = field(default_factory=dict, compare=True, hash=False)

    @property
    def response(self) -> str:
        return serialize_response(self.think, self.output, self.tokens)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "question": self.question,
            "response": self.response,
            "answers": list(self.answers),
            "hops": self.hops,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, row: dict[str, Any], tokens: SpecialTokens = SpecialTokens()) -> "SFTRecord":
        think, output = parse_response(row["response"], tokens)
        return cls(
            id=row["id"],
            question=row["question"],
            think=think,
            output=output,
            answers=tuple(row["answers"]),
            hops=row["hops"],
            tokens=tokens,
            provenance=row.get("provenance", {}),
        )


def contains_answer(text: str, answers: Sequence[str]) -> bool:
    hay = f" {normalize_answer(text)} "
    return any(g and f" {g} " in hay for g in (normalize_answer(a) for a in answers))


def assemble_record(
    gateway: Gateway,
    qa: QAPair,
    iterations: Sequence[ThoughtIteration],
    templates: Templates | None = None,
    tokens: SpecialTokens = SpecialTokens(),
) -> SFTRecord:
    templates = templates or default_templates()
    think = "\n\n".join(it.refined for it in iterations)
    prompt = templates.render(
        "output_generation", QUESTION=qa.question, THINK=think, ANSWER="; ".join(qa.answers)
    )
    output = gateway.complete(prompt).strip()
    for tok in tokens.all():
        if tok in think or tok in output:
            raise StrayTokenError(f"{qa.id}: {tok!r} inside a segment")
    if not contains_answer(output, qa.answers):
        raise AnswerMismatchError(f"{qa.id}: output names no gold answer")
    return SFTRecord(
        id=qa.id,
        question=qa.question,
        think=think,
        output=output,
        answers=qa.answers,
        hops=qa.hops,
        tokens=tokens,
        provenance={
            "path_id": qa.path.id,
            "target": f"#{qa.target}",
            "iterations": len(iterations),
            "entities": sorted(qa.path.entities()),
        },
    )


def build_sft_record(
    gateway: Gateway,
    kg: KnowledgeGraph,
    qa: QAPair,
    templates: Templates | None = None,
    tokens: SpecialTokens = SpecialTokens(),
    distill_attempts: int = 1,
) -> tuple[SFTRecord, list[ThoughtIteration]]:
    """Run the full plan -> distill -> refine -> assemble chain for one pair."""
    plan = plan_iterations(qa)
    knowledge = [retrieve_knowledge(kg, qa.path, qa.path.triples[s.triple_index]) for s in plan]
    drafts = distill_initial_thought(gateway, qa, plan, templates, distill_attempts)
    iterations: list[ThoughtIteration] = []
    for sub, draft, k in zip(plan, drafts, knowledge):
        refined = refine_thought(
            gateway, qa, sub, draft, k, [it.refined for it in iterations], len(plan), templates
        )
        iterations.append(ThoughtIteration(sub.step, sub.text, draft, k, refined))
    return assemble_record(gateway, qa, iterations, templates, tokens), iterations


@dataclass
class SFTOutcome:
    records: list[SFTRecord] = field(default_factory=list)
    discards: list[dict[str, Any]] = field(default_factory=list)


def build_sft_dataset(
    gateway: Gateway,
    kg: KnowledgeGraph,
    pairs: Sequence[QAPair],
    templates: Templates | None = None,
    tokens: SpecialTokens = SpecialTokens(),
    distill_attempts: int = 1,
    concurrency: int = 8,
) -> SFTOutcome:
    """Build records in parallel; failed pairs are discarded with their reason."""

    def run(qa: QAPair):
        try:
            return build_sft_record(gateway, kg, qa, templates, tokens, distill_attempts)[0]
        except ThoughtError as exc:
            return {"id": qa.id, "reason": exc.reason, "detail": str(exc)}
        except GatewayError as exc:
            return {"id": qa.id, "reason": "gateway-error", "detail": str(exc)}

    out = SFTOutcome()
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        for result in pool.map(run, [qa for qa in pairs if qa.verified]):
            if isinstance(result, SFTRecord):
                out.records.append(result)
            else:
                out.discards.append(result)
    return out
