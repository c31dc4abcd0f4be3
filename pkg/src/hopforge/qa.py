"""Signature-balanced path sampling and LLM-driven question generation/verification."""

from __future__ import annotations

import dataclasses
import json
import random
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .gateway import Gateway, GatewayError
from .logical import Literal, LogicalPath, Placeholder
from .prompts import Templates, default_templates


class EmptySampleError(ValueError):
    pass


class IneligibleTargetError(ValueError):
    pass


class AnswerLeakError(ValueError):
    """The rendered prompt would reveal an answer string."""


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingPlan:
    per_signature_quota: int = 50
    hop_range: tuple[int, int] = (2, 6)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.per_signature_quota < 1:
            raise ValueError("per_signature_quota must be >= 1")
        lo, hi = self.hop_range
        if not 2 <= lo <= hi <= 6:
            raise ValueError(f"hop_range {self.hop_range} must lie within [2, 6]")


@dataclass
class SampleResult:
    paths: list[LogicalPath]
    signature_count: int
    coverage: float
    per_signature: dict[str, int]

    def report(self) -> dict[str, Any]:
        return {
            "selected": len(self.paths),
            "signatures": self.signature_count,
            "entity_coverage": self.coverage,
        }


def sample_paths(paths: Iterable[LogicalPath], plan: SamplingPlan) -> SampleResult:
    """Draw up to ``quota`` paths per structural signature, uniformly at random.

    Only paths with an eligible target and a hop count in range compete.
    Coverage is the share of entities of *all* input paths that appear in
    the selection.
    """
    lo, hi = plan.hop_range
    all_entities: set[str] = set()
    groups: dict[str, list[LogicalPath]] = defaultdict(list)
    seen_any = False
    for p in paths:
        seen_any = True
        all_entities |= p.entities()
        if p.eligible_targets and lo <= p.hop_count <= hi:
            groups[str(p.signature())].append(p)
    if not seen_any:
        raise EmptySampleError("no input paths")
    if not groups:
        raise EmptySampleError("no path has an eligible target within the hop range")
    rng = random.Random(plan.rng_seed)
    selected: list[LogicalPath] = []
    per_sig = {}
    for sig in sorted(groups):
        group = groups[sig]
        picks = sorted(rng.sample(range(len(group)), min(plan.per_signature_quota, len(group))))
        selected.extend(group[i] for i in picks)
        per_sig[sig] = len(picks)
    covered = set().union(*(p.entities() for p in selected))
    coverage = len(covered) / len(all_entities) if all_entities else 0.0
    return SampleResult(selected, len(groups), coverage, per_sig)


def choose_target(path: LogicalPath, rng: random.Random) -> int:
    return rng.choice(sorted(path.eligible_targets))


# ------------------------------------------------------------------ prompts


@dataclass(frozen=True)
class QuestionConstraints:
    subject: str = (
        "Ask about the target as the subject of the question, referring to it with a "
        "pronoun or a generic noun, never by name."
    )
    bridge: str = (
        "Describe every other placeholder as a bridge entity through its relations "
        "(for example \"the film that ...\") instead of naming it."
    )
    source: str = (
        "Mention the named entities exactly as given; they are the sources of factual "
        "information that narrow the answer down."
    )
    extra: tuple[str, ...] = ("Use every logical triple exactly once.",)

    def render(self, path: LogicalPath, target: int) -> str:
        bridges = [f"#{c.id}" for c in path.placeholders if c.id != target]
        sources = sorted({n for lt in path.triples for r in (lt.subject, lt.object)
                          if isinstance(r, Literal) for n in r.names})
        lines = [
            f"- Subject of the question: #{target}. {self.subject}",
            f"- Bridge entities: {', '.join(bridges) or 'none'}. {self.bridge}",
            f"- Fact sources: {', '.join(sources) or 'none'}. {self.source}",
        ]
        lines.extend(f"- {x}" for x in self.extra)
        return "\n".join(lines)


def _ref_json(ref) -> Any:
    return str(ref) if isinstance(ref, Placeholder) else list(ref.names)


def format_logical_triples(path: LogicalPath) -> str:
    return "\n".join(
        f"{i}. " + json.dumps([_ref_json(lt.subject), lt.relation, _ref_json(lt.object)], ensure_ascii=False)
        for i, lt in enumerate(path.triples, 1)
    )


def render_question_prompt(
    path: LogicalPath,
    target: int,
    constraints: QuestionConstraints | None = None,
    templates: Templates | None = None,
) -> str:
    if target not in path.eligible_targets:
        raise IneligibleTargetError(f"#{target} is not an eligible target")
    constraints = constraints or QuestionConstraints()
    templates = templates or default_templates()
    prompt = templates.render(
        "question_generation",
        LOGICAL_TRIPLES=format_logical_triples(path),
        TARGET=f"#{target}",
        CONSTRAINTS=constraints.render(path, target),
    )
    for name in path.clusters[target].members:
        if name in prompt:
            raise AnswerLeakError(f"answer {name!r} occurs in the prompt")
    return prompt


# ------------------------------------------------------------------ QA pairs


@dataclass(frozen=True)
class QAPair:
    id: str
    question: str
    answers: tuple[str, ...]
    target: int
    path: LogicalPath
    verified: bool = False
    reason: str | None = None
    subquestions: tuple[tuple[int, str], ...] = ()

    @property
    def hops(self) -> int:
        return self.path.hop_count

    @property
    def signature(self) -> str:
        return str(self.path.signature())

    def to_json(self) -> dict[str, Any]:
        row = {
            "id": self.id,
            "question": self.question,
            "answers": list(self.answers),
            "target": f"#{self.target}",
            "hops": self.hops,
            "signature": self.signature,
            "verified": self.verified,
            "path": self.path.to_json(),
        }
        if self.reason:
            row["reason"] = self.reason
        if self.subquestions:
            row["subquestions"] = [{"triple": i, "question": q} for i, q in self.subquestions]
        return row

    @classmethod
    def from_json(cls, row: dict[str, Any]) -> "QAPair":
        path = LogicalPath.from_json(row["path"])
        target = int(row["target"].lstrip("#"))
        qa = cls(
            id=row["id"],
            question=row["question"],
            answers=tuple(row["answers"]),
            target=target,
            path=path,
            verified=row.get("verified", False),
            reason=row.get("reason"),
            subquestions=tuple((s["triple"], s["question"]) for s in row.get("subquestions", [])),
        )
        if qa.answers != path.clusters[target].members:
            raise ValueError(f"{qa.id}: answers differ from the target cluster members")
        return qa


def generate_question(
    gateway: Gateway,
    path: LogicalPath,
    target: int,
    constraints: QuestionConstraints | None = None,
    templates: Templates | None = None,
    qa_id: str | None = None,
) -> QAPair:
    prompt = render_question_prompt(path, target, constraints, templates)
    text = gateway.complete(prompt, max_tokens=1024).strip()
    if not text:
        raise GenerationError("empty completion for question generation")
    question = text.splitlines()[0].strip()
    return QAPair(
        id=qa_id or f"{path.id or 'path'}#{target}",
        question=question,
        answers=path.clusters[target].members,
        target=target,
        path=path,
    )


_JSON_OBJECT = re.compile(r"\{.*\}", re.DOTALL)


def parse_decomposition(reply: str, n_triples: int) -> tuple[dict[int, str] | None, str | None]:
    """Check a ``{sub-question: triple number}`` reply for a strict 1-to-1 mapping.

    Returns ``(mapping, None)`` on success or ``(None, reason)``.
    """
    m = _JSON_OBJECT.search(reply)
    if not m:
        return None, "unverifiable reply"
    try:
        obj = json.loads(m.group(0))
    except json.JSONDecodeError:
        return None, "unverifiable reply"
    if not isinstance(obj, dict) or not obj:
        return None, "unverifiable reply"
    mapping: dict[int, str] = {}
    for question, value in obj.items():
        if isinstance(value, list):
            if len(value) != 1:
                return None, "sub-question maps to several triples"
            value = value[0]
        if isinstance(value, str) and value.strip().isdigit():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            return None, "unverifiable reply"
        if not 1 <= value <= n_triples:
            return None, "unknown triple"
        if value - 1 in mapping:
            return None, "duplicate triple"
        mapping[value - 1] = str(question)
    if len(mapping) != n_triples:
        return None, "uncovered triple"
    return mapping, None


def verify_question(
    gateway: Gateway,
    qa: QAPair,
    templates: Templates | None = None,
    attempts: int = 1,
) -> QAPair:
    """Ask for a decomposition and accept only a strict triple-by-triple match."""
    if qa.verified:
        raise ValueError(f"{qa.id} is already verified")
    templates = templates or default_templates()
    prompt = templates.render(
        "question_verification",
        QUESTION=qa.question,
        LOGICAL_TRIPLES=format_logical_triples(qa.path),
        N=qa.hops,
    )
    reason = None
    for attempt in range(attempts):
        req = gateway.request(prompt, max_tokens=1024, sample_index=attempt or None)
        mapping, reason = parse_decomposition(gateway.chat(req), qa.hops)
        if mapping is not None:
            return dataclasses.replace(
                qa, verified=True, reason=None, subquestions=tuple(sorted(mapping.items()))
            )
    return dataclasses.replace(qa, verified=False, reason=reason)


@dataclass
class CurationOutcome:
    pairs: list[QAPair] = field(default_factory=list)
    failures: list[dict[str, Any]] = field(default_factory=list)


def curate(
    gateway: Gateway,
    jobs: Sequence[tuple[LogicalPath, int, str]],
    constraints: QuestionConstraints | None = None,
    templates: Templates | None = None,
    attempts: int = 1,
    concurrency: int = 8,
) -> CurationOutcome:
    """Generate then verify a question per ``(path, target, id)`` job, keeping input order."""

    def run(job: tuple[LogicalPath, int, str]) -> QAPair | dict[str, Any]:
        path, target, qa_id = job
        try:
            qa = generate_question(gateway, path, target, constraints, templates, qa_id)
            return verify_question(gateway, qa, templates, attempts)
        except (GenerationError, AnswerLeakError, GatewayError) as exc:
            return {"id": qa_id, "reason": type(exc).__name__, "detail": str(exc)}

    out = CurationOutcome()
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        for result in pool.map(run, jobs):
            if isinstance(result, QAPair):
                out.pairs.append(result)
            else:
                out.failures.append(result)
    return out
