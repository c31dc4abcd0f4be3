"""Preference pairs from SFT records and sampled model answers.

For each SFT record the policy model is sampled ``k`` times.  If any sample
answers correctly, the first correct one is preferred over the SFT response;
otherwise the SFT response is preferred over a plain chain-of-thought answer
from a second model.
"""

from __future__ import annotations

import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Sequence

from .evaluation import is_correct
from .gateway import Gateway, GatewayError
from .prompts import Templates, default_templates
from .thoughts import SFTRecord, SpecialTokens

MODEL_CORRECT = "model-correct"
MODEL_INCORRECT = "model-incorrect"

# (branch, chosen source, rejected source): the only two legal shapes
PROTOCOL = {
    MODEL_CORRECT: ("model", "sft"),
    MODEL_INCORRECT: ("sft", "cot"),
}


class SamplingError(RuntimeError):
    pass


class DegeneratePairError(ValueError):
    pass


_FINAL = re.compile(r"^\s*(?:final answer|answer)\s*[:：]\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)


def extract_answer(text: str, tokens: SpecialTokens = SpecialTokens()) -> str:
    """Pull the answer out of a response.

    Uses the output segment when the special tokens are present, else the
    whole text; inside it, the last ``Final answer:``/``Answer:`` line wins,
    falling back to the last non-empty line.
    """
    segment = text
    start = text.rfind(tokens.output_open)
    if start != -1:
        end = text.find(tokens.output_close, start)
        segment = text[start + len(tokens.output_open): end if end != -1 else len(text)]
    finals = _FINAL.findall(segment)
    if finals:
        return finals[-1].strip()
    lines = [ln.strip() for ln in segment.splitlines() if ln.strip()]
    return lines[-1] if lines else ""


@dataclass(frozen=True)
class ModelResponse:
    text: str
    extracted_answer: str
    correct: bool
    index: int = 0

    @classmethod
    def judge(cls, text: str, answers: Sequence[str], index: int = 0,
              tokens: SpecialTokens = SpecialTokens()) -> "ModelResponse":
        extracted = extract_answer(text, tokens)
        return cls(text, extracted, is_correct(extracted, answers), index)


@dataclass(frozen=True)
class DPORecord:
    prompt: str
    chosen: str
    rejected: str
    branch: str
    provenance: dict[str, Any] = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        if self.branch not in PROTOCOL:
            raise ValueError(f"unknown branch {self.branch!r}")

    def to_json(self) -> dict[str, Any]:
        return {
            "prompt": self.prompt,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "branch": self.branch,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, row: dict[str, Any]) -> "DPORecord":
        return cls(row["prompt"], row["chosen"], row["rejected"], row["branch"], row.get("provenance", {}))


def sample_candidates(
    gateway: Gateway,
    question: str,
    answers: Sequence[str],
    k: int = 4,
    templates: Templates | None = None,
    tokens: SpecialTokens = SpecialTokens(),
    **params: Any,
) -> list[ModelResponse]:
    """Draw ``k`` answers from the policy model; individual failures are dropped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    templates = templates or default_templates()
    prompt = templates.render("answer_sampling", QUESTION=question, **tokens.slots())
    out = []
    errors = []
    for i in range(k):
        try:
            text = gateway.chat(gateway.request(prompt, sample_index=i, **params))
        except GatewayError as exc:
            errors.append(str(exc))
            continue
        out.append(ModelResponse.judge(text, answers, i, tokens))
    if not out:
        raise SamplingError(f"all {k} sampling requests failed: {errors[-1] if errors else ''}")
    return out


def build_pair(
    record: SFTRecord,
    candidates: Sequence[ModelResponse],
    cot_fallback: str | None,
) -> DPORecord:
    """Apply the two-branch protocol to one SFT record."""
    sft_response = record.response
    correct = [c for c in sorted(candidates, key=lambda c: c.index) if c.correct]
    if correct:
        best = correct[0]
        chosen, rejected, branch = best.text, sft_response, MODEL_CORRECT
        source = {"candidate": best.index}
    else:
        if not cot_fallback:
            raise ValueError("cot_fallback is required when no candidate is correct")
        chosen, rejected, branch = sft_response, cot_fallback, MODEL_INCORRECT
        source = {"candidate": None}
    if chosen == rejected:
        raise DegeneratePairError(f"{record.id}: chosen and rejected are identical")
    chosen_src, rejected_src = PROTOCOL[branch]
    return DPORecord(
        prompt=record.question,
        chosen=chosen,
        rejected=rejected,
        branch=branch,
        provenance={
            "sft_id": record.id,
            "chosen_source": chosen_src,
            "rejected_source": rejected_src,
            "candidates": len(candidates),
            "correct_candidates": len(correct),
            **source,
        },
    )


def cot_answer(gateway: Gateway, question: str, templates: Templates | None = None) -> str:
    templates = templates or default_templates()
    return gateway.complete(templates.render("cot_answer", QUESTION=question)).strip()


@dataclass
class PreferenceSummary:
    branches: Counter = field(default_factory=Counter)
    discarded: list[dict[str, Any]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            MODEL_CORRECT: self.branches[MODEL_CORRECT],
            MODEL_INCORRECT: self.branches[MODEL_INCORRECT],
            "discarded": len(self.discarded),
        }


def build_dataset(
    records: Iterable[SFTRecord],
    gateway: Gateway,
    cot_gateway: Gateway,
    k: int = 4,
    templates: Templates | None = None,
    tokens: SpecialTokens = SpecialTokens(),
    summary: PreferenceSummary | None = None,
    concurrency: int = 8,
) -> Iterator[DPORecord]:
    """Yield one pair per SFT record in input order, skipping failed ones."""
    summary = summary if summary is not None else PreferenceSummary()

    def run(rec: SFTRecord) -> DPORecord | dict[str, Any]:
        try:
            cands = sample_candidates(gateway, rec.question, rec.answers, k, templates, tokens)
            fallback = None
            if not any(c.correct for c in cands):
                fallback = cot_answer(cot_gateway, rec.question, templates)
            return build_pair(rec, cands, fallback)
        except (SamplingError, DegeneratePairError, GatewayError, ValueError) as exc:
            return {"sft_id": rec.id, "reason": type(exc).__name__, "detail": str(exc)}

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        for result in pool.map(run, list(records)):
            if isinstance(result, DPORecord):
                summary.branches[result.branch] += 1
                yield result
            else:
                summary.discarded.append(result)
