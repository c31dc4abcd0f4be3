"""Deterministic offline responder for the packaged prompt templates.

It produces replies that satisfy each template's reply contract (numbered
steps, JSON decompositions, a final-answer line) from the prompt text alone.
It is meant for demos and for recording stub fixtures, not for real data:
policy-model samples never know the answer, so rejection sampling always
falls through to the chain-of-thought branch.
"""

from __future__ import annotations

import json
import re

from .gateway import ChatRequest

_TASK = re.compile(r"^### task: ([\w-]+)", re.MULTILINE)
_NUMBERED = re.compile(r"^(\d+)\. (\[.*\])$", re.MULTILINE)


def _section(prompt: str, header: str) -> str:
    """Text after ``header`` up to the next blank line."""
    start = prompt.find(header)
    if start == -1:
        return ""
    rest = prompt[start + len(header):].lstrip("\n")
    end = rest.find("\n\n")
    return (rest[:end] if end != -1 else rest).strip()


def _line_value(prompt: str, label: str) -> str:
    m = re.search(rf"^{re.escape(label)}\s*(.*)$", prompt, re.MULTILINE)
    return m.group(1).strip() if m else ""


def _describe(ref) -> str:
    if isinstance(ref, list):
        return ref[0] if len(ref) == 1 else " and ".join(ref)
    return "a certain entity"


class SyntheticResponder:
    def __call__(self, req: ChatRequest) -> str:
        prompt = req.messages[-1][1]
        m = _TASK.search(prompt)
        task = m.group(1) if m else ""
        handler = getattr(self, "_" + task.replace("-", "_"), None)
        if handler is None:
            return "I cannot help with that."
        return handler(prompt, req)

    def _triples(self, prompt: str) -> list[list]:
        return [json.loads(row) for _, row in _NUMBERED.findall(prompt)]

    def _question_generation(self, prompt: str, req: ChatRequest) -> str:
        target = _line_value(prompt, "Question target:")
        clauses = []
        for s, r, o in self._triples(prompt):
            rel = r.strip("/").split("/")[-1].replace("_", " ")
            if s == target:
                clauses.append(f"it has {rel} {_describe(o)}")
            elif o == target:
                clauses.append(f"{_describe(s)} has {rel} it")
            else:
                clauses.append(f"{_describe(s)} has {rel} {_describe(o)}")
        return "Which entity fits all of the following: " + "; ".join(clauses) + "?"

    def _question_verification(self, prompt: str, req: ChatRequest) -> str:
        n = len(self._triples(prompt))
        return json.dumps({f"Sub-question {i}: which entity satisfies triple {i}?": i for i in range(1, n + 1)})

    def _thinking_distillation(self, prompt: str, req: ChatRequest) -> str:
        subs = re.findall(r"^Sub-question (\d+): (.*)$", prompt, re.MULTILINE)
        return "\n".join(f"[Step {n}] To answer '{q}', I recall what I know and reason it through." for n, q in subs)

    def _thought_refinement(self, prompt: str, req: ChatRequest) -> str:
        step = _line_value(prompt, "Step")
        draft = _section(prompt, "Draft of this step:")
        knowledge = _section(prompt, "Retrieved knowledge:")
        facts = "; ".join(line for line in knowledge.splitlines() if line.strip())
        return f"Step {step.split()[0] if step else '?'}: {draft} Checking the graph: {facts}."

    _thought_refinement_final = _thought_refinement

    def _output_generation(self, prompt: str, req: ChatRequest) -> str:
        answer = _line_value(prompt, "Final answer to reach:")
        return f"The steps above chain the sub-questions together and lead to one entity.\nFinal answer: {answer}"

    def _answer_sampling(self, prompt: str, req: ChatRequest) -> str:
        idx = req.sample_index or 0
        return f"<think>Attempt {idx}: I am not sure which entity this is.</think><output>I could not work it out.\nFinal answer: unknown</output>"

    def _cot_answer(self, prompt: str, req: ChatRequest) -> str:
        return "Let's think step by step. The clues do not point to anything I know for sure.\nFinal answer: unknown"
