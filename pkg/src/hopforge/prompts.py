"""Prompt templates with ``{{SLOT}}`` placeholders.

Defaults ship inside the package; a template directory given at load time
overrides any file of the same name.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

TEMPLATE_NAMES = (
    "question_generation",
    "question_verification",
    "thinking_distillation",
    "thought_refinement",
    "thought_refinement_last",
    "output_generation",
    "answer_sampling",
    "cot_answer",
)

_SLOT = re.compile(r"\{\{([A-Z_]+)\}\}")


class TemplateError(KeyError):
    pass


class Templates:
    def __init__(self, texts: dict[str, str]) -> None:
        missing = [n for n in TEMPLATE_NAMES if n not in texts]
        if missing:
            raise TemplateError(f"missing templates: {', '.join(missing)}")
        self.texts = dict(texts)

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "Templates":
        texts = {}
        pkg = resources.files("hopforge") / "templates"
        for name in TEMPLATE_NAMES:
            override = Path(directory) / f"{name}.txt" if directory else None
            if override is not None and override.exists():
                texts[name] = override.read_text(encoding="utf-8")
            else:
                texts[name] = (pkg / f"{name}.txt").read_text(encoding="utf-8")
        return cls(texts)

    def slots(self, name: str) -> set[str]:
        return set(_SLOT.findall(self.texts[name]))

    def render(self, name: str, **values: object) -> str:
        text = self.texts[name]

        def sub(m: re.Match) -> str:
            key = m.group(1)
            if key not in values:
                raise TemplateError(f"template {name!r} needs slot {key}")
            return str(values[key])

        return _SLOT.sub(sub, text)


_default: Templates | None = None


def default_templates() -> Templates:
    global _default
    if _default is None:
        _default = Templates.load()
    return _default
