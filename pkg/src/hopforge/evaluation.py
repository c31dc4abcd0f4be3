"""Answer normalization, EM/F1 scoring, entity-disjoint splits and hop stats."""

from __future__ import annotations

import json
import logging
import random
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

logger = logging.getLogger(__name__)

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)
HOPS = (2, 3, 4, 5, 6)


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and English articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


@dataclass(frozen=True)
class Score:
    em: float
    f1: float
    precision: float
    recall: float


def _token_prf(pred: str, gold: str) -> tuple[float, float, float]:
    p_toks, g_toks = pred.split(), gold.split()
    common = Counter(p_toks) & Counter(g_toks)
    same = sum(common.values())
    if same == 0:
        return 0.0, 0.0, 0.0
    precision = same / len(p_toks)
    recall = same / len(g_toks)
    return precision, recall, 2 * precision * recall / (precision + recall)


def score(pred: str, golds: Sequence[str]) -> Score:
    """Exact match against any gold; token precision, recall and F1 each maxed over golds.

    Each metric is maximised separately so that adding an alias can never
    lower any of them.  With several golds the reported F1 is therefore not
    always the harmonic mean of the reported precision and recall.
    """
    if not golds:
        raise ValueError("at least one gold answer is required")
    norm_pred = normalize_answer(pred)
    prf = []
    em = 0.0
    for g in golds:
        g = normalize_answer(g)
        if norm_pred == g:
            em = 1.0
            prf.append((1.0, 1.0, 1.0))
        else:
            prf.append(_token_prf(norm_pred, g))
    p, r, f1 = (max(col) for col in zip(*prf))
    return Score(em=em, f1=f1, precision=p, recall=r)


def is_correct(pred: str, golds: Sequence[str]) -> bool:
    return score(pred, golds).em == 1.0


# ------------------------------------------------------------------ evaluate


class DuplicateIdError(ValueError):
    pass


@dataclass
class EvalResult:
    em: float
    f1: float
    precision: float
    recall: float
    rows: list[dict[str, Any]]
    missing: int = 0
    unmatched: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "aggregates": {
                "em": self.em,
                "f1": self.f1,
                "precision": self.precision,
                "recall": self.recall,
                "count": len(self.rows),
                "missing_predictions": self.missing,
                "unmatched_predictions": self.unmatched,
            },
            "per_question": self.rows,
        }


def _read_jsonl(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _by_id(rows: Iterable[dict], what: str) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for row in rows:
        key = str(row["id"])
        if key in out:
            raise DuplicateIdError(f"duplicate id {key!r} in {what}")
        out[key] = row
    return out


def evaluate_records(predictions: Iterable[dict], golds: Iterable[dict]) -> EvalResult:
    preds = _by_id(predictions, "predictions")
    gold = _by_id(golds, "gold")
    rows = []
    missing = 0
    for key, g in gold.items():
        if key in preds:
            pred = str(preds[key]["prediction"])
            s = score(pred, g["answers"])
        else:
            pred = None
            missing += 1
            s = Score(0.0, 0.0, 0.0, 0.0)
        rows.append(
            {"id": key, "prediction": pred, "answers": list(g["answers"]),
             "em": s.em, "f1": s.f1, "precision": s.precision, "recall": s.recall}
        )
    n = len(rows)

    def mean(k: str) -> float:
        return sum(r[k] for r in rows) / n if n else 0.0

    return EvalResult(
        em=mean("em"), f1=mean("f1"), precision=mean("precision"), recall=mean("recall"),
        rows=rows, missing=missing, unmatched=len(set(preds) - set(gold)),
    )


def evaluate(pred_file: str | Path, gold_file: str | Path) -> EvalResult:
    """Score a predictions JSONL ``{id, prediction}`` against gold ``{id, answers}``."""
    return evaluate_records(_read_jsonl(pred_file), _read_jsonl(gold_file))


# --------------------------------------------------------------------- split


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.9, 0.05, 0.05)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError("ratios must be three non-negative numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")


@dataclass
class SplitResult:
    train: list
    dev: list
    test: list
    infeasible: bool = False
    components: int = 0

    def parts(self) -> dict[str, list]:
        return {"train": self.train, "dev": self.dev, "test": self.test}


def _components(entity_sets: Sequence[set[str]]) -> list[list[int]]:
    parent = list(range(len(entity_sets)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    owner: dict[str, int] = {}
    for i, ents in enumerate(entity_sets):
        for e in ents:
            if e in owner:
                a, b = find(i), find(owner[e])
                if a != b:
                    parent[max(a, b)] = min(a, b)
            else:
                owner[e] = i
    groups: dict[int, list[int]] = {}
    for i in range(len(entity_sets)):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def split_dataset(
    records: Sequence[Any],
    spec: SplitSpec,
    entities_of: Callable[[Any], Iterable[str]],
) -> SplitResult:
    """Assign whole entity-connected components to train/dev/test.

    Records sharing any entity always land in the same split.  Components are
    placed largest first (seeded shuffle breaks ties) into whichever split is
    furthest below its target size.
    """
    sets = [set(entities_of(r)) for r in records]
    comps = _components(sets)
    rng = random.Random(spec.rng_seed)
    rng.shuffle(comps)
    comps.sort(key=len, reverse=True)
    total = len(records)
    targets = [r * total for r in spec.ratios]
    sizes = [0, 0, 0]
    assigned: list[list[int]] = [[], [], []]
    infeasible = bool(comps) and len(comps[0]) > max(targets) * 1.1
    if infeasible:
        logger.warning(
            "largest entity component has %d of %d records; split ratios cannot be met",
            len(comps[0]), total,
        )
    for comp in comps:
        k = max(range(3), key=lambda i: (targets[i] - sizes[i], -i))
        assigned[k].extend(comp)
        sizes[k] += len(comp)
    parts = [[records[i] for i in sorted(idx)] for idx in assigned]
    return SplitResult(*parts, infeasible=infeasible, components=len(comps))


# --------------------------------------------------------------------- stats


@dataclass
class StatsRow:
    name: str
    total: int = 0
    per_hop: dict[int, int] = field(default_factory=lambda: {h: 0 for h in HOPS})
    other: int = 0

    def as_tuple(self) -> tuple[int, ...]:
        return (self.total, *(self.per_hop[h] for h in HOPS))

    def to_json(self) -> dict[str, Any]:
        row = {"split": self.name, "total": self.total}
        row.update({f"hop_{h}": self.per_hop[h] for h in HOPS})
        if self.other:
            row["other"] = self.other
        return row


def emit_stats(records: Iterable[Any], name: str = "all", hops_of: Callable[[Any], int] | None = None) -> StatsRow:
    """Total and per-hop (2-6) counts; hops outside that range go to ``other``."""
    hops_of = hops_of or (lambda r: r["hops"] if isinstance(r, dict) else r.hops)
    row = StatsRow(name)
    for r in records:
        h = hops_of(r)
        row.total += 1
        if h in row.per_hop:
            row.per_hop[h] += 1
        else:
            row.other += 1
    return row


def format_stats(rows: Sequence[StatsRow]) -> str:
    show_other = any(r.other for r in rows)
    header = ["split", "total", *(f"{h}-hop" for h in HOPS)] + (["other"] if show_other else [])
    body = [
        [r.name, str(r.total), *(str(r.per_hop[h]) for h in HOPS)] + ([str(r.other)] if show_other else [])
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(line, widths)))
             for line in [header, *body]]
    return "\n".join(lines) + "\n"
