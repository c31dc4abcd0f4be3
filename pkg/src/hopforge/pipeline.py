"""Resumable pipeline stages over a working directory.

Each stage reads the artifacts of earlier stages from the workdir, writes its
own outputs atomically (temp file + rename) and leaves a JSON report under
``reports/``.  Stages never talk to each other in memory, so any stage can be
rerun on its own.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

from filelock import FileLock, Timeout

from .config import PipelineConfig
from .evaluation import emit_stats, evaluate_records, format_stats, split_dataset
from .gateway import Gateway
from .kg import KnowledgeGraph, load_triples, load_types
from .logical import LogicalPath, LogicalPathError, to_logical_path, with_eligibility
from .preference import PreferenceSummary, build_dataset
from .prompts import Templates
from .qa import QAPair, choose_target, curate, sample_paths
from .subgraphs import ExpansionStats, Subgraph, enumerate_subgraphs, select_initial_entities
from .thoughts import SFTRecord, build_sft_dataset

log = logging.getLogger(__name__)

KG_FILE = "kg.jsonl"
TYPES_FILE = "types.json"
SEEDS_FILE = "seeds.json"
SUBGRAPHS_FILE = "subgraphs.jsonl"
PATHS_FILE = "paths.jsonl"
SAMPLED_FILE = "sampled_paths.jsonl"
QA_FILE = "qa.jsonl"
SFT_FILE = "sft.jsonl"
DPO_FILE = "dpo.jsonl"
SPLIT_DIR = "split"
SPLITS = ("train", "dev", "test")


class PipelineError(RuntimeError):
    pass


class DependencyError(PipelineError):
    """A stage input is missing; ``missing`` names the absent file."""

    def __init__(self, stage: str, missing: Path, producer: str | None = None) -> None:
        hint = f" (run '{producer}' first)" if producer else ""
        super().__init__(f"{stage}: required input {missing} does not exist{hint}")
        self.missing = missing


class WorkdirLockedError(PipelineError):
    pass


# ------------------------------------------------------------------- file io


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_json(path: Path, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def write_jsonl(path: Path, rows: Iterable[Any]) -> int:
    lines = [json.dumps(r, ensure_ascii=False) for r in rows]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


def read_jsonl(path: Path) -> Iterator[dict]:
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------------- context


@dataclass
class StageContext:
    cfg: PipelineConfig
    stage: str
    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)
    counts: dict[str, Any] = field(default_factory=dict)

    @property
    def workdir(self) -> Path:
        return self.cfg.workdir_path

    def need(self, name: str, producer: str | None = None) -> Path:
        path = self.workdir / name
        if not path.exists():
            raise DependencyError(self.stage, path, producer)
        self.inputs.append(path)
        return path

    def need_external(self, path: Path | None, what: str) -> Path:
        if path is None or not path.exists():
            raise DependencyError(self.stage, Path(str(path)) if path else Path(what))
        self.inputs.append(path)
        return path

    def out(self, name: str) -> Path:
        path = self.workdir / name
        self.outputs.append(path)
        return path

    def templates(self) -> Templates:
        return Templates.load(self.cfg.resolve(self.cfg.template_dir))

    def gateway(self, which: str = "gateway") -> Gateway:
        gcfg = getattr(self.cfg, which) or self.cfg.gateway
        return Gateway.from_config(gcfg, self.cfg.base_dir)

    def kg(self) -> KnowledgeGraph:
        path = self.need(KG_FILE, "ingest")
        types_path = self.workdir / TYPES_FILE
        types = None
        if types_path.exists():
            self.inputs.append(types_path)
            types = {e: set(ts) for e, ts in json.loads(types_path.read_text(encoding="utf-8")).items()}
        return load_triples(path, format="jsonl", types=types)


@contextmanager
def workdir_lock(workdir: Path) -> Iterator[None]:
    workdir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(workdir / ".lock"), timeout=0)
    try:
        lock.acquire()
    except Timeout:
        raise WorkdirLockedError(f"{workdir} is in use by another pipeline run") from None
    try:
        yield
    finally:
        lock.release()


# -------------------------------------------------------------------- stages


def stage_ingest(ctx: StageContext) -> None:
    cfg = ctx.cfg
    src = ctx.need_external(cfg.resolve(cfg.kg), "kg")
    types = None
    if cfg.type_file:
        types = load_types(ctx.need_external(cfg.resolve(cfg.type_file), "type_file"))
    kg = load_triples(src, format=cfg.kg_format, types=types)
    n = write_jsonl(ctx.out(KG_FILE), (list(t) for t in kg.triples))
    if types is not None:
        write_json(ctx.out(TYPES_FILE), {e: sorted(ts) for e, ts in sorted(types.items())})
    stats = {**kg.stats(), "self_loops": len(kg.self_loops)}
    write_json(ctx.out("kg_stats.json"), stats)
    ctx.counts.update(stats, written=n)


def stage_seed_entities(ctx: StageContext) -> None:
    kg = ctx.kg()
    seeds = select_initial_entities(kg, ctx.cfg.seed_criteria())
    write_json(ctx.out(SEEDS_FILE), seeds)
    ctx.counts["seeds"] = len(seeds)


def stage_expand(ctx: StageContext) -> None:
    kg = ctx.kg()
    seeds = json.loads(ctx.need(SEEDS_FILE, "seed-entities").read_text(encoding="utf-8"))
    stats = ExpansionStats()
    e = ctx.cfg.expand
    subgraphs = enumerate_subgraphs(kg, seeds, e.max_j, e.cap, stats, e.workers)
    n = write_jsonl(ctx.out(SUBGRAPHS_FILE), (s.to_json() for s in subgraphs))
    ctx.counts.update(subgraphs=n, **stats.to_json())


def stage_logicalize(ctx: StageContext) -> None:
    kg = ctx.kg()
    lo, hi = ctx.cfg.sampling.hop_range
    skipped: dict[str, int] = {}
    eligible = 0

    def paths() -> Iterator[dict]:
        nonlocal eligible
        for i, row in enumerate(read_jsonl(ctx.need(SUBGRAPHS_FILE, "expand"))):
            s = Subgraph.from_json(row)
            try:
                path = to_logical_path(s)
            except LogicalPathError as exc:
                key = type(exc).__name__
                skipped[key] = skipped.get(key, 0) + 1
                continue
            # identifiability checks are the expensive part; paths outside the
            # sampling hop range can never be drawn, so they are not checked
            if lo <= path.hop_count <= hi:
                path = with_eligibility(kg, path)
            eligible += bool(path.eligible_targets)
            yield {"id": f"p{i:07d}", **path.to_json()}

    n = write_jsonl(ctx.out(PATHS_FILE), paths())
    ctx.counts.update(paths=n, with_eligible_target=eligible, skipped=skipped)


def stage_sample(ctx: StageContext) -> None:
    paths = [LogicalPath.from_json(r) for r in read_jsonl(ctx.need(PATHS_FILE, "logicalize"))]
    result = sample_paths(paths, ctx.cfg.sampling_plan())
    write_jsonl(ctx.out(SAMPLED_FILE), (p.to_json() for p in result.paths))
    ctx.counts.update(result.report(), per_signature=result.per_signature)


def stage_gen_questions(ctx: StageContext) -> None:
    paths = [LogicalPath.from_json(r) for r in read_jsonl(ctx.need(SAMPLED_FILE, "sample"))]
    jobs = []
    for p in paths:
        # one target per path, drawn from a per-path stream so reruns and
        # partial inputs agree on the choice
        target = choose_target(p, random.Random(f"{ctx.cfg.rng_seed}:{p.id}"))
        jobs.append((p, target, f"{p.id}#{target}"))
    outcome = curate(
        ctx.gateway(), jobs, templates=ctx.templates(),
        attempts=ctx.cfg.qa.verify_attempts, concurrency=ctx.cfg.qa.concurrency,
    )
    write_jsonl(ctx.out(QA_FILE), (qa.to_json() for qa in outcome.pairs))
    write_jsonl(ctx.out("qa_failures.jsonl"), outcome.failures)
    verified = sum(qa.verified for qa in outcome.pairs)
    ctx.counts.update(
        generated=len(outcome.pairs), verified=verified,
        rejected=len(outcome.pairs) - verified, failed=len(outcome.failures),
        pass_rate=verified / len(jobs) if jobs else 0.0,
    )


def stage_build_sft(ctx: StageContext) -> None:
    kg = ctx.kg()
    pairs = [QAPair.from_json(r) for r in read_jsonl(ctx.need(QA_FILE, "gen-questions"))]
    outcome = build_sft_dataset(
        ctx.gateway(), kg, pairs, ctx.templates(), ctx.cfg.special_tokens(),
        ctx.cfg.sft.distill_attempts, ctx.cfg.sft.concurrency,
    )
    write_jsonl(ctx.out(SFT_FILE), (r.to_json() for r in outcome.records))
    write_jsonl(ctx.out("sft_discards.jsonl"), outcome.discards)
    reasons: dict[str, int] = {}
    for d in outcome.discards:
        reasons[d["reason"]] = reasons.get(d["reason"], 0) + 1
    stats = {
        "verified_pairs": sum(qa.verified for qa in pairs),
        "records": len(outcome.records),
        "discarded": len(outcome.discards),
        "discard_reasons": dict(sorted(reasons.items())),
    }
    write_json(ctx.out("sft_stats.json"), stats)
    ctx.counts.update(stats)


def _sft_records(ctx: StageContext, name: str = SFT_FILE) -> list[SFTRecord]:
    tokens = ctx.cfg.special_tokens()
    return [SFTRecord.from_json(r, tokens) for r in read_jsonl(ctx.need(name, "build-sft"))]


def stage_build_dpo(ctx: StageContext) -> None:
    records = _sft_records(ctx)
    summary = PreferenceSummary()
    pairs = build_dataset(
        records, ctx.gateway("policy_gateway"), ctx.gateway("cot_gateway"),
        ctx.cfg.dpo.k, ctx.templates(), ctx.cfg.special_tokens(), summary, ctx.cfg.dpo.concurrency,
    )
    write_jsonl(ctx.out(DPO_FILE), (p.to_json() for p in pairs))
    write_jsonl(ctx.out("dpo_discards.jsonl"), summary.discarded)
    ctx.counts.update(summary.to_json())


def stage_split(ctx: StageContext) -> None:
    rows = list(read_jsonl(ctx.need(SFT_FILE, "build-sft")))
    result = split_dataset(rows, ctx.cfg.split_spec(), lambda r: r["provenance"].get("entities", []))
    for name, part in result.parts().items():
        write_jsonl(ctx.out(f"{SPLIT_DIR}/{name}.jsonl"), part)
        ctx.counts[name] = len(part)
    ctx.counts.update(components=result.components, infeasible=result.infeasible)


def stage_eval(ctx: StageContext) -> None:
    cfg = ctx.cfg
    gold = ctx.need(f"{SPLIT_DIR}/{cfg.eval.gold_split}.jsonl", "split")
    preds = ctx.need_external(cfg.resolve(cfg.eval.predictions), "eval.predictions")
    result = evaluate_records(read_jsonl(preds), read_jsonl(gold))
    write_json(ctx.out("eval_report.json"), result.to_json())
    ctx.counts.update(result.to_json()["aggregates"])


def stage_stats(ctx: StageContext) -> None:
    rows = [emit_stats(read_jsonl(ctx.need(SFT_FILE, "build-sft")), "all")]
    for name in SPLITS:
        path = ctx.workdir / SPLIT_DIR / f"{name}.jsonl"
        if path.exists():
            ctx.inputs.append(path)
            rows.append(emit_stats(read_jsonl(path), name))
    write_json(ctx.out("stats.json"), [r.to_json() for r in rows])
    atomic_write_text(ctx.out("stats.txt"), format_stats(rows))
    ctx.counts.update({r.name: r.total for r in rows})


STAGES: dict[str, Callable[[StageContext], None]] = {
    "ingest": stage_ingest,
    "seed-entities": stage_seed_entities,
    "expand": stage_expand,
    "logicalize": stage_logicalize,
    "sample": stage_sample,
    "gen-questions": stage_gen_questions,
    "build-sft": stage_build_sft,
    "build-dpo": stage_build_dpo,
    "split": stage_split,
    "eval": stage_eval,
    "stats": stage_stats,
}


def run_stage(cfg: PipelineConfig, stage: str) -> dict[str, Any]:
    """Run one stage under the workdir lock and return its report."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    workdir = cfg.workdir_path
    with workdir_lock(workdir):
        ctx = StageContext(cfg, stage)
        start = time.perf_counter()
        log.info("stage %s: start", stage)
        STAGES[stage](ctx)
        report = {
            "stage": stage,
            "inputs": [str(p) for p in dict.fromkeys(ctx.inputs)],
            "outputs": {str(p): _file_digest(p) for p in ctx.outputs},
            "counts": ctx.counts,
            "duration_s": round(time.perf_counter() - start, 3),
            "seed": cfg.rng_seed,
            "config_digest": cfg.digest(),
        }
        write_json(workdir / "effective_config.json", cfg.effective())
        write_json(workdir / "reports" / f"{stage}.json", report)
        log.info("stage %s: done in %.3fs", stage, report["duration_s"])
        return report


def run_all(cfg: PipelineConfig) -> list[dict[str, Any]]:
    """Every stage in order; ``eval`` only when a predictions file is configured."""
    reports = []
    for stage in STAGES:
        if stage == "eval" and cfg.eval.predictions is None:
            continue
        reports.append(run_stage(cfg, stage))
    return reports
