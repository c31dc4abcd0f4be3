"""Pipeline configuration: JSON file validated into typed, fully defaulted settings."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator

from .evaluation import SplitSpec
from .gateway import GatewayConfig
from .qa import SamplingPlan
from .subgraphs import SeedCriteria
from .thoughts import SpecialTokens


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SeedSettings(_Strict):
    min_type_prefixes: int = Field(2, ge=1)
    min_relation_types: int = Field(3, ge=1)
    sample_size: int = Field(1000, ge=1)


class ExpandSettings(_Strict):
    max_j: Literal[2, 3] = 3
    cap: Optional[int] = Field(64, ge=1)
    workers: int = Field(1, ge=1)


class SamplingSettings(_Strict):
    per_signature_quota: int = Field(50, ge=1)
    hop_range: tuple[int, int] = (2, 6)

    @field_validator("hop_range")
    @classmethod
    def _within(cls, v: tuple[int, int]) -> tuple[int, int]:
        if not 2 <= v[0] <= v[1] <= 6:
            raise ValueError("hop_range must lie within [2, 6]")
        return v


class QASettings(_Strict):
    verify_attempts: int = Field(1, ge=1)
    concurrency: int = Field(8, ge=1)


class SFTSettings(_Strict):
    distill_attempts: int = Field(1, ge=1)
    concurrency: int = Field(8, ge=1)


class TokenSettings(_Strict):
    think_open: str = "<think>"
    think_close: str = "</think>"
    output_open: str = "<output>"
    output_close: str = "</output>"

    @field_validator("think_open", "think_close", "output_open", "output_close")
    @classmethod
    def _non_empty(cls, v: str) -> str:
        if not v:
            raise ValueError("token literals must be non-empty")
        return v


class DPOSettings(_Strict):
    k: int = Field(4, ge=1)
    concurrency: int = Field(8, ge=1)


class SplitSettings(_Strict):
    ratios: tuple[float, float, float] = (0.9, 0.05, 0.05)

    @field_validator("ratios")
    @classmethod
    def _sum(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(r < 0 for r in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("ratios must be non-negative and sum to 1")
        return v


class EvalSettings(_Strict):
    predictions: Optional[str] = None
    gold_split: Literal["train", "dev", "test"] = "test"


class PipelineConfig(_Strict):
    kg: str
    kg_format: Literal["tsv", "jsonl"] = "tsv"
    type_file: Optional[str] = None
    workdir: str = "work"
    template_dir: Optional[str] = None
    rng_seed: int = Field(0, ge=0, lt=2**64)
    seeds: SeedSettings = SeedSettings()
    expand: ExpandSettings = ExpandSettings()
    sampling: SamplingSettings = SamplingSettings()
    qa: QASettings = QASettings()
    sft: SFTSettings = SFTSettings()
    tokens: TokenSettings = TokenSettings()
    dpo: DPOSettings = DPOSettings()
    split: SplitSettings = SplitSettings()
    eval: EvalSettings = EvalSettings()
    gateway: GatewayConfig = GatewayConfig()
    policy_gateway: Optional[GatewayConfig] = None
    cot_gateway: Optional[GatewayConfig] = None

    _base_dir: Path = PrivateAttr(default_factory=Path.cwd)

    # ---------------------------------------------------------- derived views

    @property
    def base_dir(self) -> Path:
        return self._base_dir

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else self._base_dir / path

    @property
    def workdir_path(self) -> Path:
        return self.resolve(self.workdir)  # type: ignore[return-value]

    def seed_criteria(self) -> SeedCriteria:
        return SeedCriteria(**self.seeds.model_dump(), rng_seed=self.rng_seed)

    def sampling_plan(self) -> SamplingPlan:
        return SamplingPlan(self.sampling.per_signature_quota, tuple(self.sampling.hop_range), self.rng_seed)

    def special_tokens(self) -> SpecialTokens:
        return SpecialTokens(**self.tokens.model_dump())

    def split_spec(self) -> SplitSpec:
        return SplitSpec(tuple(self.split.ratios), self.rng_seed)

    def effective(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        blob = json.dumps(self.effective(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(data: dict, base_dir: str | Path | None = None) -> PipelineConfig:
    try:
        cfg = PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    if base_dir is not None:
        cfg._base_dir = Path(base_dir)
    return cfg


def validate_config(path: str | Path) -> PipelineConfig:
    """Load and validate a JSON config; relative paths resolve against its directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(data, path.resolve().parent)


def config_schema() -> dict:
    return PipelineConfig.model_json_schema()
