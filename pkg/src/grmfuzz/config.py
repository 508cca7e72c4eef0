"""Campaign configuration, file loading and experiment presets."""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .dutsim import ALL_BUGS, BugConfig
from .policy import PolicyConfig, RewardParams
from .scoring import ScoringParams

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CampaignConfig:
    name: str = "baseline"
    seed: int = 0
    # generation shape
    blocks_per_testcase: int = 5
    instructions_per_block: int = 6
    candidates_per_prefix: int = 5
    prefixes_per_iteration: int = 80
    top_n: int = 80
    token_cap: int = 24
    # stages
    grm_stage: bool = True
    switch_threshold: float = 0.6
    switch_window: int = 10
    grm_iteration_cap: int = 200
    # DUT-stage budget, counted in the unit named by budget_unit
    stage_budget: int = 2000
    budget_unit: str = "testcases"  # or "instructions"
    dut_iteration_cap: int = 100_000
    # memory and refinement
    memory_window: int = 10
    recency_lambda: float = 0.9
    batch_size: int = 128
    refine_lr_grm: float = 100.0
    refine_lr_dut: float = 10.0
    temperature_grm: float = 1.0
    temperature_dut: float = 1.0
    collapse_floor: float = 0.05
    max_resamples: int = 3
    # execution
    fuel: int = 256
    min_retired_fraction: float = 0.5
    bugs: tuple[str, ...] = tuple(b.value for b in ALL_BUGS)
    # pretraining
    pretrain_seed: int = 0
    pretrain_blocks: int = 8000
    # housekeeping
    checkpoint_every: int = 25
    workers: int = 1
    scoring: ScoringParams = field(default_factory=ScoringParams)
    reward: RewardParams = field(default_factory=RewardParams)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        counts = ("blocks_per_testcase", "instructions_per_block", "candidates_per_prefix",
                  "prefixes_per_iteration", "top_n", "token_cap", "switch_window",
                  "memory_window", "batch_size", "fuel", "pretrain_blocks", "workers",
                  "checkpoint_every")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("grm_iteration_cap", "stage_budget", "dut_iteration_cap", "max_resamples"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.budget_unit not in ("testcases", "instructions"):
            raise ConfigError(f"unknown budget_unit {self.budget_unit!r}")
        if not 0 <= self.switch_threshold <= 1:
            raise ConfigError("switch_threshold must be in [0, 1]")
        if not 0 <= self.collapse_floor < 1:
            raise ConfigError("collapse_floor must be in [0, 1)")
        if not 0 < self.recency_lambda <= 1:
            raise ConfigError("recency_lambda must be in (0, 1]")
        try:
            BugConfig.parse(self.bugs)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def bug_config(self) -> BugConfig:
        return BugConfig.parse(self.bugs)

    def replace(self, **changes) -> "CampaignConfig":
        return from_dict(changes, self)


_NESTED = {"scoring": ScoringParams, "reward": RewardParams, "policy": PolicyConfig}


def to_dict(cfg: CampaignConfig) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    d["bugs"] = list(cfg.bugs)
    return d


def from_dict(d: dict[str, Any], base: CampaignConfig | None = None) -> CampaignConfig:
    """Build a config from ``d`` layered over ``base``; unknown keys are errors."""
    base = base or CampaignConfig()
    known = {f.name for f in fields(CampaignConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, value in d.items():
        if key in _NESTED:
            cls = _NESTED[key]
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            sub_known = {f.name for f in fields(cls)}
            bad = sorted(set(value) - sub_known)
            if bad:
                raise ConfigError(f"unknown keys in [{key}]: {', '.join(bad)}")
            try:
                kwargs[key] = dataclasses.replace(getattr(base, key), **value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"[{key}]: {e}") from None
        elif key == "bugs":
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            kwargs[key] = tuple(sorted(BugConfig.parse(value).names()))
        else:
            kwargs[key] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def load_config(path: str | Path, base: CampaignConfig | None = None) -> CampaignConfig:
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path.name}: {e}") from None
    return from_dict(data, base)


def lock_json(cfg: CampaignConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# presets

PRESETS: dict[str, dict[str, Any]] = {
    "baseline": {},
    "no-grm": {"grm_stage": False},
    "blocks-5x6": {"blocks_per_testcase": 5, "instructions_per_block": 6},
    "blocks-3x10": {"blocks_per_testcase": 3, "instructions_per_block": 10},
    "blocks-1x30": {"blocks_per_testcase": 1, "instructions_per_block": 30},
    "robustness-5seeds": {},
}

# ablation name -> arms (label, preset)
ABLATIONS: dict[str, list[tuple[str, str]]] = {
    "no-grm": [("grm", "baseline"), ("no-grm", "no-grm")],
    "blocks": [("5-6", "blocks-5x6"), ("3-10", "blocks-3x10"), ("1-30", "blocks-1x30")],
    "robustness-5seeds": [(f"seed{i}", "robustness-5seeds") for i in range(5)],
}


def preset(name: str, base: CampaignConfig | None = None) -> CampaignConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    base = base or CampaignConfig()
    return from_dict({"name": name, **PRESETS[name]}, base)
