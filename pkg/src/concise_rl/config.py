"""Run and stage configuration, JSON loading and named presets.

Run config JSON layout::

    {
      "seed": 0,
      "vocab": null,                       # list of symbols; null = built-in vocabulary
      "policy": {"k": 10, "e": 16, "h": 64},
      "task": {"ops": ["ADD", "SUB", "MUL"], "modulus": 10},
      "base": {"steps": 300, "batch": 64, "lr": 3e-3, "max_reflections": 3, "mix": {...}},
      "stage1": {StageConfig fields},
      "stage2": {StageConfig fields},
      "eval": {"n_questions": 64, "samples_per_question": 16, "temperature": 0.6,
               "top_p": 0.95, "L_max": 64, "mix": {...}, "seed": 1},
      "output_dir": "runs/desk",
      "dump_rollouts": false
    }

Difficulty mixes map EASY/MEDIUM/HARD to weights summing to 1 (operand
bands are documented in :mod:`concise_rl.task_env`).
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from concise_rl.objectives import Aggregation
from concise_rl.policy_core import ConfigError
from concise_rl.reward_shaping import SHAPERS
from concise_rl.rollout_engine import FilterMode
from concise_rl.task_env import DIFFICULTIES, OPS

ALGORITHMS = ("GRPO", "GRPOPP", "LGRPO", "PPO")
REQUIRED_FILTER = {"GRPOPP": FilterMode.STAGE1, "LGRPO": FilterMode.STAGE2}


@dataclass
class StageConfig:
    name: str = "stage1"
    algorithm: str = "GRPOPP"
    steps: int = 600
    batch_groups: int = 8
    G: int = 8
    L_max: int = 64
    lr: float = 3e-4
    eps_low: float = 0.2
    eps_high: float = 0.28
    alpha: float = 0.001
    beta: float = 0.0
    lam: float = 2e-6
    temperature: float = 1.0
    top_p: float = 1.0
    filter_mode: str = "STAGE1"
    fill: str = "resample"
    max_attempts: int = 256
    inner_epochs: int = 1
    aggregation: str = "TOKEN"
    reward_shaping: str = "lgrpo"
    mix: dict = field(default_factory=lambda: {"EASY": 0.5, "MEDIUM": 0.5})
    checkpoint_interval: int = 50
    eval_interval: int = 50

    def validate(self) -> "StageConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"{self.name}: unknown algorithm {self.algorithm!r}")
        try:
            mode = FilterMode(self.filter_mode)
            Aggregation(self.aggregation)
        except ValueError as exc:
            raise ConfigError(f"{self.name}: {exc}") from None
        need = REQUIRED_FILTER.get(self.algorithm)
        if need is not None and mode is not need:
            raise ConfigError(
                f"{self.name}: {self.algorithm} requires filter_mode {need.value}, "
                f"got {mode.value}")
        if self.reward_shaping not in SHAPERS:
            raise ConfigError(f"{self.name}: unknown reward_shaping {self.reward_shaping!r}")
        if self.fill not in ("resample", "mask"):
            raise ConfigError(f"{self.name}: fill must be 'resample' or 'mask'")
        ints = dict(steps=0, batch_groups=1, G=2, L_max=1, inner_epochs=1,
                    checkpoint_interval=1, eval_interval=1)
        for name, lo in ints.items():
            if int(getattr(self, name)) < lo:
                raise ConfigError(f"{self.name}: {name} must be >= {lo}")
        if self.max_attempts < self.batch_groups:
            raise ConfigError(f"{self.name}: max_attempts must be >= batch_groups")
        if not 0 < self.eps_low < 1 or self.eps_high < self.eps_low:
            raise ConfigError(f"{self.name}: need 0 < eps_low < 1 <= ... and eps_high >= eps_low")
        if min(self.alpha, self.beta, self.lam, self.lr) < 0:
            raise ConfigError(f"{self.name}: alpha, beta, lam, lr must be non-negative")
        if not self.temperature > 0 or not 0 < self.top_p <= 1:
            raise ConfigError(f"{self.name}: need temperature > 0 and 0 < top_p <= 1")
        _check_mix(self.mix, self.name)
        return self


def _check_mix(mix: dict, where: str) -> None:
    if not mix or set(mix) - set(DIFFICULTIES) or abs(sum(mix.values()) - 1) > 1e-9 \
            or min(mix.values()) < 0:
        raise ConfigError(f"{where}: difficulty mix must map {DIFFICULTIES} to weights "
                          f"summing to 1, got {mix!r}")


@dataclass
class RunConfig:
    seed: int = 0
    vocab: list | None = None
    policy: dict = field(default_factory=lambda: {"k": 10, "e": 16, "h": 64})
    task: dict = field(default_factory=lambda: {"ops": list(OPS), "modulus": 10})
    base: dict = field(default_factory=dict)
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=StageConfig)
    eval: dict = field(default_factory=dict)
    output_dir: str = "runs/desk"
    dump_rollouts: bool = False

    def validate(self) -> "RunConfig":
        for key in ("k", "e", "h"):
            if int(self.policy.get(key, 0)) < 1:
                raise ConfigError(f"policy.{key} must be a positive integer")
        ops = self.task.get("ops", OPS)
        if not ops or set(ops) - set(OPS):
            raise ConfigError(f"task.ops must be a non-empty subset of {OPS}")
        if int(self.task.get("modulus", 10)) < 2:
            raise ConfigError("task.modulus must be >= 2")
        self.stage1.validate()
        self.stage2.validate()
        if self.base:
            _check_mix(self.base.get("mix", self.stage1.mix), "base")
        _check_mix(self.eval.get("mix", self.stage1.mix), "eval")
        if int(self.eval.get("samples_per_question", 1)) < 1:
            raise ConfigError("eval.samples_per_question must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


DESK = {
    "seed": 0,
    "vocab": None,
    "policy": {"k": 10, "e": 16, "h": 64},
    "task": {"ops": list(OPS), "modulus": 10},
    "base": {"steps": 300, "batch": 64, "lr": 3e-3, "max_reflections": 3,
             "mix": {"EASY": 1.0}},
    "stage1": {
        "name": "stage1", "algorithm": "GRPOPP", "steps": 600, "batch_groups": 16, "G": 16,
        "L_max": 64, "lr": 3e-3, "eps_low": 0.2, "eps_high": 0.28, "alpha": 0.01,
        "beta": 0.0, "lam": 0.0, "temperature": 1.3, "top_p": 1.0, "filter_mode": "STAGE1",
        "max_attempts": 2048, "mix": {"EASY": 1.0}, "checkpoint_interval": 50,
        "eval_interval": 50,
    },
    "stage2": {
        "name": "stage2", "algorithm": "LGRPO", "steps": 150, "batch_groups": 16, "G": 16,
        "L_max": 64, "lr": 1e-3, "eps_low": 0.2, "eps_high": 0.28, "alpha": 0.001,
        "beta": 0.01, "lam": 1e-3, "temperature": 1.0, "top_p": 1.0, "filter_mode": "STAGE2",
        "reward_shaping": "lgrpo", "mix": {"EASY": 1.0}, "checkpoint_interval": 50,
        "eval_interval": 25,
    },
    "eval": {"n_questions": 64, "samples_per_question": 16, "temperature": 0.6, "top_p": 0.95,
             "L_max": 64, "mix": {"EASY": 1.0}, "seed": 1},
    "output_dir": "runs/desk",
    "dump_rollouts": False,
}

# Values as reported for the 7B runs.  Kept for reference; far too slow for a laptop.
PAPER = copy.deepcopy(DESK)
PAPER["stage1"].update(batch_groups=128, G=32, L_max=3072, lr=1e-6, alpha=0.001,
                       temperature=1.0)
PAPER["stage2"].update(batch_groups=128, G=32, L_max=3072, lr=1e-6, alpha=0.001, beta=0.01,
                       lam=2e-6, temperature=1.0)
PAPER["eval"].update(L_max=3072, samples_per_question=32)
PAPER["output_dir"] = "runs/paper"

# Reported coefficients (clip range, alpha, beta, lambda, eval sampling) at desk sizes.
PAPER_SCALED = copy.deepcopy(DESK)
PAPER_SCALED["stage1"].update(alpha=0.001, temperature=1.0)
PAPER_SCALED["stage2"].update(alpha=0.001, lam=2e-6, temperature=1.0)
PAPER_SCALED["output_dir"] = "runs/paper-scaled"

PRESETS = {"desk": DESK, "paper": PAPER, "paper-scaled": PAPER_SCALED}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in ("mix",):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _stage(d: dict, name: str) -> StageConfig:
    known = {f.name for f in dataclasses.fields(StageConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{name}: unknown fields {sorted(unknown)}")
    d = dict(d)
    d.setdefault("name", name)
    return StageConfig(**d)


def from_dict(d: dict, preset: str | None = "desk") -> RunConfig:
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset], d) if preset else copy.deepcopy(d)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown run config fields {sorted(unknown)}")
    merged["stage1"] = _stage(merged.get("stage1", {}), "stage1")
    merged["stage2"] = _stage(merged.get("stage2", {}), "stage2")
    try:
        return RunConfig(**merged).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, preset: str | None = "desk") -> RunConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    return from_dict(raw, preset)


def preset(name: str = "desk", **overrides: Any) -> RunConfig:
    return from_dict(overrides, name)
