"""Experiment configuration: JSON with explicit keys, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .engine import RunConfig
from .scenarios import SCENARIOS, ScenarioSpec


class ConfigError(ValueError):
    pass


SPEC_KEYS = (
    "num_classes",
    "dim",
    "labeled_per_class",
    "unlabeled_per_class",
    "ood_clusters",
    "test_per_class",
    "separation",
    "modes_per_class",
    "mode_spread",
    "noise_dims",
)


# noisy labels are guesses to refine, not anchors; open-set follows the
# single-iteration protocol
DEFAULT_OVERRIDES = {
    "noisy-label": {"trusted_labels": False},
    "open-set": {"single_iteration": True},
}


@dataclass
class ExperimentConfig:
    scenario: str = "base"
    severity: int = 1
    seeds: list[int] = field(default_factory=lambda: [0])
    dataset: str | None = None
    out: str = "runs"
    synthetic: dict = field(default_factory=dict)
    run: RunConfig = field(default_factory=RunConfig)
    # per-scenario RunConfig overrides, applied on top of ``run``
    overrides: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_OVERRIDES.items()})

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.severity not in (1, 2, 3):
            raise ConfigError(f"severity must be 1, 2 or 3, got {self.severity}")
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        unknown = set(self.synthetic) - set(SPEC_KEYS)
        if unknown:
            raise ConfigError(f"unknown synthetic keys: {sorted(unknown)}")
        run_keys = {f.name for f in fields(RunConfig)}
        for scen, over in self.overrides.items():
            if scen not in SCENARIOS:
                raise ConfigError(f"override for unknown scenario {scen!r}")
            bad = set(over) - run_keys
            if bad:
                raise ConfigError(f"unknown run keys in {scen} override: {sorted(bad)}")

    def spec(self, seed: int, scenario: str | None = None, severity: int | None = None) -> ScenarioSpec:
        return ScenarioSpec(
            scenario=scenario or self.scenario,
            severity=severity or self.severity,
            seed=seed,
            **self.synthetic,
        )

    def run_config(self, scenario: str | None = None) -> RunConfig:
        """``run`` with the overrides for ``scenario`` applied."""
        over = self.overrides.get(scenario or self.scenario, {})
        return replace(self.run, **over) if over else self.run

    def to_dict(self) -> dict:
        run = asdict(self.run)
        run["hidden_layers"] = list(self.run.hidden_layers)
        return {
            "scenario": self.scenario,
            "severity": self.severity,
            "seeds": list(self.seeds),
            "dataset": self.dataset,
            "out": self.out,
            "synthetic": dict(self.synthetic),
            "run": run,
            "overrides": {k: dict(v) for k, v in self.overrides.items()},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def from_dict(data: dict) -> ExperimentConfig:
    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data = dict(data)
    run = data.pop("run", {}) or {}
    run_keys = {f.name for f in fields(RunConfig)}
    bad = set(run) - run_keys
    if bad:
        raise ConfigError(f"unknown run keys: {sorted(bad)}")
    try:
        return ExperimentConfig(run=RunConfig(**run), **data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return from_dict(data)


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = loads(path.read_text())
    if cfg.dataset is not None and not Path(cfg.dataset).is_file():
        raise ConfigError(f"dataset file not found: {cfg.dataset}")
    return cfg
