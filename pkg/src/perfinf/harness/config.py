"""Experiment configuration and its JSON loader."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from perfinf import model as mdl
from perfinf.errors import ConfigError
from perfinf.estimator import LambdaPolicy
from perfinf.inference import ScoreConfig
from perfinf.model import ModelParams

DEFAULT_N_GRID = (100, 250, 500, 1000, 2000)


@dataclass
class ExperimentConfig:
    model: ModelParams
    theta0: np.ndarray
    T: int = 4
    n_grid: list[int] = field(default_factory=lambda: list(DEFAULT_N_GRID))
    N: int = 2000
    delta: float = 0.1
    trials: int = 1000
    lambda_policies: list[LambdaPolicy] = field(default_factory=lambda: [LambdaPolicy.zero()])
    score: ScoreConfig = field(default_factory=ScoreConfig)
    seed: int = 0
    theta_bound: float = mdl.DEFAULT_THETA_BOUND
    b_mode: str = "analytic"
    workers: int = 1

    def __post_init__(self) -> None:
        self.theta0 = np.asarray(self.theta0, dtype=float)
        self.n_grid = [int(n) for n in self.n_grid]
        self.validate()

    def validate(self) -> None:
        d = self.model.d
        if self.theta0.shape != (d,):
            raise ConfigError(f"theta0 must have {d} entries")
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if not self.n_grid:
            raise ConfigError("n_grid must not be empty")
        if any(n < d + 1 for n in self.n_grid):
            raise ConfigError(f"every n in n_grid must be at least d+1 = {d + 1}")
        if self.N < 2:
            raise ConfigError("N must be at least 2")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if not self.lambda_policies:
            raise ConfigError("lambda_policies must not be empty")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.b_mode not in {"analytic", "feasible"}:
            raise ConfigError("b_mode must be 'analytic' or 'feasible'")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        mdl.check_contraction(self.model, self.theta_bound)

    def with_overrides(self, **changes: Any) -> ExperimentConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "theta0": self.theta0.tolist(),
            "T": self.T,
            "n_grid": list(self.n_grid),
            "N": self.N,
            "delta": self.delta,
            "trials": self.trials,
            "lambda_policies": [str(p) for p in self.lambda_policies],
            "score": self.score.to_dict(),
            "seed": self.seed,
            "theta_bound": self.theta_bound,
            "b_mode": self.b_mode,
        }


_TOP_LEVEL = {
    "model", "theta0", "T", "n_grid", "N", "delta", "trials", "lambda_policies",
    "score", "seed", "theta_bound", "b_mode", "workers",
}


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Build a config; ``"model": "default"`` (or a missing model) selects the default setting."""
    unknown = data.keys() - _TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    kwargs = dict(data)
    raw_model = kwargs.pop("model", "default")
    try:
        if raw_model == "default":
            kwargs["model"] = mdl.default_setting()
        elif isinstance(raw_model, dict):
            kwargs["model"] = ModelParams.from_dict(raw_model)
        else:
            raise ConfigError("model must be 'default' or an object")
        kwargs.setdefault("theta0", list(mdl.DEFAULT_THETA0))
        if "lambda_policies" in kwargs:
            kwargs["lambda_policies"] = [LambdaPolicy.parse(p) for p in kwargs["lambda_policies"]]
        if "score" in kwargs:
            kwargs["score"] = ScoreConfig(**kwargs["score"])
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    return config_from_dict(data)


def default_config(**overrides: Any) -> ExperimentConfig:
    """Default simulation: d=2, gamma=2, sigma_y2=0.2, eps=0.02, N=2000, delta=0.1."""
    base: dict[str, Any] = {
        "model": mdl.default_setting(),
        "theta0": list(mdl.DEFAULT_THETA0),
        "lambda_policies": [LambdaPolicy.zero(), LambdaPolicy.fixed(1.0), LambdaPolicy.greedy()],
    }
    base.update(overrides)
    return ExperimentConfig(**base)
