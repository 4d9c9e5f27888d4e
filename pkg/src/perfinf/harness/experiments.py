"""Monte Carlo experiments: coverage and width, CLT Q-Q, score quality, convergence."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Any, Callable, Iterable

import numpy as np
from scipy import stats

from perfinf import estimator as est
from perfinf import inference as inf
from perfinf import model as mdl
from perfinf import score as sc
from perfinf.errors import NumericalError
from perfinf.estimator import LambdaPolicy
from perfinf.harness.config import ExperimentConfig


def trial_stream(seed: int, trial: int, n: int) -> np.random.Generator:
    """Independent stream per trial: base seed XOR trial index, keyed by n.

    The base seed is also mixed in on its own; XOR alone maps trials
    0..m-1 under a small seed onto a permutation of the same keys, which
    would make runs with different seeds aggregate identically.

    Every lambda policy shares the stream of a given (trial, n), so policies
    are compared on common random numbers.
    """
    return np.random.default_rng([seed ^ trial, seed, n])


def _map_trials(fn: Callable[[int], Any], trials: int, workers: int) -> list[Any]:
    if workers <= 1:
        return [fn(i) for i in range(trials)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(trials), chunksize=max(1, trials // (4 * workers))))


@dataclass(frozen=True)
class Targets:
    path: np.ndarray
    theta_ps: np.ndarray
    B: float
    eps: float
    beta: float

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> Targets:
        m = config.model
        ps = mdl.performative_stable(m)
        if config.b_mode == "analytic":
            # oracle norm bound: theta_0 and theta_PS both lie in the B-ball
            B = float(max(np.linalg.norm(config.theta0), np.linalg.norm(ps)))
        else:
            grad_sup = inf.ridge_grad_sup(m, config.theta0, config.theta_bound)
            B = inf.b_bound_feasible(grad_sup, m.gamma, float(np.linalg.norm(config.theta0)))
        return cls(
            mdl.underlying_trajectory(m, config.theta0, config.T),
            ps,
            B,
            mdl.sensitivity_epsilon(m),
            mdl.smoothness_beta(m, config.theta_bound),
        )


def run_policy_trajectory(
    config: ExperimentConfig, policy: LambdaPolicy, n: int, rng: np.random.Generator
) -> tuple[est.Trajectory, inf.VarianceEstimate]:
    """One trajectory of length T plus its variance estimate."""
    loss = est.RidgeSquaredLoss(config.model.gamma)
    if policy.kind == "zero":
        traj = est.rrm_trajectory(config.model, loss, config.theta0, config.T, n, rng)
        score_rng = rng.spawn(1)[0]
        ve = inf.estimate_variance(traj, loss, config.score, config.model, score_rng)
    else:
        traj = est.ppi_trajectory(config.model, loss, config.theta0, config.T, n, config.N, policy, rng)
        score_rng = rng.spawn(1)[0]
        ve = inf.estimate_variance_ppi(traj, loss, config.score, n / config.N, config.model, score_rng)
    return traj, ve


def _coverage_trial(config: ExperimentConfig, policy: LambdaPolicy, n: int, targets: Targets, trial: int):
    rng = trial_stream(config.seed, trial, n)
    try:
        traj, ve = run_policy_trajectory(config, policy, n, rng)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        raise NumericalError(
            f"trial {trial} (stream seed {config.seed ^ trial}, n={n}, policy={policy}) failed: {exc}"
        ) from exc
    rows = []
    for t in range(1, config.T + 1):
        theta_hat = traj.steps[t - 1].theta_hat
        V = ve.V_path[t - 1]
        region = inf.ci_coordinates(theta_hat, V, n, config.delta)
        radius = inf.bias_radius(targets.B, targets.eps, targets.beta, config.model.gamma, t)
        rows.append(
            (
                region.contains(targets.path[t]),
                inf.ps_region(region, radius).contains(targets.theta_ps),
                region.mean_width,
                float(traj.steps[t - 1].lam or 0.0),
                inf.mahalanobis_sq(theta_hat, targets.path[t], V, n),
            )
        )
    return rows


@dataclass
class CoverageCell:
    policy: str
    n: int
    t: int
    coverage_t: float
    coverage_ps: float
    se: float
    se_ps: float
    mean_width: float
    mean_lambda: float
    trials: int
    mahalanobis: list[float] | None = None

    def row(self) -> dict[str, Any]:
        out = asdict(self)
        out.pop("mahalanobis")
        return out


CSV_COLUMNS = {
    "coverage": ["policy", "n", "t", "coverage_t", "coverage_ps", "se", "mean_width", "mean_lambda"],
    "qq": ["rank", "observed_m2", "chi2_quantile"],
    "score_eval": ["n", "t", "J_psi", "J_pop", "var_err", "var_err_mean", "grad_err", "trials"],
    "convergence": ["t", "dist_to_ps", "bound", "ratio"],
}


@dataclass
class TrialSummary:
    cells: list[CoverageCell] = field(default_factory=list)
    radius: dict[int, float] = field(default_factory=dict)

    def cell(self, policy: str | LambdaPolicy, n: int, t: int) -> CoverageCell:
        key = str(policy)
        for c in self.cells:
            if c.policy == key and c.n == n and c.t == t:
                return c
        raise KeyError((key, n, t))

    def rows(self) -> list[dict[str, Any]]:
        return [c.row() for c in self.cells]

    def to_dict(self, with_mahalanobis: bool = False) -> dict[str, Any]:
        cells = [asdict(c) if with_mahalanobis else c.row() for c in self.cells]
        return {"cells": cells, "bias_radius": {str(k): v for k, v in self.radius.items()}}


def binomial_se(p: float, trials: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / trials)


def run_coverage(config: ExperimentConfig, keep_mahalanobis: bool = False) -> TrialSummary:
    """Coverage of theta_t and theta_PS plus interval width, per (policy, n, t)."""
    targets = Targets.from_config(config)
    summary = TrialSummary(
        radius={
            t: inf.bias_radius(targets.B, targets.eps, targets.beta, config.model.gamma, t)
            for t in range(1, config.T + 1)
        }
    )
    for policy in config.lambda_policies:
        for n in config.n_grid:
            fn = partial(_coverage_trial, config, policy, n, targets)
            results = np.array(_map_trials(fn, config.trials, config.workers), dtype=float)
            # results: (trials, T, 5)
            for t in range(1, config.T + 1):
                block = results[:, t - 1, :]
                cov_t = float(block[:, 0].mean())
                cov_ps = float(block[:, 1].mean())
                summary.cells.append(
                    CoverageCell(
                        policy=str(policy),
                        n=n,
                        t=t,
                        coverage_t=cov_t,
                        coverage_ps=cov_ps,
                        se=binomial_se(cov_t, config.trials),
                        se_ps=binomial_se(cov_ps, config.trials),
                        mean_width=float(block[:, 2].mean()),
                        mean_lambda=float(block[:, 3].mean()),
                        trials=config.trials,
                        mahalanobis=block[:, 4].tolist() if keep_mahalanobis else None,
                    )
                )
    return summary


def chi2_plotting_positions(m: int, d: int) -> np.ndarray:
    return stats.chi2.ppf((np.arange(1, m + 1) - 0.5) / m, df=d)


def qq_pairs(m2: Iterable[float], d: int) -> list[tuple[float, float]]:
    obs = np.sort(np.asarray(list(m2), dtype=float))
    return list(zip(obs.tolist(), chi2_plotting_positions(obs.size, d).tolist()))


def ks_chi2(m2: Iterable[float], d: int) -> float:
    """Kolmogorov-Smirnov distance between a sample and the chi-square(d) law."""
    return float(stats.kstest(np.asarray(list(m2), dtype=float), stats.chi2(df=d).cdf).statistic)


def _qq_trial(config: ExperimentConfig, policy: LambdaPolicy, n: int, t: int, target: np.ndarray, trial: int):
    rng = trial_stream(config.seed, trial, n)
    traj, ve = run_policy_trajectory(config.with_overrides(T=t), policy, n, rng)
    return inf.mahalanobis_sq(traj.steps[t - 1].theta_hat, target, ve.V_t, n)


def run_qq_sample(
    config: ExperimentConfig, n: int | None = None, t: int | None = None, policy: LambdaPolicy | None = None
) -> np.ndarray:
    """Squared Mahalanobis distances n (theta_hat_t - theta_t)^T V_hat_t^-1 (...), one per trial."""
    n = n or max(config.n_grid)
    t = t or config.T
    policy = policy or config.lambda_policies[0]
    target = mdl.underlying_trajectory(config.model, config.theta0, t)[t]
    fn = partial(_qq_trial, config, policy, n, t, target)
    return np.array(_map_trials(fn, config.trials, config.workers))


def run_qq(
    config: ExperimentConfig, n: int | None = None, t: int | None = None, policy: LambdaPolicy | None = None
) -> list[tuple[float, float]]:
    """Sorted squared Mahalanobis distances paired with chi-square(d) quantiles."""
    if config.trials < 100:
        raise ValueError("a Q-Q diagnostic needs at least 100 trials")
    return qq_pairs(run_qq_sample(config, n, t, policy), config.model.d)


@dataclass
class ScoreEvalRow:
    n: int
    t: int
    J_psi: float
    J_pop: float
    var_err: float
    var_err_mean: float
    grad_err: float
    trials: int


def _score_trial(config: ExperimentConfig, n: int, trial: int):
    rng = trial_stream(config.seed, trial, n)
    m = config.model
    loss = est.RidgeSquaredLoss(m.gamma)
    traj = est.rrm_trajectory(m, loss, config.theta0, config.T, n, rng)
    ve = inf.estimate_variance(traj, loss, config.score, m, rng.spawn(1)[0])
    true_grad = mdl.grad_g_analytic(m)
    fits = []
    for i, block in enumerate(ve.per_step[:-1], start=1):
        data = traj.steps[i].dataset
        const = float(np.mean(np.sum(mdl.log_score_analytic(m, data, data.theta_source) ** 2, axis=1)))
        fits.append(
            (
                block.j_value + const,
                sc.population_j(m, block.psi_hat, data.theta_source),
                float(np.linalg.norm(block.gradG_hat - true_grad)),
            )
        )
    return fits, [v for v in ve.V_path]


def run_score_eval(config: ExperimentConfig) -> list[ScoreEvalRow]:
    """Quality of the fitted score model and the resulting error of V_hat_t."""
    cfg = config.with_overrides(score=inf.ScoreConfig(**{**config.score.__dict__, "mode": "fitted"}))
    V_true = mdl.population_vt(cfg.model, cfg.theta0, cfg.T)
    rows = []
    for n in cfg.n_grid:
        results = _map_trials(partial(_score_trial, cfg, n), cfg.trials, cfg.workers)
        for t in range(2, cfg.T + 1):
            fits = np.array([f for fits, _ in results for f in fits[: t - 1]])
            errs = np.array([np.linalg.norm(path[t - 1] - V_true[t - 1]) for _, path in results])
            rows.append(
                ScoreEvalRow(
                    n=n,
                    t=t,
                    J_psi=float(fits[:, 0].mean()),
                    J_pop=float(fits[:, 1].mean()),
                    var_err=float(np.median(errs)),
                    var_err_mean=float(errs.mean()),
                    grad_err=float(np.median(fits[:, 2])),
                    trials=cfg.trials,
                )
            )
    return rows


@dataclass
class ConvergenceRow:
    t: int
    dist_to_ps: float
    bound: float
    ratio: float


def run_convergence(config: ExperimentConfig) -> list[ConvergenceRow]:
    """Distance of the underlying iterates to theta_PS against the linear-rate bound."""
    m = config.model
    path = mdl.underlying_trajectory(m, config.theta0, config.T)
    ps = mdl.performative_stable(m)
    rate = mdl.contraction_rate(m, config.theta_bound)
    d0 = float(np.linalg.norm(config.theta0 - ps))
    rows = []
    prev = None
    for t, theta in enumerate(path):
        dist = float(np.linalg.norm(theta - ps))
        ratio = float("nan") if prev is None or prev == 0 else dist / prev
        rows.append(ConvergenceRow(t, dist, d0 * rate**t, ratio))
        prev = dist
    return rows


def simulate(
    config: ExperimentConfig,
    n: int | None = None,
    policy: LambdaPolicy | None = None,
    include_data: bool = False,
) -> dict[str, Any]:
    """One trajectory with its variance estimate and confidence regions."""
    n = n or config.n_grid[0]
    policy = policy or config.lambda_policies[0]
    targets = Targets.from_config(config)
    rng = trial_stream(config.seed, 0, n)
    traj, ve = run_policy_trajectory(config, policy, n, rng)
    traj.seed = config.seed
    regions = []
    for t in range(1, config.T + 1):
        region = inf.ci_coordinates(traj.steps[t - 1].theta_hat, ve.V_path[t - 1], n, config.delta)
        radius = inf.bias_radius(targets.B, targets.eps, targets.beta, config.model.gamma, t)
        regions.append(
            {
                "t": t,
                "theta_t": targets.path[t].tolist(),
                "region": region.to_dict(),
                "ps_region": inf.ps_region(region, radius).to_dict(),
            }
        )
    return {
        "config": config.to_dict(),
        "policy": str(policy),
        "n": n,
        "trajectory": traj.to_dict(include_data=include_data),
        "variance": ve.to_dict(),
        "theta_ps": targets.theta_ps.tolist(),
        "regions": regions,
    }
