"""Performative linear-regression distribution map and its closed-form oracles.

Data under a deployed parameter ``theta`` are generated as::

    x ~ N(mu_x, sigma_x) truncated to ||x||^2 <= trunc_r2
    y = alpha @ x + mu @ theta + nu,   nu ~ N(0, sigma_y2)

The closed forms below (``underlying_step``, ``performative_stable``,
``grad_g_analytic``, the population moments) use the untruncated Gaussian
moments. The truncation radius is chosen so that the discarded mass is
negligible for the shipped settings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from perfinf.errors import ConfigError, NumericalError, SamplingError

MAX_CONSECUTIVE_REJECTIONS = 1_000_000
Y_CLIP_SIGMAS = 6.0

Array = NDArray[np.float64]


def _vector(value: Any, name: str) -> Array:
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 1:
        raise ConfigError(f"{name} must be a vector, got shape {arr.shape}")
    return arr


@dataclass
class ModelParams:
    """Full analytic description of the distribution map D(theta).

    Attributes:
        alpha: Regression coefficients, shape (d,).
        mu: Performativity direction, shape (d,). Its norm is the sensitivity.
        mu_x: Feature mean, shape (d,).
        sigma_x: Feature covariance, symmetric positive definite (d, d).
        sigma_y2: Label noise variance.
        gamma: Ridge strength, also the strong-convexity constant of the loss.
        trunc_r2: Squared radius of the feature ball the sampler truncates to.
        annot_bias: Mean of the annotator noise.
    """

    alpha: Array
    mu: Array
    mu_x: Array
    sigma_x: Array
    sigma_y2: float
    gamma: float
    trunc_r2: float = 20.0
    annot_bias: float = -0.2

    def __post_init__(self) -> None:
        self.alpha = _vector(self.alpha, "alpha")
        self.mu = _vector(self.mu, "mu")
        self.mu_x = _vector(self.mu_x, "mu_x")
        self.sigma_x = np.asarray(self.sigma_x, dtype=float)
        self.sigma_y2 = float(self.sigma_y2)
        self.gamma = float(self.gamma)
        self.trunc_r2 = float(self.trunc_r2)
        self.annot_bias = float(self.annot_bias)

        d = self.alpha.shape[0]
        if self.mu.shape != (d,) or self.mu_x.shape != (d,):
            raise ConfigError("alpha, mu and mu_x must share one dimension")
        if self.sigma_x.shape != (d, d):
            raise ConfigError(f"sigma_x must be {d}x{d}, got {self.sigma_x.shape}")
        if not np.allclose(self.sigma_x, self.sigma_x.T, atol=1e-12):
            raise ConfigError("sigma_x must be symmetric")
        if np.linalg.eigvalsh(self.sigma_x).min() <= 0:
            raise ConfigError("sigma_x must be positive definite")
        if self.sigma_y2 < 0:
            raise ConfigError("sigma_y2 must be nonnegative")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.trunc_r2 <= 0:
            raise ConfigError("trunc_r2 must be positive")

    @property
    def d(self) -> int:
        return self.alpha.shape[0]

    @property
    def second_moment(self) -> Array:
        """E[x x^T] = sigma_x + mu_x mu_x^T."""
        return self.sigma_x + np.outer(self.mu_x, self.mu_x)

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha.tolist(),
            "mu": self.mu.tolist(),
            "mu_x": self.mu_x.tolist(),
            "sigma_x": self.sigma_x.tolist(),
            "sigma_y2": self.sigma_y2,
            "gamma": self.gamma,
            "trunc_r2": self.trunc_r2,
            "annot_bias": self.annot_bias,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelParams:
        required = {"alpha", "mu", "mu_x", "sigma_x", "sigma_y2", "gamma"}
        allowed = required | {"trunc_r2", "annot_bias"}
        missing = required - data.keys()
        if missing:
            raise ConfigError(f"model config missing fields: {sorted(missing)}")
        unknown = data.keys() - allowed
        if unknown:
            raise ConfigError(f"model config has unknown fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> ModelParams:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class LabeledSample:
    x: Array
    y: float


@dataclass
class Dataset:
    """Paired features and labels drawn under ``theta_source``.

    Samples are stored column-wise (``X`` is (n, d), ``y`` is (n,)) so that
    every estimator below stays vectorized.
    """

    X: Array
    y: Array
    theta_source: Array = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        self.theta_source = np.asarray(self.theta_source, dtype=float)
        if self.X.shape[0] == 0:
            raise ValueError("Dataset must be nonempty")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("X and y disagree on the number of samples")

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.X[i].copy(), float(self.y[i]))

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def samples(self) -> list[LabeledSample]:
        return [self[i] for i in range(len(self))]

    @classmethod
    def from_samples(cls, samples: list[LabeledSample], theta_source) -> Dataset:
        X = np.array([s.x for s in samples], dtype=float)
        y = np.array([s.y for s in samples], dtype=float)
        return cls(X, y, theta_source)

    def to_dict(self) -> dict[str, Any]:
        return {
            "theta_source": self.theta_source.tolist(),
            "X": self.X.tolist(),
            "y": self.y.tolist(),
        }


def default_setting(**overrides: Any) -> ModelParams:
    """The d=2 simulation: gamma=2, sigma_y2=0.2, eps=||mu||=0.02, ||x||^2 <= 20.

    alpha, mu_x and sigma_x are free knobs; keyword overrides replace any field.
    """
    base: dict[str, Any] = {
        "alpha": [1.0, -0.5],
        "mu": [0.012, 0.016],
        "mu_x": [0.5, 0.5],
        "sigma_x": [[0.3, 0.1], [0.1, 0.2]],
        "sigma_y2": 0.2,
        "gamma": 2.0,
        "trunc_r2": 20.0,
        "annot_bias": -0.2,
    }
    base.update(overrides)
    return ModelParams(**base)


DEFAULT_THETA0 = (0.1, 0.0)
DEFAULT_THETA_BOUND = 1.0


def _check_theta(params: ModelParams, theta) -> Array:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (params.d,):
        raise ValueError(f"theta must have shape ({params.d},), got {theta.shape}")
    return theta


def sample_features(params: ModelParams, N: int, rng: np.random.Generator) -> Array:
    """Draw N rows from N(mu_x, sigma_x) restricted to ||x||^2 <= trunc_r2."""
    if N < 1:
        raise ValueError("need at least one sample")
    chol = np.linalg.cholesky(params.sigma_x)
    d = params.d
    out = np.empty((N, d))
    have = 0
    streak = 0
    while have < N:
        batch = max(2 * (N - have), 16)
        draws = params.mu_x + rng.standard_normal((batch, d)) @ chol.T
        ok = np.flatnonzero(np.einsum("ij,ij->i", draws, draws) <= params.trunc_r2)
        if ok.size == 0:
            streak += batch
        else:
            streak += ok[0]
            if streak < MAX_CONSECUTIVE_REJECTIONS:
                streak = batch - 1 - ok[-1]
        if streak >= MAX_CONSECUTIVE_REJECTIONS:
            raise SamplingError(
                f"{streak} consecutive rejections: trunc_r2={params.trunc_r2} "
                "is incompatible with mu_x and sigma_x"
            )
        take = ok[: N - have]
        out[have : have + take.size] = draws[take]
        have += take.size
    return out


def sample_labeled(params: ModelParams, theta, n: int, rng: np.random.Generator) -> Dataset:
    """Draw n labeled samples from D(theta)."""
    theta = _check_theta(params, theta)
    X = sample_features(params, n, rng)
    noise = rng.normal(0.0, np.sqrt(params.sigma_y2), size=n)
    y = X @ params.alpha + params.mu @ theta + noise
    return Dataset(X, y, theta.copy())


def sample_unlabeled(params: ModelParams, theta, N: int, rng: np.random.Generator) -> Array:
    """Draw N feature vectors. The marginal of x does not depend on theta."""
    _check_theta(params, theta)
    return sample_features(params, N, rng)


def annotate(params: ModelParams, theta, x, rng: np.random.Generator):
    """Machine annotation alpha@x + mu@theta + nu with nu ~ N(annot_bias, sigma_y2).

    ``x`` may be one vector (returns a float) or an (m, d) array (returns (m,)).
    """
    theta = _check_theta(params, theta)
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    size = None if x.ndim == 1 else x.shape[0]
    noise = rng.normal(params.annot_bias, np.sqrt(params.sigma_y2), size=size)
    out = x @ params.alpha + params.mu @ theta + noise
    return float(out) if size is None else out


def population_hessian(params: ModelParams) -> Array:
    """Hessian of the population ridge risk, identical for every theta."""
    return params.second_moment + params.gamma * np.eye(params.d)


def underlying_step(params: ModelParams, theta) -> Array:
    """G(theta): the population risk minimizer under D(theta)."""
    theta = _check_theta(params, theta)
    m = params.second_moment
    rhs = np.outer(params.mu_x, params.mu) @ theta + m @ params.alpha
    return np.linalg.solve(population_hessian(params), rhs)


def underlying_trajectory(params: ModelParams, theta0, T: int) -> Array:
    """Rows theta_0, theta_1 = G(theta_0), ..., theta_T."""
    path = [_check_theta(params, theta0)]
    for _ in range(T):
        path.append(underlying_step(params, path[-1]))
    return np.array(path)


def performative_stable(params: ModelParams) -> Array:
    """Fixed point of ``underlying_step``."""
    m = params.second_moment
    system = m - np.outer(params.mu_x, params.mu) + params.gamma * np.eye(params.d)
    try:
        return np.linalg.solve(system, m @ params.alpha)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("performative stable system is singular") from exc


def grad_g_analytic(params: ModelParams) -> Array:
    """Jacobian of G, constant in theta for this model."""
    return np.linalg.solve(population_hessian(params), np.outer(params.mu_x, params.mu))


def sensitivity_epsilon(params: ModelParams) -> float:
    return float(np.linalg.norm(params.mu))


def y_bound(params: ModelParams, theta_bound: float) -> float:
    """Label range used for the smoothness constant: |y| <= this value."""
    r = np.sqrt(params.trunc_r2)
    return float(
        r * np.linalg.norm(params.alpha)
        + sensitivity_epsilon(params) * theta_bound
        + Y_CLIP_SIGMAS * np.sqrt(params.sigma_y2)
    )


def smoothness_beta(params: ModelParams, theta_bound: float) -> float:
    """Joint smoothness constant of the ridge loss over the truncated domain.

    The maximized expressions are monotone in ||x||, ||theta|| and |y|, so it
    suffices to evaluate them at ||x||^2 = trunc_r2, ||theta|| = theta_bound,
    x aligned with theta, and y at the bottom of its range.
    """
    if theta_bound < 0:
        raise ValueError("theta_bound must be nonnegative")
    r = np.sqrt(params.trunc_r2)
    first = params.trunc_r2 + params.gamma
    resid = 2.0 * r * theta_bound + y_bound(params, theta_bound)
    second = np.sqrt(resid**2 + params.trunc_r2)
    return float(max(first, second))


def contraction_rate(params: ModelParams, theta_bound: float) -> float:
    """eps * beta / gamma, the linear rate of repeated risk minimization."""
    return sensitivity_epsilon(params) * smoothness_beta(params, theta_bound) / params.gamma


def check_contraction(params: ModelParams, theta_bound: float) -> float:
    rate = contraction_rate(params, theta_bound)
    if rate >= 1.0:
        raise ConfigError(
            f"eps*beta/gamma = {rate:.4g} >= 1; repeated risk minimization is not "
            "guaranteed to converge for this configuration"
        )
    return rate


def _xy(z) -> tuple[Array, Array]:
    if isinstance(z, LabeledSample):
        return np.atleast_2d(z.x), np.atleast_1d(float(z.y))
    if isinstance(z, Dataset):
        return z.X, z.y
    X, y = z
    return np.atleast_2d(np.asarray(X, dtype=float)), np.atleast_1d(np.asarray(y, dtype=float))


def log_score_analytic(params: ModelParams, z, theta) -> Array:
    """grad_theta log p(z, theta) = mu (y - alpha@x - mu@theta) / sigma_y2.

    Returns shape (d,) for a single ``LabeledSample``, (n, d) for a Dataset.
    """
    if params.sigma_y2 == 0:
        raise NumericalError("score is undefined for a noiseless model (sigma_y2 = 0)")
    theta = _check_theta(params, theta)
    X, y = _xy(z)
    resid = y - X @ params.alpha - params.mu @ theta
    out = np.outer(resid, params.mu) / params.sigma_y2
    return out[0] if isinstance(z, LabeledSample) else out


def log_density(params: ModelParams, z, theta) -> Array:
    """Gaussian log-density of y given x under D(theta), up to an x-only term."""
    theta = _check_theta(params, theta)
    X, y = _xy(z)
    resid = y - X @ params.alpha - params.mu @ theta
    return -0.5 * np.log(2 * np.pi * params.sigma_y2) - resid**2 / (2 * params.sigma_y2)


def population_grad_cov(params: ModelParams, theta_source, theta) -> Array:
    """Cov of the ridge gradient x (theta@x - y) + gamma*theta under D(theta_source).

    Uses Gaussian fourth moments (Isserlis) of the untruncated features.
    """
    theta_source = _check_theta(params, theta_source)
    theta = _check_theta(params, theta)
    S, m = params.sigma_x, params.mu_x
    b = theta - params.alpha
    shift = b @ m - params.mu @ theta_source
    Sb = S @ b
    second = params.second_moment
    return (
        params.sigma_y2 * second
        + (b @ Sb) * second
        + np.outer(Sb, Sb)
        + shift**2 * S
        + shift * (np.outer(Sb, m) + np.outer(m, Sb))
    )


def population_sigma(params: ModelParams, theta_source, theta) -> Array:
    """Sandwich H^-1 V H^-1 at the population level."""
    H = population_hessian(params)
    V = population_grad_cov(params, theta_source, theta)
    Hinv = np.linalg.inv(H)
    out = Hinv @ V @ Hinv
    return 0.5 * (out + out.T)


def population_vt(params: ModelParams, theta0, T: int) -> list[Array]:
    """Asymptotic covariances V_1..V_T of sqrt(n)(theta_hat_t - theta_t)."""
    path = underlying_trajectory(params, theta0, T)
    grad = grad_g_analytic(params)
    out: list[Array] = []
    for t in range(1, T + 1):
        sigma = population_sigma(params, path[t - 1], path[t])
        out.append(sigma if not out else grad @ out[-1] @ grad.T + sigma)
    return out
