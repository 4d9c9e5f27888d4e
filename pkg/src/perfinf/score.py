"""Gradient-free score matching in theta via policy perturbation.

The score model is the linear-Gaussian family

    log M(z, theta; psi) = const - (y - a@x - c@theta)^2 / (2 s2),

whose theta-score is ``c (y - a@x - c@theta) / s2``. The family contains the
true score of the performative regression model (a=alpha, c=mu, s2=sigma_y2).

The derivative of E_theta[s_i] with respect to theta_i is unavailable in
closed form without the density, so it is replaced by a difference quotient
between samples drawn at theta + eta e_i and at theta.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import NDArray

from perfinf import model as mdl
from perfinf.errors import NumericalError, SolverError
from perfinf.estimator import LossModel
from perfinf.model import Dataset, ModelParams

Array = NDArray[np.float64]

S2_MIN = 1e-6
S2_MAX = 1e8
DEFAULT_ETA = 0.1
DEFAULT_LR = 0.1
DEFAULT_ITERS = 500
MAX_HALVINGS = 30


@dataclass
class ScoreModelParams:
    a: Array
    c: Array
    s2: float

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        self.s2 = float(self.s2)
        if self.a.shape != self.c.shape or self.a.ndim != 1:
            raise ValueError("a and c must be vectors of one dimension")
        if not self.s2 > 0:
            raise ValueError("s2 must be positive")

    @classmethod
    def truth(cls, params: ModelParams) -> ScoreModelParams:
        return cls(params.alpha.copy(), params.mu.copy(), params.sigma_y2)

    @classmethod
    def zeros(cls, d: int, s2: float = 1.0) -> ScoreModelParams:
        return cls(np.zeros(d), np.zeros(d), s2)

    def to_dict(self) -> dict[str, Any]:
        return {"a": self.a.tolist(), "c": self.c.tolist(), "s2": self.s2}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ScoreModelParams:
        return cls(data["a"], data["c"], data["s2"])

    def _pack(self) -> Array:
        return np.concatenate([self.a, self.c, [np.log(self.s2)]])

    @classmethod
    def _unpack(cls, p: Array) -> ScoreModelParams:
        d = (p.size - 1) // 2
        return cls(p[:d].copy(), p[d : 2 * d].copy(), float(np.exp(p[-1])))


def _xy(z) -> tuple[Array, Array, bool]:
    if isinstance(z, mdl.LabeledSample):
        return np.atleast_2d(z.x), np.atleast_1d(float(z.y)), True
    if isinstance(z, Dataset):
        return z.X, z.y, False
    X, y = z
    return np.atleast_2d(np.asarray(X, dtype=float)), np.atleast_1d(np.asarray(y, dtype=float)), False


def residual(psi: ScoreModelParams, X: Array, y: Array, theta) -> Array:
    return y - X @ psi.a - psi.c @ np.asarray(theta, dtype=float)


def log_m(psi: ScoreModelParams, z, theta) -> Array:
    """log M(z, theta; psi) up to the psi-independent constant."""
    X, y, single = _xy(z)
    out = -0.5 * np.log(2 * np.pi * psi.s2) - residual(psi, X, y, theta) ** 2 / (2 * psi.s2)
    return out[0] if single else out


def score_eval(psi: ScoreModelParams, z, theta) -> Array:
    """s(z, theta; psi), shape (d,) for one sample or (n, d) for a Dataset."""
    X, y, single = _xy(z)
    out = np.outer(residual(psi, X, y, theta), psi.c) / psi.s2
    return out[0] if single else out


def score_partial2(psi: ScoreModelParams, i: int) -> float:
    """d^2 log M / d theta_i^2, constant in z and theta for this family."""
    return float(-psi.c[i] ** 2 / psi.s2)


@dataclass
class PerturbationBundle:
    base: Dataset
    perturbed: list[Dataset]
    eta: float
    theta: Array

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=float)
        d = self.theta.shape[0]
        if len(self.perturbed) != d:
            raise ValueError(f"need exactly {d} perturbed datasets, got {len(self.perturbed)}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")


def collect_perturbed(
    params: ModelParams,
    theta,
    eta: float,
    n: int,
    k: int,
    rng: np.random.Generator,
    base: Dataset | None = None,
) -> PerturbationBundle:
    """Sample n points at ``theta`` and k points at each ``theta + eta e_i``.

    Passing ``base`` reuses an existing dataset drawn at ``theta`` instead of
    drawing a new one; ``n`` is then ignored.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    if k < 1:
        raise ValueError("k must be at least 1")
    theta = np.asarray(theta, dtype=float)
    if base is None:
        base = mdl.sample_labeled(params, theta, n, rng)
    elif not np.array_equal(base.theta_source, theta):
        raise ValueError("base dataset was not drawn at theta")
    eye = np.eye(params.d)
    perturbed = [mdl.sample_labeled(params, theta + eta * eye[i], k, rng) for i in range(params.d)]
    return PerturbationBundle(base, perturbed, float(eta), theta.copy())


def j_hat(psi: ScoreModelParams, bundle: PerturbationBundle) -> float:
    """Empirical score-matching objective without its psi-free term.

    E_n||s||^2 + 2 sum_i E_n[ds_i/dtheta_i]
      - 2 sum_i (E_k[s_i at theta+eta e_i] - E_n[s_i at theta]) / eta
    """
    theta, eta = bundle.theta, bundle.eta
    s_base = score_eval(psi, bundle.base, theta)
    out = np.mean(np.sum(s_base**2, axis=1))
    out += 2 * sum(score_partial2(psi, i) for i in range(theta.size))
    mean_base = s_base.mean(axis=0)
    eye = np.eye(theta.size)
    for i, pert in enumerate(bundle.perturbed):
        mean_pert = score_eval(psi, pert, theta + eta * eye[i])[:, i].mean()
        out -= 2 * (mean_pert - mean_base[i]) / eta
    return float(out)


class _Moments:
    """Sufficient statistics of a bundle for the linear-Gaussian family."""

    def __init__(self, bundle: PerturbationBundle) -> None:
        X, y = bundle.base.X, bundle.base.y
        n = X.shape[0]
        self.theta = bundle.theta
        self.eta = bundle.eta
        self.xbar = X.mean(axis=0)
        self.ybar = y.mean()
        self.xx = X.T @ X / n
        self.xy = X.T @ y / n
        self.yy = y @ y / n
        self.xbar_p = np.array([p.X.mean(axis=0) for p in bundle.perturbed])
        self.ybar_p = np.array([p.y.mean() for p in bundle.perturbed])

    def value_and_grad(self, p: Array) -> tuple[float, Array]:
        d = self.theta.size
        a, c, s2 = p[:d], p[d : 2 * d], np.exp(p[-1])
        eta = self.eta
        k = c @ self.theta
        P = c @ c
        m1 = self.ybar - a @ self.xbar - k
        xa = self.xx @ a
        m2 = self.yy - 2 * a @ self.xy - 2 * k * self.ybar + a @ xa + 2 * k * (a @ self.xbar) + k**2
        mean_rx = self.xy - xa - k * self.xbar
        diff = (self.ybar_p - self.xbar_p @ a - k - eta * c) - m1

        value = P * m2 / s2**2 - 2 * P / s2 - 2 / (eta * s2) * (c @ diff)
        grad_a = -2 * P / s2**2 * mean_rx - 2 / (eta * s2) * (c @ (self.xbar - self.xbar_p))
        grad_c = (
            2 * c * m2 / s2**2
            - 2 * P * m1 * self.theta / s2**2
            - 4 * c / s2
            - 2 / (eta * s2) * (diff - eta * c)
        )
        grad_log_s2 = -2 * P * m2 / s2**2 + 2 * P / s2 + 2 / (eta * s2) * (c @ diff)
        return float(value), np.concatenate([grad_a, grad_c, [grad_log_s2]])


def j_hat_grad(psi: ScoreModelParams, bundle: PerturbationBundle) -> tuple[float, Array]:
    """``j_hat`` and its gradient in (a, c, log s2)."""
    return _Moments(bundle).value_and_grad(psi._pack())


def fit_score_model(
    bundle: PerturbationBundle,
    init: ScoreModelParams,
    lr: float = DEFAULT_LR,
    iters: int = DEFAULT_ITERS,
    s2_min: float = S2_MIN,
) -> ScoreModelParams:
    """Full-batch gradient descent on ``j_hat`` over (a, c, log s2).

    A step that would increase the objective is halved until it does not, so
    the returned parameters never score worse than ``init``.
    """
    if not lr > 0:
        raise ValueError("lr must be positive")
    stats = _Moments(bundle)
    floor = np.log(s2_min)
    p = init._pack()
    p[-1] = max(p[-1], floor)
    value, grad = stats.value_and_grad(p)
    if not np.isfinite(value):
        raise NumericalError("score-matching objective is not finite at init")
    ceil = np.log(S2_MAX)
    for _ in range(iters):
        step = lr
        for _ in range(MAX_HALVINGS):
            cand = p - step * grad
            cand[-1] = min(max(cand[-1], floor), ceil)
            with np.errstate(over="ignore", invalid="ignore"):
                cand_value, cand_grad = stats.value_and_grad(cand)
            if np.isfinite(cand_value) and np.all(np.isfinite(cand_grad)) and cand_value <= value:
                break
            step *= 0.5
        else:
            break
        p, value, grad = cand, cand_value, cand_grad
    if not np.isfinite(value):
        raise NumericalError("score-matching objective diverged; eta may be too small for k")
    return ScoreModelParams._unpack(p)


def reported_j(psi: ScoreModelParams, bundle: PerturbationBundle, params: ModelParams) -> float:
    """``j_hat`` plus the empirical mean of ||true score||^2 (simulation only)."""
    true = mdl.log_score_analytic(params, bundle.base, bundle.theta)
    return j_hat(psi, bundle) + float(np.mean(np.sum(true**2, axis=1)))


def population_j(params: ModelParams, psi: ScoreModelParams, theta) -> float:
    """E_theta ||grad log p - s(psi)||^2 in closed form under the Gaussian model."""
    theta = np.asarray(theta, dtype=float)
    u = psi.c / psi.s2
    delta = params.alpha - psi.a
    kappa = (params.mu - psi.c) @ theta
    resid2 = params.sigma_y2 + delta @ params.second_moment @ delta + 2 * kappa * (delta @ params.mu_x) + kappa**2
    return float(params.mu @ params.mu / params.sigma_y2 - 2 * params.mu @ u + (u @ u) * resid2)


def grad_g_estimate(
    loss: LossModel, data_k: Dataset, theta_next, psi_hat: ScoreModelParams
) -> Array:
    """-H^-1 E_n[grad l(z; theta_next) s(z, theta_k; psi)^T] with theta_k = data_k.theta_source."""
    theta_next = np.asarray(theta_next, dtype=float)
    H = loss.mean_hessian(data_k.X, data_k.y, theta_next)
    if np.linalg.eigvalsh(0.5 * (H + H.T)).min() <= 0:
        raise SolverError("empirical Hessian is not positive definite")
    grads = loss.grads(data_k.X, data_k.y, theta_next)
    scores = score_eval(psi_hat, data_k, data_k.theta_source)
    cross = grads.T @ scores / len(data_k)
    return -np.linalg.solve(H, cross)
