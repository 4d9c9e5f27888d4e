"""Empirical and prediction-powered risk minimization, and trajectory runners."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray

from perfinf import model as mdl
from perfinf.errors import ConfigError, SolverError
from perfinf.model import Dataset, LabeledSample, ModelParams

Array = NDArray[np.float64]

ARMIJO_C = 1e-4
BACKTRACK = 0.5
MAX_NEWTON_STEPS = 200
MIN_HESSIAN_EIG = 1e-8
DEFAULT_TOL = 1e-9


class LossModel(ABC):
    """Per-sample loss l(z; theta) with gradient and Hessian in theta.

    Subclasses implement the batched methods; the per-sample methods wrap them.
    """

    @abstractmethod
    def values(self, X: Array, y: Array, theta: Array) -> Array:
        """Loss of every row, shape (n,)."""

    @abstractmethod
    def grads(self, X: Array, y: Array, theta: Array) -> Array:
        """Gradient of every row, shape (n, d)."""

    @abstractmethod
    def hessians(self, X: Array, y: Array, theta: Array) -> Array:
        """Hessian of every row, shape (n, d, d)."""

    def mean_hessian(self, X: Array, y: Array, theta: Array) -> Array:
        return self.hessians(X, y, theta).mean(axis=0)

    def value(self, z: LabeledSample, theta) -> float:
        return float(self.values(np.atleast_2d(z.x), np.atleast_1d(z.y), np.asarray(theta))[0])

    def grad(self, z: LabeledSample, theta) -> Array:
        return self.grads(np.atleast_2d(z.x), np.atleast_1d(z.y), np.asarray(theta))[0]

    def hessian(self, z: LabeledSample, theta) -> Array:
        return self.hessians(np.atleast_2d(z.x), np.atleast_1d(z.y), np.asarray(theta))[0]


@dataclass(frozen=True)
class RidgeSquaredLoss(LossModel):
    """l((x, y); theta) = (y - theta@x)^2 / 2 + gamma/2 ||theta||^2."""

    gamma: float

    def values(self, X, y, theta):
        theta = np.asarray(theta, dtype=float)
        return 0.5 * (y - X @ theta) ** 2 + 0.5 * self.gamma * (theta @ theta)

    def grads(self, X, y, theta):
        theta = np.asarray(theta, dtype=float)
        return X * (X @ theta - y)[:, None] + self.gamma * theta

    def hessians(self, X, y, theta):
        d = X.shape[1]
        return np.einsum("ni,nj->nij", X, X) + self.gamma * np.eye(d)

    def mean_hessian(self, X, y, theta):
        return X.T @ X / X.shape[0] + self.gamma * np.eye(X.shape[1])


# A weighted empirical objective: sum_k w_k * mean_i l(X_k[i], y_k[i]; theta).
Terms = Sequence[tuple[float, Array, Array]]


def _objective(loss: LossModel, terms: Terms, theta: Array) -> float:
    return float(sum(w * loss.values(X, y, theta).mean() for w, X, y in terms))


def _gradient(loss: LossModel, terms: Terms, theta: Array) -> Array:
    return sum(w * loss.grads(X, y, theta).mean(axis=0) for w, X, y in terms)


def _hessian(loss: LossModel, terms: Terms, theta: Array) -> Array:
    return sum(w * loss.mean_hessian(X, y, theta) for w, X, y in terms)


def _require_spd(H: Array, what: str) -> None:
    eig = np.linalg.eigvalsh(0.5 * (H + H.T)).min()
    if eig < MIN_HESSIAN_EIG:
        raise SolverError(
            f"{what} is not positive definite (min eigenvalue {eig:.3g}); the loss is "
            "not strongly convex on this data or the weighting is invalid"
        )


def newton_solve(loss: LossModel, terms: Terms, init: Array, tol: float = DEFAULT_TOL) -> Array:
    """Damped Newton with Armijo backtracking on a weighted empirical objective."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    theta = np.array(init, dtype=float)
    for _ in range(MAX_NEWTON_STEPS + 1):
        g = _gradient(loss, terms, theta)
        if np.linalg.norm(g) <= tol:
            return theta
        H = _hessian(loss, terms, theta)
        _require_spd(H, "empirical Hessian")
        step = -np.linalg.solve(H, g)
        f0 = _objective(loss, terms, theta)
        slope = g @ step
        t = 1.0
        while t > 1e-12:
            cand = theta + t * step
            if _objective(loss, terms, cand) <= f0 + ARMIJO_C * t * slope:
                break
            t *= BACKTRACK
        else:
            # no sufficient decrease; take the full step and let the gradient test decide
            cand = theta + step
        theta = cand
    raise SolverError(f"Newton did not converge in {MAX_NEWTON_STEPS} steps")


def _closed_form_ridge(gamma: float, terms: Terms) -> Array:
    d = terms[0][1].shape[1]
    A = sum(w * X.T @ X / X.shape[0] for w, X, _ in terms)
    A = A + sum(w for w, _, _ in terms) * gamma * np.eye(d)
    b = sum(w * X.T @ y / X.shape[0] for w, X, y in terms)
    _require_spd(A, "empirical Hessian")
    return np.linalg.solve(A, b)


def _solve_terms(loss: LossModel, terms: Terms, init, tol: float, method: str) -> Array:
    if tol <= 0:
        raise ValueError("tol must be positive")
    d = terms[0][1].shape[1]
    start = np.zeros(d) if init is None else np.asarray(init, dtype=float)
    if method not in {"auto", "closed_form", "newton"}:
        raise ValueError(f"unknown method {method!r}")
    if method == "newton" or not isinstance(loss, RidgeSquaredLoss):
        if method == "closed_form":
            raise ValueError("closed form is only available for RidgeSquaredLoss")
        return newton_solve(loss, terms, start, tol)
    theta = _closed_form_ridge(loss.gamma, terms)
    if np.linalg.norm(_gradient(loss, terms, theta)) > tol:
        # round-off on an ill-conditioned system; polish
        theta = newton_solve(loss, terms, theta, tol)
    return theta


def erm_solve(
    loss: LossModel, data: Dataset, init=None, tol: float = DEFAULT_TOL, method: str = "auto"
) -> Array:
    """argmin_theta of the mean loss over ``data``.

    ``method="auto"`` uses the normal equations for the ridge loss and damped
    Newton otherwise. The returned point has mean-gradient norm <= ``tol``.
    """
    return _solve_terms(loss, [(1.0, data.X, data.y)], init, tol, method)


def ppi_solve(
    loss: LossModel,
    labeled: Dataset,
    labeled_pseudo: Dataset,
    unlabeled_pseudo: Dataset,
    lam: float,
    init=None,
    tol: float = DEFAULT_TOL,
    method: str = "auto",
) -> Array:
    """Minimize the prediction-powered objective

        lam * mean_u l(x_u, f(x_u)) + mean_i [l(x_i, y_i) - lam * l(x_i, f(x_i))].

    ``labeled_pseudo`` must carry the same features as ``labeled`` in the
    same order.
    """
    if labeled_pseudo.X.shape != labeled.X.shape or not np.array_equal(labeled_pseudo.X, labeled.X):
        raise ValueError("labeled and labeled_pseudo must share their features")
    lam = float(lam)
    if lam == 0.0:
        terms = [(1.0, labeled.X, labeled.y)]
    else:
        terms = [
            (lam, unlabeled_pseudo.X, unlabeled_pseudo.y),
            (1.0, labeled.X, labeled.y),
            (-lam, labeled_pseudo.X, labeled_pseudo.y),
        ]
    try:
        return _solve_terms(loss, terms, init, tol, method)
    except SolverError as exc:
        raise SolverError(f"invalid lambda={lam}: {exc}") from exc


@dataclass
class TrajectoryStep:
    theta_hat: Array
    dataset: Dataset
    pseudo_labeled: Dataset | None = None
    pseudo_unlabeled: Dataset | None = None
    lam: float | None = None


@dataclass
class Trajectory:
    """theta_0 -> theta_hat_1 -> ... with the data each step was fit on.

    ``steps[t].dataset`` was drawn under the previous iterate (``theta0`` for
    the first step).
    """

    theta0: Array
    steps: list[TrajectoryStep] = field(default_factory=list)
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def thetas(self) -> Array:
        return np.array([s.theta_hat for s in self.steps])

    @property
    def lambdas(self) -> list[float | None]:
        return [s.lam for s in self.steps]

    def previous(self, t: int) -> Array:
        """Iterate deployed before step ``t`` (0-based), i.e. theta_hat_t."""
        return self.theta0 if t == 0 else self.steps[t - 1].theta_hat

    def check_chaining(self) -> bool:
        return all(np.array_equal(s.dataset.theta_source, self.previous(t)) for t, s in enumerate(self.steps))

    def to_dict(self, include_data: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "seed": self.seed,
            "theta0": self.theta0.tolist(),
            "thetas": self.thetas.tolist(),
            "lambdas": self.lambdas,
        }
        if include_data:
            steps = []
            for s in self.steps:
                entry = {"dataset": s.dataset.to_dict()}
                if s.pseudo_labeled is not None:
                    entry["pseudo_labeled"] = s.pseudo_labeled.to_dict()
                if s.pseudo_unlabeled is not None:
                    entry["pseudo_unlabeled"] = s.pseudo_unlabeled.to_dict()
                steps.append(entry)
            out["steps"] = steps
        return out


def rrm_trajectory(
    params: ModelParams,
    loss: LossModel,
    theta0,
    T: int,
    n: int,
    rng: np.random.Generator,
    tol: float = DEFAULT_TOL,
) -> Trajectory:
    """Repeated empirical risk minimization for T deployments."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if n < params.d + 1:
        raise ValueError(f"n must be at least d+1 = {params.d + 1}")
    traj = Trajectory(np.asarray(theta0, dtype=float).copy())
    prev = traj.theta0
    for _ in range(T):
        data = mdl.sample_labeled(params, prev, n, rng)
        theta = erm_solve(loss, data, init=prev, tol=tol)
        traj.steps.append(TrajectoryStep(theta, data))
        prev = theta
    return traj


@dataclass(frozen=True)
class LambdaPolicy:
    """How the PPI weight is chosen at each step.

    kind is ``"zero"``, ``"fixed"`` (uses ``value``) or ``"greedy"``
    (minimizes ``scalarization`` of the current step's covariance block).
    """

    kind: str
    value: float = 0.0
    scalarization: str = "trace"
    lambda_max: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in {"zero", "fixed", "greedy"}:
            raise ConfigError(f"unknown lambda policy {self.kind!r}")
        if self.scalarization not in {"trace", "sum"}:
            raise ConfigError(f"unknown scalarization {self.scalarization!r}")

    @classmethod
    def zero(cls) -> LambdaPolicy:
        return cls("zero")

    @classmethod
    def fixed(cls, value: float) -> LambdaPolicy:
        return cls("fixed", float(value))

    @classmethod
    def greedy(cls, scalarization: str = "trace", lambda_max: float = 2.0) -> LambdaPolicy:
        return cls("greedy", scalarization=scalarization, lambda_max=lambda_max)

    @classmethod
    def parse(cls, spec: str | dict) -> LambdaPolicy:
        """Accepts ``"zero"``, ``"fixed:0.5"``, ``"greedy"``, ``"greedy:sum"`` or a dict."""
        if isinstance(spec, dict):
            return cls(**spec)
        head, _, arg = str(spec).strip().lower().partition(":")
        if head == "zero":
            return cls.zero()
        if head == "fixed":
            try:
                return cls.fixed(float(arg))
            except ValueError:
                raise ConfigError(f"fixed policy needs a numeric lambda, got {spec!r}") from None
        if head == "greedy":
            return cls.greedy(arg or "trace")
        raise ConfigError(f"unknown lambda policy {spec!r}")

    def __str__(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.value:g}"
        if self.kind == "greedy" and self.scalarization != "trace":
            return f"greedy:{self.scalarization}"
        return self.kind


def ppi_trajectory(
    params: ModelParams,
    loss: LossModel,
    theta0,
    T: int,
    n: int,
    N: int,
    policy: LambdaPolicy,
    rng: np.random.Generator,
    tol: float = DEFAULT_TOL,
) -> Trajectory:
    """Prediction-powered repeated risk minimization.

    Labeled data come from ``rng`` itself, exactly as in ``rrm_trajectory``;
    the unlabeled pool and the annotations use streams spawned from it, so
    the Zero policy reproduces the classical trajectory for the same seed.
    """
    from perfinf import inference

    if T < 1:
        raise ValueError("T must be at least 1")
    if n < params.d + 1 or N < 1:
        raise ValueError("need n >= d+1 labeled and N >= 1 unlabeled samples")
    unl_rng, ann_rng = rng.spawn(2)
    r = n / N
    traj = Trajectory(np.asarray(theta0, dtype=float).copy())
    prev = traj.theta0
    for _ in range(T):
        labeled = mdl.sample_labeled(params, prev, n, rng)
        Xu = mdl.sample_unlabeled(params, prev, N, unl_rng)
        pseudo_l = Dataset(labeled.X, mdl.annotate(params, prev, labeled.X, ann_rng), prev.copy())
        pseudo_u = Dataset(Xu, mdl.annotate(params, prev, Xu, ann_rng), prev.copy())

        if policy.kind == "zero":
            lam = 0.0
        elif policy.kind == "fixed":
            lam = policy.value
        else:
            surrogate = ppi_solve(loss, labeled, pseudo_l, pseudo_u, 0.0, init=prev, tol=tol)
            H = inference.hessian_hat(loss, labeled, surrogate)
            blocks = inference.ppi_blocks(loss, labeled, pseudo_l, pseudo_u, surrogate)
            lam = inference.select_lambda(
                H, *blocks, r=r, F=policy.scalarization, lambda_max=policy.lambda_max
            )
        theta = ppi_solve(loss, labeled, pseudo_l, pseudo_u, lam, init=prev, tol=tol)
        traj.steps.append(TrajectoryStep(theta, labeled, pseudo_l, pseudo_u, float(lam)))
        prev = theta
    return traj
