"""Asymptotic covariance of repeated risk minimization and confidence regions.

The covariance of sqrt(n)(theta_hat_t - theta_t) is propagated through the
deployments as

    V_1 = Sigma_1,   V_j = gradG_{j-1} V_{j-1} gradG_{j-1}^T + Sigma_j,

where Sigma_j = H^-1 Cov(grad l) H^-1 is the sandwich block of step j and
gradG_j is the Jacobian of the population update at the j-th iterate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.stats import norm

from perfinf import model as mdl
from perfinf import score as sc
from perfinf.errors import ConfigError, NumericalError, SolverError
from perfinf.estimator import LossModel, Trajectory
from perfinf.model import Dataset, ModelParams

Array = NDArray[np.float64]

PSD_REPAIR_TOL = 1e-8
LAMBDA_MAX = 2.0
DEGENERATE_DENOM = 1e-12


# --------------------------------------------------------------------------
# sandwich blocks


def hessian_hat(loss: LossModel, data: Dataset, theta) -> Array:
    H = loss.mean_hessian(data.X, data.y, np.asarray(theta, dtype=float))
    return 0.5 * (H + H.T)


def grad_cov_hat(loss: LossModel, data: Dataset, theta) -> Array:
    """Sample covariance (divisor n-1) of per-sample gradients at ``theta``."""
    if len(data) < 2:
        raise ValueError("need at least two samples for a covariance")
    g = loss.grads(data.X, data.y, np.asarray(theta, dtype=float))
    return np.atleast_2d(np.cov(g, rowvar=False))


def _inv_spd(H: Array) -> Array:
    H = np.asarray(H, dtype=float)
    if not np.allclose(H, H.T, atol=1e-10) or np.linalg.eigvalsh(0.5 * (H + H.T)).min() <= 0:
        raise SolverError("Hessian is not symmetric positive definite")
    return np.linalg.inv(H)


def sandwich(H: Array, Vg: Array) -> Array:
    """H^-1 Vg H^-1, symmetrized."""
    Hinv = _inv_spd(H)
    out = Hinv @ Vg @ Hinv
    return 0.5 * (out + out.T)


def repair_psd(V: Array, tol: float = PSD_REPAIR_TOL) -> Array:
    """Symmetrize and clip round-off negative eigenvalues; real negativity is an error."""
    V = 0.5 * (V + V.T)
    eig, vec = np.linalg.eigh(V)
    if eig.min() >= 0:
        return V
    if eig.min() < -tol:
        raise NumericalError(f"covariance has eigenvalue {eig.min():.3g} < -{tol}")
    return (vec * np.clip(eig, 0, None)) @ vec.T


def vt_path(sigmas: Sequence[Array], gradGs: Sequence[Array]) -> list[Array]:
    """All of V_1..V_t from t sandwich blocks and t-1 Jacobians."""
    if len(sigmas) < 1 or len(gradGs) != len(sigmas) - 1:
        raise ValueError(f"need t sigmas and t-1 Jacobians, got {len(sigmas)} and {len(gradGs)}")
    d = np.asarray(sigmas[0]).shape[0]
    for m in list(sigmas) + list(gradGs):
        if np.asarray(m).shape != (d, d):
            raise ValueError(f"expected {d}x{d} matrices, got {np.asarray(m).shape}")
    path = [np.asarray(sigmas[0], dtype=float)]
    for G, S in zip(gradGs, sigmas[1:]):
        path.append(G @ path[-1] @ G.T + S)
    return path


def vt_recursion(sigmas: Sequence[Array], gradGs: Sequence[Array]) -> Array:
    return vt_path(sigmas, gradGs)[-1]


# --------------------------------------------------------------------------
# variance of a trajectory


@dataclass
class ScoreConfig:
    """Where the Jacobians of G come from.

    ``mode="oracle"`` uses the analytic Jacobian of the model; ``"fitted"``
    fits the score model on freshly perturbed samples at each iterate.
    ``k=None`` means k equals the step's labeled sample size.
    """

    mode: str = "oracle"
    eta: float = sc.DEFAULT_ETA
    k: int | None = None
    lr: float = sc.DEFAULT_LR
    iters: int = sc.DEFAULT_ITERS
    s2_min: float = sc.S2_MIN

    def __post_init__(self) -> None:
        if self.mode not in {"oracle", "fitted"}:
            raise ConfigError(f"score mode must be 'oracle' or 'fitted', got {self.mode!r}")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {"mode": self.mode, "eta": self.eta, "k": self.k, "lr": self.lr, "iters": self.iters}


@dataclass
class StepBlocks:
    H_hat: Array
    Vgrad_hat: Array
    sigma_hat: Array
    gradG_hat: Array | None = None
    psi_hat: sc.ScoreModelParams | None = None
    j_value: float | None = None
    Vf_hat: Array | None = None
    Vlam_hat: Array | None = None
    lam: float | None = None
    r: float | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for key, val in self.__dict__.items():
            if val is None:
                continue
            if isinstance(val, np.ndarray):
                out[key] = val.tolist()
            elif isinstance(val, sc.ScoreModelParams):
                out[key] = val.to_dict()
            else:
                out[key] = val
        return out


@dataclass
class VarianceEstimate:
    per_step: list[StepBlocks]
    V_t: Array
    t: int
    n: int
    V_path: list[Array] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "n": self.n,
            "V_t": self.V_t.tolist(),
            "V_path": [v.tolist() for v in self.V_path],
            "per_step": [b.to_dict() for b in self.per_step],
        }


@dataclass
class PpiVarianceEstimate(VarianceEstimate):
    r: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        out = super().to_dict()
        out["r"] = self.r
        return out


def initial_score_params(bundle: sc.PerturbationBundle) -> sc.ScoreModelParams:
    """Data-driven start: least-squares slope for a, c = 0, residual variance for s2."""
    X, y = bundle.base.X, bundle.base.y
    design = np.column_stack([X, np.ones(len(y))])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    s2 = max(float(resid @ resid) / max(len(y) - design.shape[1], 1), sc.S2_MIN)
    return sc.ScoreModelParams(coef[:-1], np.zeros(X.shape[1]), s2)


def _jacobians(
    trajectory: Trajectory,
    loss: LossModel,
    score_cfg: ScoreConfig,
    params: ModelParams | None,
    rng: np.random.Generator | None,
    t: int,
) -> list[tuple[Array, sc.ScoreModelParams | None, float | None]]:
    """Estimated Jacobians of G at theta_hat_1..theta_hat_{t-1}."""
    if params is None:
        raise ConfigError("a ModelParams handle is required for oracle Jacobians and for sampling")
    out = []
    if score_cfg.mode == "oracle":
        G = mdl.grad_g_analytic(params)
        return [(G.copy(), None, None) for _ in range(t - 1)]
    if rng is None:
        raise ConfigError("fitted score mode needs a random stream for perturbed sampling")
    for i in range(1, t):
        # data drawn under theta_hat_i, fit to theta_hat_{i+1}
        data = trajectory.steps[i].dataset
        theta_k = data.theta_source
        k = score_cfg.k or len(data)
        bundle = sc.collect_perturbed(params, theta_k, score_cfg.eta, len(data), k, rng, base=data)
        psi = sc.fit_score_model(
            bundle, initial_score_params(bundle), score_cfg.lr, score_cfg.iters, score_cfg.s2_min
        )
        G = sc.grad_g_estimate(loss, data, trajectory.steps[i].theta_hat, psi)
        out.append((G, psi, sc.j_hat(psi, bundle)))
    return out


def _check_depth(trajectory: Trajectory, t: int | None) -> int:
    t = len(trajectory) if t is None else t
    if not 1 <= t <= len(trajectory):
        raise ValueError(f"t must lie in [1, {len(trajectory)}], got {t}")
    return t


def _finish(per_step, jac, t, n, cls=VarianceEstimate, **extra):
    for block, (G, psi, jv) in zip(per_step, jac):
        block.gradG_hat, block.psi_hat, block.j_value = G, psi, jv
    path = vt_path([b.sigma_hat for b in per_step], [j[0] for j in jac])
    path = [repair_psd(v) for v in path]
    return cls(per_step=per_step, V_t=path[-1], t=t, n=n, V_path=path, **extra)


def estimate_variance(
    trajectory: Trajectory,
    loss: LossModel,
    score_cfg: ScoreConfig | None = None,
    params: ModelParams | None = None,
    rng: np.random.Generator | None = None,
    t: int | None = None,
) -> VarianceEstimate:
    """Plug-in estimate of V_t for a classical trajectory."""
    score_cfg = score_cfg or ScoreConfig()
    t = _check_depth(trajectory, t)
    per_step = []
    for step in trajectory.steps[:t]:
        H = hessian_hat(loss, step.dataset, step.theta_hat)
        Vg = grad_cov_hat(loss, step.dataset, step.theta_hat)
        per_step.append(StepBlocks(H, Vg, sandwich(H, Vg)))
    jac = _jacobians(trajectory, loss, score_cfg, params, rng, t)
    return _finish(per_step, jac, t, len(trajectory.steps[0].dataset))


# --------------------------------------------------------------------------
# prediction-powered blocks


def ppi_blocks(
    loss: LossModel,
    labeled: Dataset,
    labeled_pseudo: Dataset,
    unlabeled_pseudo: Dataset,
    theta,
) -> tuple[Array, Array, Array, Array]:
    """(C_gg, C_ff, C_gf, Cu_ff): gradient covariances for the PPI sandwich.

    g are gradients on the true labels, f on the pseudo-labels at the same
    features, and the last block is computed on the unlabeled pool.
    """
    theta = np.asarray(theta, dtype=float)
    g = loss.grads(labeled.X, labeled.y, theta)
    f = loss.grads(labeled_pseudo.X, labeled_pseudo.y, theta)
    fu = loss.grads(unlabeled_pseudo.X, unlabeled_pseudo.y, theta)
    if len(g) < 2 or len(fu) < 2:
        raise ValueError("need at least two samples in each pool")
    d = g.shape[1]
    joint = np.atleast_2d(np.cov(np.hstack([g, f]), rowvar=False))
    return joint[:d, :d], joint[d:, d:], joint[:d, d:], np.atleast_2d(np.cov(fu, rowvar=False))


def _ppi_parts(C_gg, C_ff, C_gf, Cu_ff, lam, r):
    Vf = lam**2 * Cu_ff
    Vlam = C_gg - lam * (C_gf + C_gf.T) + lam**2 * C_ff
    return Vf, Vlam, r * Vf + Vlam


def ppi_sigma(H, C_gg, C_ff, C_gf, Cu_ff, lam: float, r: float) -> Array:
    """H^-1 (r lam^2 Cu_ff + C_gg - lam (C_gf + C_gf^T) + lam^2 C_ff) H^-1."""
    return sandwich(H, _ppi_parts(C_gg, C_ff, C_gf, Cu_ff, lam, r)[2])


def scalarize(M: Array, F: str) -> float:
    if F == "trace":
        return float(np.trace(M))
    if F == "sum":
        return float(np.sum(M))
    raise ConfigError(f"unknown scalarization {F!r}")


def lambda_quadratic(H, C_gg, C_ff, C_gf, Cu_ff, r: float, F: str = "trace") -> tuple[float, float, float]:
    """Coefficients (q0, q1, q2) with F(Sigma_lam) = q0 - q1 lam + q2 lam^2."""
    Hinv = _inv_spd(H)
    q0 = scalarize(Hinv @ C_gg @ Hinv, F)
    q1 = scalarize(Hinv @ (C_gf + C_gf.T) @ Hinv, F)
    q2 = scalarize(Hinv @ (r * Cu_ff + C_ff) @ Hinv, F)
    return q0, q1, q2


def select_lambda(
    H, C_gg, C_ff, C_gf, Cu_ff, r: float, F: str = "trace", lambda_max: float = LAMBDA_MAX
) -> float:
    """Greedy PPI weight: argmin over [0, lambda_max] of F(Sigma_lam)."""
    _, q1, q2 = lambda_quadratic(H, C_gg, C_ff, C_gf, Cu_ff, r, F)
    if q2 <= DEGENERATE_DENOM:
        return 0.0
    return float(np.clip(q1 / (2 * q2), 0.0, lambda_max))


def estimate_variance_ppi(
    trajectory: Trajectory,
    loss: LossModel,
    score_cfg: ScoreConfig | None = None,
    r: float | None = None,
    params: ModelParams | None = None,
    rng: np.random.Generator | None = None,
    t: int | None = None,
) -> PpiVarianceEstimate:
    """Plug-in V_t for a prediction-powered trajectory with its recorded lambdas.

    ``r`` defaults to n/N of the first step.
    """
    score_cfg = score_cfg or ScoreConfig()
    t = _check_depth(trajectory, t)
    first = trajectory.steps[0]
    if first.pseudo_labeled is None or first.pseudo_unlabeled is None:
        raise ValueError("trajectory carries no pseudo-labeled data")
    if r is None:
        r = len(first.dataset) / len(first.pseudo_unlabeled)
    per_step = []
    for step in trajectory.steps[:t]:
        lam = float(step.lam or 0.0)
        H = hessian_hat(loss, step.dataset, step.theta_hat)
        C_gg, C_ff, C_gf, Cu_ff = ppi_blocks(
            loss, step.dataset, step.pseudo_labeled, step.pseudo_unlabeled, step.theta_hat
        )
        Vf, Vlam, Vtot = _ppi_parts(C_gg, C_ff, C_gf, Cu_ff, lam, r)
        per_step.append(
            StepBlocks(H, Vtot, sandwich(H, Vtot), Vf_hat=Vf, Vlam_hat=Vlam, lam=lam, r=r)
        )
    jac = _jacobians(trajectory, loss, score_cfg, params, rng, t)
    return _finish(per_step, jac, t, len(first.dataset), cls=PpiVarianceEstimate, r=float(r))


# --------------------------------------------------------------------------
# confidence regions


@dataclass
class ConfidenceRegion:
    """Axis-aligned box; ``inflation_radius`` > 0 for bias-adjusted regions."""

    lower: Array
    upper: Array
    delta: float
    inflation_radius: float = 0.0

    def __post_init__(self) -> None:
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def widths(self) -> Array:
        return self.upper - self.lower

    @property
    def mean_width(self) -> float:
        return float(self.widths.mean())

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all((self.lower <= theta) & (theta <= self.upper)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "delta": self.delta,
            "inflation_radius": self.inflation_radius,
        }


def bonferroni_quantile(delta: float, d: int) -> float:
    return float(norm.ppf(1 - delta / (2 * d)))


def ci_coordinates(theta_hat, V_hat, n: int, delta: float) -> ConfidenceRegion:
    """Simultaneous Bonferroni intervals theta_j +- z_{1-delta/(2d)} sqrt(V_jj / n)."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    theta_hat = np.asarray(theta_hat, dtype=float)
    diag = np.diag(np.asarray(V_hat, dtype=float))
    if np.any(diag < 0):
        raise ValueError("covariance diagonal must be nonnegative")
    half = bonferroni_quantile(delta, theta_hat.size) * np.sqrt(diag / n)
    return ConfidenceRegion(theta_hat - half, theta_hat + half, delta)


def bias_radius(B: float, eps: float, beta: float, gamma: float, t: int) -> float:
    """2 B (eps beta / gamma)^t, the deterministic gap between theta_t and theta_PS."""
    if B < 0 or gamma <= 0:
        raise ValueError("need B >= 0 and gamma > 0")
    return float(2 * B * (eps * beta / gamma) ** t)


def ps_region(region: ConfidenceRegion, radius: float) -> ConfidenceRegion:
    """Widen every interval by ``radius`` on both ends."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    return ConfidenceRegion(
        region.lower - radius, region.upper + radius, region.delta, region.inflation_radius + radius
    )


def b_bound_feasible(grad_sup: float, gamma: float, theta0_norm: float) -> float:
    """Data-free bound on ||theta_PS|| from strong convexity: grad_sup/gamma + ||theta_0||."""
    return float(grad_sup / gamma + theta0_norm)


def ridge_grad_sup(params: ModelParams, theta0, theta_bound: float) -> float:
    """Upper bound on sup_z ||grad l(z; theta0)|| over the truncated domain."""
    theta0 = np.asarray(theta0, dtype=float)
    r = np.sqrt(params.trunc_r2)
    t0 = float(np.linalg.norm(theta0))
    return float(r * (r * t0 + mdl.y_bound(params, theta_bound)) + params.gamma * t0)


def mahalanobis_sq(theta_hat, theta, V: Array, n: int) -> float:
    """n (theta_hat - theta)^T V^-1 (theta_hat - theta)."""
    diff = np.asarray(theta_hat, dtype=float) - np.asarray(theta, dtype=float)
    try:
        return float(n * diff @ np.linalg.solve(V, diff))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("estimated covariance is singular") from exc
