"""Charting statistics T0-T3 and their mean square errors.

T0  sample mean of y.
T1  regression estimator  y_bar + b (mu_x - x_bar),  b = r_xy s_y / s_x.
T2  ratio-product exponential estimator
        y_bar (alpha exp((mu_x - x_bar)/(mu_x + x_bar))
               + (1 - alpha) exp((x_bar - mu_x)/(x_bar + mu_x)))
T3  difference-cum-exponential estimator
        (T2' + w1 (mu_x - x_bar) + w2 y_bar) exp((mu_x - x_bar)/(mu_x + x_bar))
    where T2' is the T2 expression evaluated with its own mixing weight
    ``alpha_t3`` (equal to T2's alpha except under the exact-minimizer source).

All weights are computed from known process parameters (standards known).
Throughout, lambda = 1 / n (infinite population).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .errors import DegenerateSubgroupError, EstimatorDomainError, NearSingularError
from .process import ProcessParameters, Subgroup, _check_n


class EstimatorKind(str, Enum):
    T0 = "T0"
    T1 = "T1"
    T2 = "T2"
    T3 = "T3"

    def __str__(self) -> str:
        return self.value

    @property
    def needs_slope(self) -> bool:
        return self is EstimatorKind.T1

    @property
    def needs_weights(self) -> bool:
        return self in (EstimatorKind.T2, EstimatorKind.T3)


ALL_KINDS = (EstimatorKind.T0, EstimatorKind.T1, EstimatorKind.T2, EstimatorKind.T3)


class WeightSource(str, Enum):
    PRINTED = "printed-formula"
    QUADRATIC = "quadratic-minimizer"
    EXACT = "exact-minimizer"

    def __str__(self) -> str:
        return self.value


DEFAULT_WEIGHT_SOURCE = WeightSource.EXACT


@dataclass(frozen=True)
class SubgroupStats:
    y_bar: float
    x_bar: float
    s_y: float
    s_x: float
    r_xy: float  # nan when either standard deviation is zero

    @property
    def r_defined(self) -> bool:
        return not math.isnan(self.r_xy)

    @property
    def slope(self) -> float:
        """Least-squares slope b = r_xy * s_y / s_x (0 when y is constant)."""
        if self.s_x == 0:
            raise DegenerateSubgroupError("s_x = 0: regression slope undefined")
        if self.s_y == 0:
            return 0.0
        return self.r_xy * self.s_y / self.s_x


def subgroup_stats(g: Subgroup) -> SubgroupStats:
    y, x = g.y, g.x
    y_bar, x_bar = float(y.mean()), float(x.mean())
    dy, dx = y - y_bar, x - x_bar
    syy, sxx, sxy = float(dy @ dy), float(dx @ dx), float(dx @ dy)
    s_y = math.sqrt(syy / (g.n - 1))
    s_x = math.sqrt(sxx / (g.n - 1))
    if syy == 0 or sxx == 0:
        r = math.nan
    else:
        r = max(-1.0, min(1.0, sxy / math.sqrt(syy * sxx)))
    return SubgroupStats(y_bar, x_bar, s_y, s_x, r)


@dataclass(frozen=True)
class EstimatorWeights:
    alpha: float
    w1: float
    w2: float
    source: WeightSource
    alpha_t3: float

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "w1": self.w1,
            "w2": self.w2,
            "alpha_t3": self.alpha_t3,
            "source": self.source.value,
        }


# ---------------------------------------------------------------- statistics


def _exponent(x_bar, mu_x):
    denom = mu_x + x_bar
    if np.any(np.asarray(denom) <= 0):
        raise EstimatorDomainError("x_bar + mu_x must be positive for T2/T3")
    return (mu_x - x_bar) / denom


def t0(stats: SubgroupStats) -> float:
    return stats.y_bar


def t1(stats: SubgroupStats, params: ProcessParameters) -> float:
    return stats.y_bar + stats.slope * (params.mu_x - stats.x_bar)


def _t2_value(y_bar, x_bar, mu_x, alpha):
    g = np.exp(_exponent(x_bar, mu_x))
    return y_bar * (alpha * g + (1.0 - alpha) / g)


def t2(stats: SubgroupStats, params: ProcessParameters, weights: EstimatorWeights) -> float:
    return float(_t2_value(stats.y_bar, stats.x_bar, params.mu_x, weights.alpha))


def _t3_value(y_bar, x_bar, mu_x, weights: EstimatorWeights):
    g = np.exp(_exponent(x_bar, mu_x))
    inner = y_bar * (weights.alpha_t3 * g + (1.0 - weights.alpha_t3) / g)
    return (inner + weights.w1 * (mu_x - x_bar) + weights.w2 * y_bar) * g


def t3(stats: SubgroupStats, params: ProcessParameters, weights: EstimatorWeights) -> float:
    return float(_t3_value(stats.y_bar, stats.x_bar, params.mu_x, weights))


def statistic(
    kind: EstimatorKind,
    stats: SubgroupStats,
    params: ProcessParameters,
    weights: EstimatorWeights | None = None,
) -> float:
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.T0:
        return t0(stats)
    if kind is EstimatorKind.T1:
        return t1(stats, params)
    if weights is None:
        raise ValueError(f"{kind} needs EstimatorWeights")
    if kind is EstimatorKind.T2:
        return t2(stats, params, weights)
    return t3(stats, params, weights)


def evaluate(
    kind: EstimatorKind,
    y_bar: np.ndarray,
    x_bar: np.ndarray,
    slope: np.ndarray | None,
    params: ProcessParameters,
    weights: EstimatorWeights | None = None,
) -> np.ndarray:
    """Vectorised statistic from per-subgroup means (and slopes for T1)."""
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.T0:
        return np.asarray(y_bar, dtype=float)
    if kind is EstimatorKind.T1:
        if slope is None:
            raise ValueError("T1 needs per-subgroup slopes")
        return y_bar + slope * (params.mu_x - x_bar)
    if weights is None:
        raise ValueError(f"{kind} needs EstimatorWeights")
    if kind is EstimatorKind.T2:
        return _t2_value(y_bar, x_bar, params.mu_x, weights.alpha)
    return _t3_value(y_bar, x_bar, params.mu_x, weights)


def moments_from_pairs(y: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise (y_bar, x_bar, slope, degenerate mask) for arrays of shape (k, n).

    Rows with zero spread in x get slope nan and are flagged degenerate.
    """
    y_bar = y.mean(axis=1)
    x_bar = x.mean(axis=1)
    dx = x - x_bar[:, None]
    sxx = np.einsum("ij,ij->i", dx, dx)
    sxy = np.einsum("ij,ij->i", dx, y - y_bar[:, None])
    degenerate = sxx == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(degenerate, np.nan, sxy / np.where(degenerate, 1.0, sxx))
    return y_bar, x_bar, slope, degenerate


# ---------------------------------------------------------------- weights


def alpha_opt(params: ProcessParameters) -> float:
    """First-order optimal T2 mixing weight, 1/2 + rho C_y / C_x."""
    return 0.5 + params.rho_xy * params.cv_y / params.cv_x


def _printed_weights(params: ProcessParameters, n: int) -> tuple[float, float]:
    lam = 1.0 / n
    cy, cx, rho = params.cv_y, params.cv_x, params.rho_xy
    denom = 4.0 * params.mu_x * cx * (-1.0 + lam * (-1.0 + rho * rho) * cy * cy)
    if denom == 0:
        raise NearSingularError("printed weight denominator vanishes")
    w1 = params.mu_y * (
        -4.0 * rho * cy
        + cx * (2.0 - lam * cx * cx + lam * rho * cy * cx + 2.0 * lam * (-1.0 + rho * rho)) * cy * cy
    ) / denom
    w2 = lam * (cx * cx - 4.0 * (-1.0 + rho * rho) * cy * cy) / denom
    return w1, w2


def first_order_normal_equations(
    params: ProcessParameters, n: int, alpha: float
) -> tuple[np.ndarray, np.ndarray]:
    """2x2 system M w = rhs whose solution minimises the first-order MSE of T3.

    Entries are the expectations of products of Q = (mu_x - x_bar) g,
    R = y_bar g and P = T2'(alpha) g - mu_y, expanded to second order in the
    relative errors of (y_bar, x_bar), with g the exponential factor.
    """
    lam = 1.0 / n
    cy, cx, rho = params.cv_y, params.cv_x, params.rho_xy
    X, Y = params.mu_x, params.mu_y
    qq = cx * cx * X * X * lam
    qr = cx * X * Y * lam * (cx - cy * rho)
    rr = Y * Y * (1.0 + lam * (cx * cx - 2.0 * cx * cy * rho + cy * cy))
    qp = cx * X * Y * lam * (cx * alpha - cy * rho)
    rp = Y * Y * lam * (3.0 * cx * cx * alpha - 4.0 * cx * cy * alpha * rho - cx * cy * rho + 2.0 * cy * cy) / 2.0
    return np.array([[qq, qr], [qr, rr]]), -np.array([qp, rp])


def _solve(m: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    # normalise by the diagonal before judging conditioning; the blocks carry units
    d = np.sqrt(np.diag(m))
    if np.any(d == 0):
        raise NearSingularError("normal equations have a zero diagonal")
    scaled = m / np.outer(d, d)
    if np.linalg.cond(scaled) > 1e12:
        raise NearSingularError("weight normal equations are near-singular")
    return np.linalg.solve(scaled, rhs / d) / d


@lru_cache(maxsize=32)
def _hermite_grid(order: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, w = np.polynomial.hermite_e.hermegauss(order)
    return nodes, w / math.sqrt(2.0 * math.pi)


def mean_distribution_grid(
    params: ProcessParameters, n: int, order: int = 96
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss-Hermite product rule for the exact in-control law of (y_bar, x_bar).

    Returns (y_bar, x_bar, weight) flattened over the grid.  Nodes where the
    ratio-type exponent is undefined (x_bar + mu_x <= 0) are dropped; their
    probability mass must be negligible.
    """
    _check_n(n)
    z, w = _hermite_grid(order)
    z1, z2 = np.meshgrid(z, z, indexing="ij")
    weight = np.outer(w, w).ravel()
    rho = params.rho_xy
    root_n = math.sqrt(n)
    x_bar = (params.mu_x + params.sigma_x / root_n * z1).ravel()
    y_bar = (params.mu_y + params.sigma_y / root_n * (rho * z1 + math.sqrt(1 - rho * rho) * z2)).ravel()
    ok = x_bar + params.mu_x > 0
    if weight[~ok].sum() > 1e-12:
        raise EstimatorDomainError(
            "auxiliary mean puts non-negligible mass on x_bar <= -mu_x; ratio estimators undefined"
        )
    return y_bar[ok], x_bar[ok], weight[ok]


def _exact_weights(params: ProcessParameters, n: int) -> tuple[float, float, float]:
    # T3 - mu_y = (y_bar - mu_y) + alpha_t3 S + w1 Q + w2 R is linear in the
    # coefficients, so the exact-MSE optimum solves a 3x3 least-squares system.
    y_bar, x_bar, w = mean_distribution_grid(params, n)
    g = np.exp((params.mu_x - x_bar) / (params.mu_x + x_bar))
    basis = np.stack([y_bar * (g * g - 1.0), (params.mu_x - x_bar) * g, y_bar * g])
    resid = y_bar - params.mu_y
    gram = (basis * w) @ basis.T
    rhs = -(basis * w) @ resid
    alpha_t3, w1, w2 = _solve(gram, rhs)
    return float(alpha_t3), float(w1), float(w2)


def weights_for(
    params: ProcessParameters, n: int, source: WeightSource | str = DEFAULT_WEIGHT_SOURCE
) -> EstimatorWeights:
    """Mixing weight for T2 and difference weights for T3.

    ``printed-formula``      closed-form alpha, w1, w2.
    ``quadratic-minimizer``  w1, w2 minimise the first-order MSE of T3 with
                             T2's alpha inside (2x2 normal equations).
    ``exact-minimizer``      alpha_t3, w1, w2 minimise the exact MSE of T3
                             under bivariate normality (3x3 system, moments by
                             quadrature); T2 keeps the first-order alpha.
    """
    _check_n(n)
    source = WeightSource(source)
    alpha = alpha_opt(params)
    if source is WeightSource.PRINTED:
        w1, w2 = _printed_weights(params, n)
        return EstimatorWeights(alpha, w1, w2, source, alpha)
    if source is WeightSource.QUADRATIC:
        m, rhs = first_order_normal_equations(params, n, alpha)
        w1, w2 = _solve(m, rhs)
        return EstimatorWeights(alpha, float(w1), float(w2), source, alpha)
    alpha_t3, w1, w2 = _exact_weights(params, n)
    return EstimatorWeights(alpha, w1, w2, source, alpha_t3)


# ---------------------------------------------------------------- MSE


def theoretical_mse(kind: EstimatorKind, params: ProcessParameters, n: int) -> float:
    """First-order MSE used to scale the 3-sigma limits of each chart."""
    _check_n(n)
    kind = EstimatorKind(kind)
    lam = 1.0 / n
    y2 = params.mu_y ** 2
    cy2, cx2 = params.cv_y ** 2, params.cv_x ** 2
    one_minus_r2 = 1.0 - params.rho_xy ** 2
    if kind is EstimatorKind.T0:
        return lam * y2 * cy2
    if kind in (EstimatorKind.T1, EstimatorKind.T2):
        return lam * y2 * one_minus_r2 * cy2
    r2m1 = -one_minus_r2
    return lam * y2 * (lam * cx2 * cx2 - 8.0 * (r2m1 * (-2.0 + lam * cx2) * cy2)) / (
        16.0 * (-1.0 + lam * r2m1 * cy2)
    )


def mse_gains(params: ProcessParameters, n: int) -> tuple[float, float]:
    """The two reduction terms subtracted from the regression MSE for T3.

    Returned as (gain_a, gain_b), evaluated with mu_y**2 in the numerators.
    Their sum is not algebraically identical to the gap between the
    regression MSE and :func:`theoretical_mse` for T3.
    """
    _check_n(n)
    lam = 1.0 / n
    y2 = params.mu_y ** 2
    cy2, cx2 = params.cv_y ** 2, params.cv_x ** 2
    q = 1.0 - params.rho_xy ** 2
    denom = 64.0 * (1.0 + lam * q * cy2)
    gain_a = lam * lam * y2 * (cx2 + 8.0 * q * cy2) ** 2 / denom
    gain_b = lam * lam * y2 * cx2 * (3.0 * cx2 + 16.0 * q * cy2) ** 2 / denom
    return gain_a, gain_b


def exact_mse(
    kind: EstimatorKind,
    params: ProcessParameters,
    n: int,
    weights: EstimatorWeights | None = None,
) -> float:
    """MSE about mu_y under the in-control bivariate normal model.

    T0 and T1 have closed forms (T1 includes the slope-estimation inflation
    (n - 2) / (n - 3), infinite for n <= 3); T2 and T3 are integrated over the
    exact law of (y_bar, x_bar).
    """
    _check_n(n)
    kind = EstimatorKind(kind)
    var_y = params.sigma_y ** 2
    if kind is EstimatorKind.T0:
        return var_y / n
    if kind is EstimatorKind.T1:
        if n <= 3:
            return math.inf
        return var_y * (1.0 - params.rho_xy ** 2) / n * (n - 2) / (n - 3)
    if weights is None:
        weights = weights_for(params, n)
    y_bar, x_bar, w = mean_distribution_grid(params, n)
    values = evaluate(kind, y_bar, x_bar, None, params, weights)
    return float(w @ (values - params.mu_y) ** 2)


def weights_report(params: ProcessParameters, n: int) -> dict:
    """Compare the three weight sources: weights, exact MSE, and analytic MSEs."""
    rows = []
    for source in WeightSource:
        w = weights_for(params, n, source)
        rows.append(
            {
                **w.to_dict(),
                "exact_mse_t3": exact_mse(EstimatorKind.T3, params, n, w),
            }
        )
    gain_a, gain_b = mse_gains(params, n)
    reg = theoretical_mse(EstimatorKind.T2, params, n)
    exact_t2 = exact_mse(EstimatorKind.T2, params, n, weights_for(params, n, WeightSource.PRINTED))
    return {
        "params": params.to_dict(),
        "n": n,
        "theoretical_mse": {k.value: theoretical_mse(k, params, n) for k in ALL_KINDS},
        "exact_mse_t2": exact_t2,
        "mse_gain_a": gain_a,
        "mse_gain_b": gain_b,
        "regression_minus_gains": reg - gain_a - gain_b,
        "sources": rows,
    }
