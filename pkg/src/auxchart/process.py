"""In-control / shifted bivariate normal process and rational subgroup sampling.

Observations are drawn through the conditional (Cholesky) factorisation

    X = mu_x + sigma_x * z1
    Y = mu_y + delta * sigma_y + sigma_y * (rho * z1 + sqrt(1 - rho**2) * z2)

with z1, z2 iid standard normal.  A shift of ``delta`` moves the mean of every
Y observation by ``delta * sigma_y``; X is never shifted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import AuxChartError


@dataclass(frozen=True)
class ProcessParameters:
    mu_y: float
    mu_x: float
    sigma_y: float
    sigma_x: float
    rho_xy: float

    def __post_init__(self) -> None:
        for name in ("mu_y", "mu_x", "sigma_y", "sigma_x", "rho_xy"):
            if not math.isfinite(getattr(self, name)):
                raise AuxChartError(f"{name} must be finite")
        if self.sigma_y <= 0 or self.sigma_x <= 0:
            raise AuxChartError("sigma_y and sigma_x must be positive")
        if not -1.0 < self.rho_xy < 1.0:
            raise AuxChartError("rho_xy must lie strictly between -1 and 1")
        # ratio-type estimators divide by the population means
        if self.mu_y <= 0 or self.mu_x <= 0:
            raise AuxChartError("mu_y and mu_x must be positive")

    @property
    def cv_y(self) -> float:
        """Coefficient of variation of the study variable, sigma_y / mu_y."""
        return self.sigma_y / self.mu_y

    @property
    def cv_x(self) -> float:
        """Coefficient of variation of the auxiliary variable, sigma_x / mu_x."""
        return self.sigma_x / self.mu_x

    @property
    def slope(self) -> float:
        """Population regression slope of Y on X."""
        return self.rho_xy * self.sigma_y / self.sigma_x

    def to_dict(self) -> dict:
        return {
            "mu_y": self.mu_y,
            "mu_x": self.mu_x,
            "sigma_y": self.sigma_y,
            "sigma_x": self.sigma_x,
            "rho_xy": self.rho_xy,
        }


@dataclass(frozen=True)
class ShiftSpec:
    delta: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.delta) or self.delta < 0:
            raise AuxChartError("shift delta must be a finite value >= 0")

    def y_mean(self, params: ProcessParameters) -> float:
        return params.mu_y + self.delta * params.sigma_y


IN_CONTROL = ShiftSpec(0.0)


@dataclass(frozen=True)
class Subgroup:
    """One rational subgroup of paired (y, x) observations."""

    pairs: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if len(self.pairs) < 2:
            raise AuxChartError("a subgroup needs at least 2 observations")

    @classmethod
    def from_arrays(cls, y: Sequence[float], x: Sequence[float]) -> "Subgroup":
        if len(y) != len(x):
            raise AuxChartError("y and x must have equal length")
        return cls(tuple((float(a), float(b)) for a, b in zip(y, x)))

    @property
    def n(self) -> int:
        return len(self.pairs)

    @property
    def y(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs])

    @property
    def x(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs])

    def __iter__(self) -> Iterator[tuple[float, float]]:
        return iter(self.pairs)


class RngStream:
    """Seedable, splittable random stream.

    Wraps a :class:`numpy.random.SeedSequence` feeding an SFC64 generator;
    ``child(i)`` derives an independent stream from the spawn key, so the
    mapping from (seed, path) to samples never depends on how work is
    scheduled.  Instances are owned
    by a single consumer and must not be shared between workers.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            if int(seed) < 0:
                raise AuxChartError("seed must be non-negative")
            self._seq = np.random.SeedSequence(int(seed))
        self._gen: np.random.Generator | None = None

    @property
    def seed_sequence(self) -> np.random.SeedSequence:
        return self._seq

    @property
    def key(self) -> tuple[int, ...]:
        return tuple(self._seq.spawn_key)

    def child(self, index: int) -> "RngStream":
        seq = np.random.SeedSequence(
            self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + (int(index),)
        )
        return RngStream(seq)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.SFC64(self._seq))
        return self._gen

    def __repr__(self) -> str:
        return f"RngStream(entropy={self._seq.entropy}, key={self.key})"


def _check_n(n: int) -> None:
    if int(n) != n or n < 2:
        raise AuxChartError(f"subgroup size must be an integer >= 2, got {n!r}")


def draw_pairs(
    params: ProcessParameters,
    n: int,
    shift: ShiftSpec,
    gen: np.random.Generator,
    size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``size`` subgroups at once; returns (y, x) arrays of shape (size, n)."""
    _check_n(n)
    z = gen.standard_normal((2, size, n))
    rho = params.rho_xy
    x = params.mu_x + params.sigma_x * z[0]
    y = shift.y_mean(params) + params.sigma_y * (rho * z[0] + math.sqrt(1.0 - rho * rho) * z[1])
    return y, x


def sample_subgroup(
    params: ProcessParameters, n: int, shift: ShiftSpec, stream: RngStream
) -> Subgroup:
    """Draw one subgroup of ``n`` iid (y, x) pairs from the (shifted) process."""
    y, x = draw_pairs(params, n, shift, stream.generator, 1)
    return Subgroup.from_arrays(y[0], x[0])


def draw_subgroup_moments(
    params: ProcessParameters,
    n: int,
    shift: ShiftSpec,
    gen: np.random.Generator,
    size: int,
    slope_gen: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Draw the sufficient statistics of ``size`` subgroups without the raw pairs.

    Under bivariate normality (y_bar, x_bar) is exactly bivariate normal with
    covariance Sigma / n, and independent of the scatter matrix, which is
    Wishart(n - 1, Sigma).  The Bartlett factorisation of the latter gives the
    least-squares slope of y on x as

        b = rho * sigma_y / sigma_x + sigma_y * sqrt(1 - rho**2) / sigma_x * z / c

    with z ~ N(0, 1) and c**2 ~ chi2(n - 1).  Returns (y_bar, x_bar, b); b is
    ``None`` when ``slope_gen`` is not given.  The two generators are kept
    separate so the means stream is identical whether or not slopes are drawn.
    """
    _check_n(n)
    rho = params.rho_xy
    scale_y = params.sigma_y / math.sqrt(n)
    z = gen.standard_normal((2, size))
    y_bar = z[1] * (scale_y * math.sqrt(1.0 - rho * rho))
    y_bar += z[0] * (scale_y * rho)
    y_bar += shift.y_mean(params)
    x_bar = z[0]
    x_bar *= params.sigma_x / math.sqrt(n)
    x_bar += params.mu_x
    if slope_gen is None:
        return y_bar, x_bar, None
    noise = slope_gen.standard_normal(size)
    chi = np.sqrt(slope_gen.chisquare(n - 1, size))
    b = params.slope + (params.sigma_y * math.sqrt(1.0 - rho * rho) / params.sigma_x) * (noise / chi)
    return y_bar, x_bar, b
