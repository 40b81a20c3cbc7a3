"""Control limits, calibration to a target in-control ARL, and signal detection."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from . import _engine
from .errors import AuxChartError, CalibrationRangeError, PrecisionError
from .estimators import (
    DEFAULT_WEIGHT_SOURCE,
    EstimatorKind,
    WeightSource,
    theoretical_mse,
    weights_for,
)
from .process import IN_CONTROL, ProcessParameters, RngStream, _check_n

log = logging.getLogger(__name__)

COEFFICIENT_RANGE = (0.5, 6.0)
ALPHA_RANGE = (1e-9, 0.999)
MIN_BUDGET = 100_000
MIN_REFERENCE = 100_000
DEFAULT_REFERENCE = 1_000_000
CALIBRATION_CAP = 10_000_000


class LimitStyle(str, Enum):
    THREE_SIGMA = "three_sigma_scaled"
    PROBABILITY = "probability_quantile"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class ChartConfig:
    kind: EstimatorKind
    n: int
    style: LimitStyle = LimitStyle.THREE_SIGMA
    coefficient: float = 3.0
    target_arl0: float = 370.4
    weights_source: WeightSource = DEFAULT_WEIGHT_SOURCE

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EstimatorKind(self.kind))
        object.__setattr__(self, "style", LimitStyle(self.style))
        object.__setattr__(self, "weights_source", WeightSource(self.weights_source))
        _check_n(self.n)
        if not self.coefficient > 0:
            raise AuxChartError("coefficient must be positive")
        if self.style is LimitStyle.PROBABILITY and not self.coefficient < 1:
            raise AuxChartError("probability limits need 0 < alpha < 1")
        if not self.target_arl0 > 1:
            raise AuxChartError("target_arl0 must exceed 1")

    def statistic(self, params: ProcessParameters) -> _engine.StatisticSpec:
        weights = weights_for(params, self.n, self.weights_source) if self.kind.needs_weights else None
        return _engine.StatisticSpec(self.kind, weights)


@dataclass(frozen=True)
class ControlLimits:
    lcl: float
    cl: float
    ucl: float

    def __post_init__(self) -> None:
        # equality only arises from a zero-spread training sample; see estimate_limits
        if not self.lcl <= self.cl <= self.ucl:
            raise AuxChartError(f"limits out of order: {self.lcl}, {self.cl}, {self.ucl}")

    def signals(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        return (v < self.lcl) | (v > self.ucl)

    def to_dict(self) -> dict:
        return {"lcl": self.lcl, "cl": self.cl, "ucl": self.ucl}


@dataclass(frozen=True)
class SignalReport:
    signal_indices: list[int]
    first_signal_after: int | None = None

    @property
    def count(self) -> int:
        return len(self.signal_indices)

    def count_after(self, changepoint: int) -> int:
        return sum(1 for i in self.signal_indices if i > changepoint)

    def to_dict(self) -> dict:
        return {
            "signal_indices": list(self.signal_indices),
            "first_signal_after": self.first_signal_after,
        }


# ---------------------------------------------------------------- limits


def limits_three_sigma(config: ChartConfig, params: ProcessParameters) -> ControlLimits:
    if config.style is not LimitStyle.THREE_SIGMA:
        raise AuxChartError("limits_three_sigma needs the three_sigma_scaled style")
    se = math.sqrt(theoretical_mse(config.kind, params, config.n))
    half = config.coefficient * se
    return ControlLimits(params.mu_y - half, params.mu_y, params.mu_y + half)


def reference_sample(config: ChartConfig, params: ProcessParameters, m: int, stream: RngStream) -> np.ndarray:
    """``m`` in-control values of the chart's statistic."""
    spec = config.statistic(params)
    source = _engine.SubgroupSource(params, config.n, IN_CONTROL, stream, spec.kind.needs_slope)
    out, have = [], 0
    while have < m:
        y_bar, x_bar, slope = source.next_chunk()
        t = spec(params, y_bar, x_bar, slope)
        out.append(t)
        have += t.size
    return np.concatenate(out)[:m]


def _quantile_limits(reference: np.ndarray, alpha: float) -> ControlLimits:
    lcl, cl, ucl = np.quantile(reference, [alpha / 2.0, 0.5, 1.0 - alpha / 2.0])
    return ControlLimits(float(lcl), float(cl), float(ucl))


def limits_probability(
    config: ChartConfig, params: ProcessParameters, m: int, stream: RngStream
) -> ControlLimits:
    """Equal-tail empirical quantile limits (alpha/2 each side), median as CL."""
    if config.style is not LimitStyle.PROBABILITY:
        raise AuxChartError("limits_probability needs the probability_quantile style")
    if m < MIN_REFERENCE:
        raise PrecisionError(f"probability limits need m >= {MIN_REFERENCE} in-control draws, got {m}")
    return _quantile_limits(reference_sample(config, params, m, stream), config.coefficient)


def limits_for(
    config: ChartConfig,
    params: ProcessParameters,
    stream: RngStream | None = None,
    m: int = DEFAULT_REFERENCE,
) -> ControlLimits:
    if config.style is LimitStyle.THREE_SIGMA:
        return limits_three_sigma(config, params)
    if stream is None:
        raise AuxChartError("probability limits need a random stream")
    return limits_probability(config, params, m, stream)


# ---------------------------------------------------------------- calibration


@dataclass(frozen=True)
class Calibration:
    config: ChartConfig
    limits: ControlLimits
    achieved_arl: float
    arl_se: float
    budget: int
    capped_runs: int
    probes: int = 0
    history: tuple = field(default=(), repr=False)


class _ProbeData:
    """Sparse block scores from which the run lengths at any threshold follow."""

    def __init__(self, blocks, sizes, cap):
        self.blocks = blocks  # [(positions, scores, end), ...]
        self.sizes = sizes
        self.cap = cap

    def evaluate(self, threshold: float) -> tuple[float, float, int]:
        total = 0
        total_sq = 0.0
        capped = 0
        reps = 0
        for (pos, score, end), size in zip(self.blocks, self.sizes):
            runs, c = _engine.first_runs(pos[score > threshold], end, self.cap, size)
            if runs.size < size:
                raise AuxChartError("calibration stream too short for probe threshold")
            total += int(runs.sum())
            total_sq += float(np.dot(runs.astype(float), runs))
            capped += c
            reps += size
        mean = total / reps
        var = max(total_sq / reps - mean * mean, 0.0) * reps / max(reps - 1, 1)
        return mean, math.sqrt(var / reps), capped


def _to_threshold(style: LimitStyle, coefficient: float) -> float:
    return coefficient if style is LimitStyle.THREE_SIGMA else -coefficient


def calibrate(
    config: ChartConfig,
    params: ProcessParameters,
    budget: int = MIN_BUDGET,
    tolerance: float = 0.02,
    stream: RngStream | int = 0,
    workers: int | None = None,
    reference_size: int = DEFAULT_REFERENCE,
    cap: int = CALIBRATION_CAP,
) -> Calibration:
    """Tune the limit coefficient so that the simulated in-control ARL hits the target.

    Every probe reuses the same replication streams, so the simulated ARL is
    an exactly monotone step function of the coefficient and plain bisection
    converges.  The streams are generated once, up to the widest coefficient
    of the bracket, and the run lengths for narrower limits are read off the
    retained scores.
    """
    if not isinstance(stream, RngStream):
        stream = RngStream(stream)
    if budget < MIN_BUDGET:
        raise PrecisionError(f"calibration needs at least {MIN_BUDGET} replications per probe")
    if not 0 < tolerance < 1:
        raise AuxChartError("tolerance must lie in (0, 1)")
    # run lengths are roughly geometric, so the relative SE of the ARL is ~ 1/sqrt(budget)
    if 3.0 / math.sqrt(budget) > tolerance:
        need = math.ceil((3.0 / tolerance) ** 2)
        raise PrecisionError(f"tolerance {tolerance} needs a budget of at least {need} replications")
    target = float(config.target_arl0)
    if target * 10 > cap:
        raise CalibrationRangeError(f"target ARL {target} is too large for the run-length cap {cap}")

    spec = config.statistic(params)
    style = config.style
    if style is LimitStyle.THREE_SIGMA:
        score = _engine.SigmaScore(params.mu_y, math.sqrt(theoretical_mse(config.kind, params, config.n)))
        lo_bound, hi_bound = COEFFICIENT_RANGE
    else:
        reference = reference_sample(config, params, reference_size, stream.child(_engine.REFERENCE_KEY))
        score = _engine.TailScore(reference)
        lo_bound, hi_bound = ALPHA_RANGE

    # pilot quantiles of the score locate a bracket around the target
    pilot_size = max(400_000, int(200 * target))
    pilot = score(reference_sample(config, params, pilot_size, stream.child(_engine.PILOT_KEY)))
    q = np.quantile(pilot, [1.0 - min(1.0, 1.5 / target), 1.0 - 1.0 / (1.5 * target)])
    t_lo, t_hi = float(q[0]), float(q[1])
    t_range = sorted((_to_threshold(style, lo_bound), _to_threshold(style, hi_bound)))
    if t_lo >= t_range[1] or t_hi <= t_range[0]:
        raise CalibrationRangeError(
            f"{config.kind} n={config.n}: target {target} needs a coefficient outside [{lo_bound}, {hi_bound}]"
        )
    width = max(t_hi - t_lo, 1e-3 * (t_range[1] - t_range[0]))
    t_lo = max(t_lo, t_range[0])
    t_hi = min(max(t_hi, t_lo + width), t_range[1])

    sizes = _engine.block_sizes(budget)
    seq = stream.seed_sequence
    probes = 0
    history = []
    for _attempt in range(12):
        tasks = [
            _engine.ScoreTask(
                params, config.n, IN_CONTROL, seq.entropy, tuple(seq.spawn_key) + (k,), size, cap,
                "moments", spec, score, t_lo, t_hi,
            )
            for k, size in enumerate(sizes)
        ]
        data = _ProbeData(_engine.parallel_map(_engine.score_block, tasks, workers), sizes, cap)
        arl_lo = data.evaluate(t_lo)[0]
        arl_hi = data.evaluate(t_hi)[0]
        probes += 2
        history.extend([(t_lo, arl_lo), (t_hi, arl_hi)])
        log.debug("bracket [%g, %g] -> ARL [%g, %g]", t_lo, t_hi, arl_lo, arl_hi)
        if arl_lo <= target <= arl_hi:
            break
        if arl_hi < target:
            if t_hi >= t_range[1]:
                raise CalibrationRangeError(
                    f"{config.kind} n={config.n}: ARL {arl_hi:.1f} at the widest admissible limits is below target {target}"
                )
            t_lo, t_hi = t_hi, min(t_hi + 2 * width, t_range[1])
        else:
            if t_lo <= t_range[0]:
                raise CalibrationRangeError(
                    f"{config.kind} n={config.n}: ARL {arl_lo:.1f} at the narrowest admissible limits exceeds target {target}"
                )
            t_lo, t_hi = max(t_lo - 2 * width, t_range[0]), t_lo
        width *= 2
    else:
        raise CalibrationRangeError(f"{config.kind} n={config.n}: no bracket found for target {target}")

    lo, hi = t_lo, t_hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        arl_mid = data.evaluate(mid)[0]
        probes += 1
        history.append((mid, arl_mid))
        if arl_mid < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-9 * max(1.0, abs(hi)):
            break
    # the two ends straddle the target; keep whichever is closer
    candidates = [(abs(data.evaluate(t)[0] - target), t) for t in (lo, hi)]
    threshold = min(candidates)[1]
    achieved, se, capped = data.evaluate(threshold)
    if abs(achieved - target) > tolerance * target:
        raise PrecisionError(
            f"{config.kind} n={config.n}: achieved ARL {achieved:.2f} misses target {target} by more than {tolerance:.1%}"
        )
    coefficient = threshold if style is LimitStyle.THREE_SIGMA else -threshold
    tuned = replace(config, coefficient=float(coefficient))
    if style is LimitStyle.THREE_SIGMA:
        limits = limits_three_sigma(tuned, params)
    else:
        limits = _quantile_limits(score.reference, tuned.coefficient)
    return Calibration(tuned, limits, achieved, se, budget, capped, probes, tuple(history))


# ---------------------------------------------------------------- monitoring


def monitor(
    statistics: Sequence[float],
    limits: ControlLimits,
    changepoint: int | None = None,
) -> SignalReport:
    """Flag subgroups whose statistic falls outside [lcl, ucl].

    Indices are 1-based subgroup numbers; ``first_signal_after`` is the first
    flagged subgroup strictly after ``changepoint``.
    """
    values = np.asarray(statistics, dtype=float)
    if values.size == 0:
        raise AuxChartError("monitor needs at least one statistic")
    flagged = [int(i) + 1 for i in np.flatnonzero(limits.signals(values))]
    first = None
    if changepoint is not None:
        first = next((i for i in flagged if i > changepoint), None)
    return SignalReport(flagged, first)


def estimate_limits(training: Sequence[float], coefficient: float = 3.0) -> ControlLimits:
    """Phase I limits from a training prefix: mean +/- coefficient * sd (ddof=1)."""
    values = np.asarray(training, dtype=float)
    if values.size < 2:
        raise AuxChartError("need at least two training values")
    mean = float(values.mean())
    sd = float(values.std(ddof=1))
    if sd == 0:
        warnings.warn("training statistics have zero spread; limits collapse onto the centre line", RuntimeWarning)
    return ControlLimits(mean - coefficient * sd, mean, mean + coefficient * sd)
