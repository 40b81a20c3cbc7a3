"""Run-length experiments, ARL profiles over shift grids, and EQL/RARL/PCI."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import _engine
from .charts import ChartConfig, ControlLimits
from .errors import AuxChartError, PrecisionError
from .estimators import EstimatorKind, moments_from_pairs
from .process import ProcessParameters, RngStream, ShiftSpec, draw_pairs

DEFAULT_GRID = (0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0)
DEFAULT_REPS = 100_000
MIN_REPS = 10_000
DEFAULT_CAP = 10_000_000


@dataclass(frozen=True)
class ShiftGrid:
    deltas: tuple[float, ...] = DEFAULT_GRID

    def __post_init__(self) -> None:
        d = tuple(float(v) for v in self.deltas)
        object.__setattr__(self, "deltas", d)
        if not d or d[0] != 0.0:
            raise AuxChartError("a shift grid must start at 0")
        if any(b <= a for a, b in zip(d, d[1:])):
            raise AuxChartError("shift grid must be strictly increasing")

    @property
    def positive(self) -> tuple[float, ...]:
        return self.deltas[1:]

    def __len__(self) -> int:
        return len(self.deltas)


@dataclass(frozen=True)
class ArlEntry:
    delta: float
    arl: float
    sdrl: float
    se: float
    reps: int
    capped: int = 0
    degenerate: int = 0

    @classmethod
    def from_runs(cls, delta: float, runs: np.ndarray, capped: int = 0, degenerate: int = 0) -> "ArlEntry":
        runs = np.asarray(runs, dtype=np.int64)
        reps = int(runs.size)
        # integer sums keep the reduction exact and order independent
        total = int(runs.sum())
        mean = total / reps
        sq = float(np.dot(runs.astype(np.float64) - mean, runs.astype(np.float64) - mean))
        sdrl = math.sqrt(sq / (reps - 1)) if reps > 1 else 0.0
        return cls(float(delta), mean, sdrl, sdrl / math.sqrt(reps), reps, int(capped), int(degenerate))


@dataclass(frozen=True)
class ArlProfile:
    entries: tuple[ArlEntry, ...]

    @property
    def deltas(self) -> np.ndarray:
        return np.array([e.delta for e in self.entries])

    @property
    def arl(self) -> np.ndarray:
        return np.array([e.arl for e in self.entries])

    @property
    def se(self) -> np.ndarray:
        return np.array([e.se for e in self.entries])

    def at(self, delta: float) -> ArlEntry:
        for e in self.entries:
            if e.delta == delta:
                return e
        raise KeyError(delta)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delta", "arl", "sdrl", "se", "reps", "capped"])
        for e in self.entries:
            w.writerow([repr(e.delta), repr(e.arl), repr(e.sdrl), repr(e.se), e.reps, e.capped])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ArlProfile":
        rows = csv.DictReader(io.StringIO(text))
        return cls(tuple(
            ArlEntry(float(r["delta"]), float(r["arl"]), float(r["sdrl"]), float(r["se"]), int(r["reps"]), int(r["capped"]))
            for r in rows
        ))

    def to_json(self) -> str:
        return json.dumps([asdict(e) for e in self.entries], indent=2)


@dataclass(frozen=True)
class PerformanceSummary:
    kind: EstimatorKind
    eql: float
    rarl: float
    pci: float
    benchmark: EstimatorKind

    def to_dict(self) -> dict:
        return {"kind": str(self.kind), "eql": self.eql, "rarl": self.rarl, "pci": self.pci, "benchmark": str(self.benchmark)}


def _stream(seed: int | RngStream) -> RngStream:
    return seed if isinstance(seed, RngStream) else RngStream(seed)


def run_length(
    config: ChartConfig,
    limits: ControlLimits,
    params: ProcessParameters,
    shift: ShiftSpec,
    stream: RngStream,
    cap: int = DEFAULT_CAP,
    chunk: int = 64,
) -> int:
    """One run length drawn from raw (y, x) subgroups.

    Subgroups are generated from ``stream`` until the statistic leaves
    [lcl, ucl]; returns the 1-based index of that subgroup, or ``cap``.
    Subgroups with zero spread in x are redrawn (T1 is undefined there).
    """
    spec = config.statistic(params)
    gen = stream.generator
    seen = 0
    while seen < cap:
        y, x = draw_pairs(params, config.n, shift, gen, chunk)
        y_bar, x_bar, slope, bad = moments_from_pairs(y, x)
        if spec.kind.needs_slope and bad.any():
            keep = ~bad
            y_bar, x_bar, slope = y_bar[keep], x_bar[keep], slope[keep]
        t = spec(params, y_bar, x_bar, slope)
        hits = np.flatnonzero(limits.signals(t))
        if hits.size and seen + hits[0] + 1 <= cap:
            return int(seen + hits[0] + 1)
        seen += t.size
    return int(cap)


def run_lengths(
    charts: Sequence[tuple[ChartConfig, ControlLimits]],
    params: ProcessParameters,
    shift: ShiftSpec,
    reps: int,
    seed: int | RngStream = 0,
    cap: int = DEFAULT_CAP,
    workers: int | None = None,
    sampler: str = "moments",
) -> tuple[np.ndarray, np.ndarray, int]:
    """Run lengths (charts x reps) for charts of equal subgroup size on shared subgroups."""
    if not charts:
        raise AuxChartError("no charts given")
    n = charts[0][0].n
    if any(c.n != n for c, _ in charts):
        raise AuxChartError("charts sharing a stream need the same subgroup size")
    specs = [(c.statistic(params), lim.lcl, lim.ucl) for c, lim in charts]
    return _engine.simulate_run_lengths(specs, params, n, shift, reps, _stream(seed), cap, workers, sampler)


def _check_reps(reps: int) -> None:
    if reps < MIN_REPS:
        raise PrecisionError(f"ARL estimation needs at least {MIN_REPS} replications, got {reps}")


def compare_arl(
    charts: Sequence[tuple[ChartConfig, ControlLimits]],
    params: ProcessParameters,
    shift: ShiftSpec,
    reps: int = DEFAULT_REPS,
    seed: int | RngStream = 0,
    cap: int = DEFAULT_CAP,
    workers: int | None = None,
    sampler: str = "moments",
) -> list[ArlEntry]:
    _check_reps(reps)
    runs, capped, degenerate = run_lengths(charts, params, shift, reps, seed, cap, workers, sampler)
    return [ArlEntry.from_runs(shift.delta, r, c, degenerate) for r, c in zip(runs, capped)]


def arl(
    config: ChartConfig,
    limits: ControlLimits,
    params: ProcessParameters,
    shift: ShiftSpec,
    reps: int = DEFAULT_REPS,
    seed: int | RngStream = 0,
    cap: int = DEFAULT_CAP,
    workers: int | None = None,
    sampler: str = "moments",
) -> ArlEntry:
    """Mean, SD and standard error of ``reps`` independent run lengths."""
    return compare_arl([(config, limits)], params, shift, reps, seed, cap, workers, sampler)[0]


def arl_curve(
    config: ChartConfig,
    limits: ControlLimits,
    params: ProcessParameters,
    grid: ShiftGrid = ShiftGrid(),
    reps: int = DEFAULT_REPS,
    seed: int | RngStream = 0,
    cap: int = DEFAULT_CAP,
    workers: int | None = None,
    sampler: str = "moments",
) -> ArlProfile:
    """ARL profile over a shift grid; every shift reuses the same seed."""
    return ArlProfile(tuple(
        arl(config, limits, params, ShiftSpec(d), reps, seed, cap, workers, sampler) for d in grid.deltas
    ))


def _trapezoid(y: np.ndarray, x: np.ndarray) -> float:
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0)


def performance_summary(
    profiles: Mapping[EstimatorKind, ArlProfile],
    benchmark: EstimatorKind | str | None = None,
) -> dict[EstimatorKind, PerformanceSummary]:
    """EQL, RARL and PCI over the positive shifts of a common grid.

    EQL  = mean over [d_min, d_max] of d**2 * ARL(d)
    RARL = mean over [d_min, d_max] of ARL(d) / ARL_bench(d)
    PCI  = EQL / EQL_bench
    Integrals use the trapezoidal rule.  Without an explicit benchmark the
    chart with the smallest EQL is used.
    """
    profiles = {EstimatorKind(k): p for k, p in profiles.items()}
    if not profiles:
        raise AuxChartError("no profiles given")
    grids = {tuple(p.deltas) for p in profiles.values()}
    if len(grids) != 1:
        raise AuxChartError("all profiles must share the same shift grid")
    deltas = np.array(grids.pop())
    pos = deltas > 0
    if pos.sum() < 3:
        raise AuxChartError("EQL needs at least three positive shifts")
    d = deltas[pos]
    span = d[-1] - d[0]
    eql = {k: _trapezoid(d * d * p.arl[pos], d) / span for k, p in profiles.items()}
    if benchmark is None:
        benchmark = min(eql, key=eql.get)
    benchmark = EstimatorKind(benchmark)
    if benchmark not in profiles:
        raise AuxChartError(f"benchmark {benchmark} has no profile")
    base = profiles[benchmark].arl[pos]
    out = {}
    for k, p in profiles.items():
        rarl = _trapezoid(p.arl[pos] / base, d) / span
        out[k] = PerformanceSummary(k, eql[k], rarl, eql[k] / eql[benchmark], benchmark)
    return out


def sdrl_ratio(runs: np.ndarray) -> tuple[float, float]:
    """SDRL / ARL and its delta-method standard error."""
    x = np.asarray(runs, dtype=np.float64)
    m = x.mean()
    c = x - m
    v = float(np.mean(c ** 2))
    mu3 = float(np.mean(c ** 3))
    mu4 = float(np.mean(c ** 4))
    n = x.size
    s = math.sqrt(v)
    ratio = s / m
    d_m = -s / (m * m)
    d_v = 1.0 / (2.0 * s * m)
    var = (d_m * d_m * v + d_v * d_v * (mu4 - v * v) + 2.0 * d_m * d_v * mu3) / n
    return ratio, math.sqrt(max(var, 0.0))
