"""Block-structured Monte Carlo engine shared by calibration and ARL estimation.

Replications are grouped into fixed-size blocks; block ``k`` of an experiment
always draws from child stream ``k`` of the experiment seed, so results never
depend on the number of workers.  Inside a block, subgroups form one iid
stream drawn in fixed-size chunks and the run lengths are the gaps between
successive signals (a Shewhart chart renews after every signal).  Because the
chunk layout is fixed, a chart sees the same subgroups whichever other charts
are evaluated alongside it (common random numbers across charts and probes).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .estimators import EstimatorKind, EstimatorWeights, evaluate, moments_from_pairs
from .process import ProcessParameters, RngStream, ShiftSpec, draw_pairs, draw_subgroup_moments

BLOCK_SIZE = 4096
CHUNK_SIZE = 1 << 15
PILOT_KEY = 1 << 30
REFERENCE_KEY = (1 << 30) + 1
SAMPLERS = ("moments", "pairs")


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        env = os.environ.get("SPC_AUX_THREADS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


def parallel_map(func: Callable, tasks: Sequence, workers: int | None = None) -> list:
    """Ordered map; results come back in task order for any worker count."""
    workers = min(resolve_workers(workers), len(tasks))
    if workers <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, tasks))


def block_sizes(reps: int, block: int = BLOCK_SIZE) -> list[int]:
    full, rest = divmod(int(reps), block)
    return [block] * full + ([rest] if rest else [])


@dataclass(frozen=True)
class StatisticSpec:
    kind: EstimatorKind
    weights: EstimatorWeights | None = None

    def __call__(self, params, y_bar, x_bar, slope):
        return evaluate(self.kind, y_bar, x_bar, slope, params, self.weights)


class SubgroupSource:
    """Deterministic chunked stream of subgroup summaries for one block."""

    def __init__(
        self,
        params: ProcessParameters,
        n: int,
        shift: ShiftSpec,
        stream: RngStream,
        need_slope: bool,
        sampler: str = "moments",
    ):
        if sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {sampler!r}")
        self.params, self.n, self.shift, self.sampler = params, n, shift, sampler
        self._means = stream.child(0).generator
        self._slopes = stream.child(1).generator if need_slope else None
        self.degenerate = 0

    @property
    def chunk(self) -> int:
        if self.sampler == "pairs":
            return max(256, CHUNK_SIZE // self.n)
        return CHUNK_SIZE

    def next_chunk(self) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        if self.sampler == "moments":
            return draw_subgroup_moments(
                self.params, self.n, self.shift, self._means, self.chunk, self._slopes
            )
        y, x = draw_pairs(self.params, self.n, self.shift, self._means, self.chunk)
        y_bar, x_bar, slope, bad = moments_from_pairs(y, x)
        if bad.any():
            # redraw policy: a degenerate subgroup is skipped and the next one used
            self.degenerate += int(bad.sum())
            keep = ~bad
            y_bar, x_bar, slope = y_bar[keep], x_bar[keep], slope[keep]
        return y_bar, x_bar, slope


def split_runs(signals: np.ndarray, start: int, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """Run lengths between 1-based signal positions, with runs truncated at ``cap``.

    A gap longer than ``cap`` becomes one or more capped runs (value ``cap``)
    followed by the remainder that ends at the signal.  Returns (runs, capped
    flags).
    """
    gaps = np.diff(np.concatenate(([start], signals))).astype(np.int64)
    if gaps.size == 0 or gaps.max() <= cap:
        return gaps, np.zeros(gaps.size, dtype=bool)
    extra = (gaps - 1) // cap
    counts = extra + 1
    runs = np.full(int(counts.sum()), cap, dtype=np.int64)
    flags = np.ones(runs.size, dtype=bool)
    last = np.cumsum(counts) - 1
    runs[last] = gaps - extra * cap
    flags[last] = False
    return runs, flags


class RunCollector:
    """Accumulates the first ``target`` run lengths of one chart."""

    def __init__(self, target: int, cap: int):
        self.target, self.cap = int(target), int(cap)
        self.parts: list[np.ndarray] = []
        self.count = 0
        self.capped = 0
        self.last = 0

    @property
    def done(self) -> bool:
        return self.count >= self.target

    def _take(self, runs: np.ndarray, flags: np.ndarray) -> None:
        take = min(runs.size, self.target - self.count)
        if take <= 0:
            return
        self.parts.append(runs[:take])
        self.capped += int(flags[:take].sum())
        self.count += take

    def feed(self, signals: np.ndarray, end: int) -> None:
        """Consume signal positions (sorted, 1-based) observed up to ``end``."""
        if self.done:
            return
        if signals.size:
            self._take(*split_runs(signals, self.last, self.cap))
            self.last = int(signals[-1])
        k = (end - self.last) // self.cap
        if k > 0 and not self.done:
            k = min(k, self.target - self.count)
            self._take(np.full(k, self.cap, dtype=np.int64), np.ones(k, dtype=bool))
            self.last += k * self.cap

    def runs(self) -> np.ndarray:
        if not self.parts:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.parts)


@dataclass(frozen=True)
class BlockTask:
    params: ProcessParameters
    n: int
    shift: ShiftSpec
    entropy: int
    key: tuple
    size: int
    cap: int
    sampler: str

    def stream(self) -> RngStream:
        return RngStream(np.random.SeedSequence(self.entropy, spawn_key=self.key))


@dataclass(frozen=True)
class RunLengthTask(BlockTask):
    charts: tuple = ()  # ((StatisticSpec, lcl, ucl), ...)


def run_block(task: RunLengthTask) -> tuple[np.ndarray, np.ndarray, int]:
    """Run lengths of every chart for one block: (runs[charts, size], capped[charts], degenerate)."""
    need_slope = any(spec.kind.needs_slope for spec, _, _ in task.charts)
    source = SubgroupSource(task.params, task.n, task.shift, task.stream(), need_slope, task.sampler)
    collectors = [RunCollector(task.size, task.cap) for _ in task.charts]
    pos = 0
    while not all(c.done for c in collectors):
        y_bar, x_bar, slope = source.next_chunk()
        cache: dict = {}
        for (spec, lcl, ucl), col in zip(task.charts, collectors):
            if col.done:
                continue
            if spec not in cache:
                cache[spec] = spec(task.params, y_bar, x_bar, slope)
            t = cache[spec]
            hits = np.flatnonzero((t < lcl) | (t > ucl)) + (pos + 1)
            col.feed(hits, pos + t.size)
        pos += y_bar.size
    runs = np.stack([c.runs() for c in collectors])
    capped = np.array([c.capped for c in collectors], dtype=np.int64)
    return runs, capped, source.degenerate


def simulate_run_lengths(
    charts: Sequence[tuple[StatisticSpec, float, float]],
    params: ProcessParameters,
    n: int,
    shift: ShiftSpec,
    reps: int,
    stream: RngStream,
    cap: int,
    workers: int | None = None,
    sampler: str = "moments",
) -> tuple[np.ndarray, np.ndarray, int]:
    """Run lengths (charts x reps) for charts sharing one subgroup stream."""
    seq = stream.seed_sequence
    tasks = [
        RunLengthTask(params, n, shift, seq.entropy, tuple(seq.spawn_key) + (k,), size, int(cap), sampler, tuple(charts))
        for k, size in enumerate(block_sizes(reps))
    ]
    results = parallel_map(run_block, tasks, workers)
    runs = np.concatenate([r[0] for r in results], axis=1)
    capped = np.sum([r[1] for r in results], axis=0)
    degenerate = sum(r[2] for r in results)
    return runs, capped, degenerate


# ---------------------------------------------------------------- scores


@dataclass(frozen=True)
class SigmaScore:
    """|T - center| / scale; the chart signals when the score exceeds L."""

    center: float
    scale: float

    def __call__(self, t: np.ndarray) -> np.ndarray:
        return np.abs(t - self.center) / self.scale


class TailScore:
    """-2 min(F(T), 1 - F(T)) against a reference sample; signals when > -alpha.

    F interpolates the reference order statistics exactly as the linear
    quantile rule does, so the score threshold ``-alpha`` reproduces the
    equal-tail quantile limits.
    """

    def __init__(self, reference: np.ndarray):
        self.reference = np.sort(np.asarray(reference, dtype=float))
        self.probs = np.linspace(0.0, 1.0, self.reference.size)

    def __call__(self, t: np.ndarray) -> np.ndarray:
        f = np.interp(t, self.reference, self.probs)
        return -2.0 * np.minimum(f, 1.0 - f)


@dataclass(frozen=True)
class ScoreTask(BlockTask):
    spec: StatisticSpec | None = None
    score: object = None
    lo: float = 0.0
    hi: float = 0.0


def score_block(task: ScoreTask) -> tuple[np.ndarray, np.ndarray, int]:
    """Stream one block until ``size`` runs end above ``hi``.

    Keeps only (position, score) pairs with score > lo; that is enough to
    rebuild the run lengths for any threshold in [lo, hi].  Returns
    (positions, scores, end position).
    """
    source = SubgroupSource(task.params, task.n, task.shift, task.stream(), task.spec.kind.needs_slope, task.sampler)
    col = RunCollector(task.size, task.cap)
    pos = 0
    keep_pos, keep_score = [], []
    while not col.done:
        y_bar, x_bar, slope = source.next_chunk()
        s = task.score(task.spec(task.params, y_bar, x_bar, slope))
        idx = np.flatnonzero(s > task.lo)
        keep_pos.append(idx + (pos + 1))
        keep_score.append(s[idx])
        pos += s.size
        col.feed(idx[s[idx] > task.hi] + (pos - s.size + 1), pos)
    return np.concatenate(keep_pos), np.concatenate(keep_score), pos


def first_runs(signals: np.ndarray, end: int, cap: int, size: int) -> tuple[np.ndarray, int]:
    col = RunCollector(size, cap)
    col.feed(signals, end)
    return col.runs(), col.capped


def iter_blocks(reps: int) -> Iterable[tuple[int, int]]:
    return enumerate(block_sizes(reps))
