"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import itertools
import json
import math

import numpy as np
import pytest

from auxchart.charts import ChartConfig, calibrate, limits_three_sigma
from auxchart.cli import main
from auxchart.estimators import ALL_KINDS, EstimatorKind, evaluate, moments_from_pairs, theoretical_mse, weights_for
from auxchart.process import IN_CONTROL, ProcessParameters, RngStream, ShiftSpec, draw_pairs
from auxchart.simulation import ShiftGrid, arl, compare_arl, performance_summary, run_lengths, sdrl_ratio
from auxchart.simulation import ArlProfile

CAL_SEED = 2024
CHECK_SEED = 9001
TARGETS = (200, 371, 500)
NS = (5, 10, 15)
RHOS = (0.3, 0.6, 0.9)
T0, T1, T2, T3 = ALL_KINDS


def process(rho):
    return ProcessParameters(mu_y=5.0, mu_x=5.0, sigma_y=1.0, sigma_x=1.0, rho_xy=rho)


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")


@pytest.fixture(scope="module")
def calibrations():
    """Lazily calibrated charts keyed by (kind, n, rho, target)."""
    cache = {}

    def get(kind, n, rho, target):
        key = (kind, n, rho, target)
        if key not in cache:
            cache[key] = calibrate(ChartConfig(kind, n, target_arl0=target), process(rho), stream=CAL_SEED)
        return cache[key]

    return get


def focus_charts(calibrations):
    return [(c.config, c.limits) for c in (calibrations(k, 5, 0.9, 371) for k in ALL_KINDS)]


def test_criterion_1_calibration_closure(calibrations, capsys):
    rows = []
    for target, n, rho in itertools.product(TARGETS, NS, RHOS):
        charts = [calibrations(k, n, rho, target) for k in ALL_KINDS]
        entries = compare_arl(
            [(c.config, c.limits) for c in charts], process(rho), IN_CONTROL, reps=200_000, seed=CHECK_SEED
        )
        for kind, e in zip(ALL_KINDS, entries):
            rows.append((kind, n, rho, target, e.arl / target - 1.0))
    worst = max(rows, key=lambda r: abs(r[4]))
    failures = [r for r in rows if abs(r[4]) > 0.03]
    ok = len(rows) == 108 and not failures
    report(capsys, 1, ok, f"{len(rows) - len(failures)}/{len(rows)} charts within +/-3% of target; "
           f"worst {worst[0]} n={worst[1]} rho={worst[2]} ARL0={worst[3]}: {worst[4]:+.2%}")
    assert ok, failures


def test_criterion_2_normal_theory_oracle(capsys):
    p = process(0.9)
    cfg = ChartConfig(T0, 5, coefficient=3.0)
    e = arl(cfg, limits_three_sigma(cfg, p), p, IN_CONTROL, reps=1_000_000, seed=CHECK_SEED)
    z = (e.arl - 370.4) / e.se
    ok = abs(z) <= 3
    report(capsys, 2, ok, f"T0 L=3 ARL0 = {e.arl:.2f} (SE {e.se:.2f}), {z:+.2f} SE from 370.4")
    assert ok


def test_criterion_3_mse_first_order(capsys):
    p = ProcessParameters(5.0, 5.0, 1.0, 1.0, 0.9)  # C_y = C_x = 0.2
    n, total, batch = 15, 1_000_000, 100_000
    w = weights_for(p, n)
    gen = RngStream(CHECK_SEED).generator
    sq = {k: 0.0 for k in (T1, T2, T3)}
    diff = []
    for _ in range(total // batch):
        y, x = draw_pairs(p, n, IN_CONTROL, gen, batch)
        yb, xb, b, _ = moments_from_pairs(y, x)
        err = {k: evaluate(k, yb, xb, b, p, w) - p.mu_y for k in sq}
        for k in sq:
            sq[k] += float(err[k] @ err[k])
        diff.append(err[T3] ** 2 - err[T2] ** 2)
    mse = {k: v / total for k, v in sq.items()}
    eq11 = theoretical_mse(T1, p, n)
    rel1 = mse[T1] / eq11 - 1
    rel2 = mse[T2] / eq11 - 1
    d = np.concatenate(diff)
    ok = abs(rel1) <= 0.10 and abs(rel2) <= 0.15 and mse[T3] <= mse[T2]
    report(capsys, 3, ok, f"MSE(T1) {mse[T1]:.5f} ({rel1:+.1%} vs {eq11:.5f}), MSE(T2) {mse[T2]:.5f} ({rel2:+.1%}), "
           f"MSE(T3) {mse[T3]:.5f} <= MSE(T2) by {-d.mean() / (d.std() / math.sqrt(d.size)):.1f} paired SE")
    assert ok


def test_criterion_4_arl_ordering(calibrations, capsys):
    p = process(0.9)
    e = dict(zip(ALL_KINDS, compare_arl(focus_charts(calibrations), p, ShiftSpec(1.0), reps=100_000, seed=CHECK_SEED)))

    def margin(a, b):
        return (e[b].arl - e[a].arl) / math.hypot(e[a].se, e[b].se)

    margins = [margin(T3, T2), margin(T2, T1), margin(T1, T0)]
    ok = all(m >= 3 for m in margins)
    arls = ", ".join(f"{k} {e[k].arl:.4f}" for k in ALL_KINDS)
    report(capsys, 4, ok, f"ARL at delta=1: {arls}; margins {', '.join(f'{m:.1f}' for m in margins)} combined SE")
    assert ok


def test_criterion_5_eql_pci(calibrations, capsys):
    p = process(0.9)
    grid = ShiftGrid()
    charts = focus_charts(calibrations)
    per_delta = [compare_arl(charts, p, ShiftSpec(d), reps=100_000, seed=CHECK_SEED) for d in grid.deltas]
    profiles = {k: ArlProfile(tuple(row[i] for row in per_delta)) for i, k in enumerate(ALL_KINDS)}
    s = performance_summary(profiles)
    eql_min = min(s, key=lambda k: s[k].eql)
    ok = eql_min is T3 and s[T0].pci > s[T1].pci > 1
    detail = ", ".join(f"{k} EQL {s[k].eql:.4f} PCI {s[k].pci:.3f}" for k in ALL_KINDS)
    report(capsys, 5, ok, detail)
    assert ok


def test_criterion_6_geometric_law(calibrations, capsys):
    p = process(0.9)
    charts = focus_charts(calibrations)
    runs, _, _ = run_lengths(charts, p, IN_CONTROL, 100_000, seed=CHECK_SEED)
    parts, ok = [], True
    for kind, r in zip(ALL_KINDS, runs):
        ratio, se = sdrl_ratio(r)
        z = (ratio - math.sqrt(1 - 1 / r.mean())) / se
        ok &= abs(z) <= 3
        parts.append(f"{kind} {z:+.2f}")
    report(capsys, 6, ok, "sdrl/arl vs sqrt(1 - 1/arl), in SE: " + ", ".join(parts))
    assert ok


def test_criterion_7_table_fixture(tmp_path, table1, capsys):
    cols = list(table1[0])
    data = tmp_path / "table1.csv"
    data.write_text(",".join(cols) + "\n" + "".join(",".join(r[c] for c in cols) + "\n" for r in table1))
    out = {}
    for kind in ("T0", "T3"):
        path = tmp_path / f"{kind}.json"
        code = main(["monitor", str(data), "--column", f"{kind}_arl500", "--prefix", "30",
                     "--coefficient", "3", "-o", str(path)])
        assert code == 0
        out[kind] = json.loads(path.read_text())
    t3, t0 = out["T3"], out["T0"]
    ok = t3["first_signal_after"] == 31 and t3["signals_after"] >= 15 and t3["signals_after"] >= t0["signals_after"]
    report(capsys, 7, ok, f"T3 first signal after 30 at {t3['first_signal_after']}, "
           f"{t3['signals_after']} signals in 31-50; T0 {t0['signals_after']}")
    assert ok


def _bytes(paths):
    return {p.name: p.read_bytes() for p in sorted(paths)}


def test_criterion_8_determinism(tmp_path, monkeypatch, capsys):
    checks = {}
    spec = {"kinds": ["T0", "T1", "T2", "T3"], "n": 5, "rho": 0.6, "target_arl0": 200,
            "grid": [0, 0.5, 1, 2], "reps": 10_000, "seed": 11}
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))

    outputs = []
    for run, threads in enumerate(("1", "2")):
        monkeypatch.setenv("SPC_AUX_THREADS", threads)
        d = tmp_path / f"run{run}"
        d.mkdir()
        assert main(["calibrate", str(spec_path), "-o", str(d / "cal.json")]) == 0
        assert main(["arl-curve", str(spec_path), "-c", str(d / "cal.json"), "-o", str(d / "curves")]) == 0
        assert main(["simulate-data", "-o", str(d / "data.csv"), "--seed", "4"]) == 0
        assert main(["monitor", str(d / "data.csv"), "--kind", "T3", "-o", str(d / "rep.json"),
                     "--annotated", str(d / "ann.csv")]) == 0
        out = tmp_path / f"w{run}.json"
        assert main(["weights-report", "--n", "5", "-o", str(out)]) == 0
        outputs.append({**_bytes(d.glob("*.*")), **_bytes((d / "curves").iterdir()), "weights": out.read_bytes()})
    checks["cli"] = outputs[0] == outputs[1]

    p = process(0.9)
    cfg = ChartConfig(T1, 5, coefficient=2.5)
    lim = limits_three_sigma(cfg, p)
    a = arl(cfg, lim, p, ShiftSpec(0.5), reps=20_000, seed=3, workers=1)
    b = arl(cfg, lim, p, ShiftSpec(0.5), reps=20_000, seed=3, workers=4)
    checks["arl"] = a == b
    c1 = calibrate(ChartConfig(T2, 10, target_arl0=200), p, stream=5, workers=1)
    c2 = calibrate(ChartConfig(T2, 10, target_arl0=200), p, stream=5, workers=3)
    checks["calibrate"] = c1.config == c2.config and c1.achieved_arl == c2.achieved_arl
    ok = all(checks.values())
    report(capsys, 8, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in checks.items()))
    assert ok
