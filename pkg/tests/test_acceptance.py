"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed live) or as a
script, ``python tests/test_acceptance.py``, which prints the summary table and
exits nonzero if any criterion fails. The training-heavy criteria share cached
runs on the default synthetic benchmark; a full pass takes about an hour
on one CPU core.
"""

from __future__ import annotations

import functools
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from privepi import dataio as dio
from privepi import diffcore as dc
from privepi import epiquant as eq
from privepi import metapop as mp
from privepi import nowcast as nc
from privepi import privacy as pv
from privepi import scenario as sc
from privepi import training as tr
from privepi.neural import LSTMBaseline, lstm_forecast

import oracles

pytestmark = pytest.mark.slow

BENCH_SEEDS = (0, 1, 2)   # synthetic draws averaged for the comparative criteria
T_TRAIN, H = 343, 28
LR = 2e-3
LSTM_EPOCHS = 400
QUANTILE_RUNS = 20
QUANTILE_EPOCHS = 2000


def rmse(truth, pred) -> float:
    return eq.rmse(truth, pred)


# -- shared runs -------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def bench(seed: int) -> dio.SyntheticData:
    return dio.synth_generate(dio.SyntheticSpec(seed=seed))


@functools.lru_cache(maxsize=None)
def private_panel(seed: int, eps: float) -> np.ndarray:
    s = bench(seed)
    zp, _ = pv.privatize_pipeline(s.transactions, pv.PrivacyConfig("laplace", eps), s.zips,
                                  mp.n_weeks(s.spec.days), seed=100 + seed)
    return zp.matrix()


@functools.lru_cache(maxsize=None)
def trained(seed: int, eps: float = math.inf, loss: str = "mse", epochs: int = 2000, model_seed: int = 0):
    """Train on days 1..343 of a synthetic draw and forecast the held-out 28 days."""
    s = bench(seed)
    z = private_panel(seed, eps)
    data = tr.TrainingData(s.panel.values[:T_TRAIN], z, s.panel.cases[:T_TRAIN])
    cfg = tr.TrainConfig(lr=LR, epochs=epochs, seed=model_seed, loss=loss)
    t0 = time.time()
    model = tr.train(cfg, data, s.contact, s.population)
    elapsed = time.time() - t0
    fc = tr.forecast(model, s.panel.values, z, H)
    return model, fc, elapsed


@functools.lru_cache(maxsize=None)
def lstm_rmse(seed: int) -> float:
    s = bench(seed)
    z = private_panel(seed, math.inf)
    daily = np.repeat(z, 7, axis=1)[:, :s.panel.T].T
    base = LSTMBaseline(s.panel.F, z.shape[0], seed=seed)
    base.fit(s.panel.values[:T_TRAIN], daily[:T_TRAIN], epochs=LSTM_EPOCHS)
    pred = lstm_forecast(base, s.panel.values, daily, T_TRAIN, H)
    return rmse(truth(seed), pred)


def truth(seed: int) -> np.ndarray:
    return bench(seed).panel.cases[T_TRAIN:T_TRAIN + H]


@functools.lru_cache(maxsize=None)
def nowcast_run():
    s = bench(0)
    cfg = tr.TrainConfig(lr=LR, epochs=2000, seed=0)
    return nc.nowcast(cfg, s.panel.values, private_panel(0, math.inf), s.triangle, T_TRAIN, nc.DEFAULT_WINDOW,
                      0, s.contact, s.population)


# -- criteria ----------------------------------------------------------------------

C3 = np.array([[0.6, 0.3, 0.1], [0.3, 0.5, 0.2], [0.1, 0.2, 0.7]])
N3 = np.array([4e5, 6e5, 2e5])


def check_gradient_through_pipeline():
    T = 28
    rng = np.random.default_rng(0)
    W = mp.n_weeks(T)
    weekly = np.column_stack([np.linspace(0.5, 0.3, W), np.full(W, 0.2), np.full(W, 0.15),
                              np.full(W, 0.002), np.full(W, 0.01)])
    y = mp.simulate(mp.CompartmentState.seeded(N3, N3 * 1e-3), C3, N3, mp.expand_weekly(weekly, T)).values()
    public = np.column_stack([y * np.exp(0.1 * rng.standard_normal(T)), rng.normal(size=T)])
    data = tr.TrainingData(public, rng.uniform(50, 150, (3, W)), y)
    model = tr.build_model(tr.TrainConfig(seed=1), data, C3, N3)
    leaves = {**model.net.weights, **model.adapter.weights}

    def f(g, w):
        return tr.combined_loss(*tr._forward_losses(model, w, data), 0.3)

    t0 = time.time()
    err = dc.check_gradient(f, leaves, h=1e-5)
    elapsed = time.time() - t0
    n = sum(v.size for v in leaves.values())
    return err < 1e-4 and elapsed < 120, f"max rel err {err:.2e} over {n} weights, {elapsed:.0f}s"


def check_conservation():
    s = dio.SyntheticSpec()
    params = dio.synth_generate(s).params
    N = mp.DEFAULT_POPULATION
    z = mp.CompartmentState.seeded(N, s.seed_fraction * N)
    out = mp.simulate(z, mp.DEFAULT_CONTACT, N, mp.expand_weekly(params, 365))
    traj = out.trajectory()                                  # (366, 5, m)
    step_change = np.diff(traj, axis=0)
    drift = max(abs(math.fsum(step_change[t, :, i])) for t in range(365) for i in range(traj.shape[2]))
    ok = drift <= 1e-9 and out.diagnostics.clamp_events == 0 and traj.min() >= 0
    return ok, (f"max per-step change of a group total {drift:.2e} persons, "
                f"clamp events {out.diagnostics.clamp_events}")


def check_hand_step():
    z = mp.CompartmentState.from_array([990.0, 0.0, 10.0, 0.0, 0.0])
    nxt, _ = mp.step(z, [[1.0]], [1000.0], [0.3, 0.2, 0.1, 0.01, 0.0])
    err = np.abs(nxt.values()[:, 0] - np.array([987.03, 2.97, 8.9, 1.0, 0.1])).max()
    return err <= 1e-12, f"max abs err {err:.1e}"


def check_dp_statistics():
    n = 1_000_000
    b = pv.laplace_scale(1.0)
    noise = pv.laplace_privatize(np.zeros(n), 1.0, seed=11)
    var_err = abs(noise.var() / (2 * b * b) - 1)
    ok = var_err < 0.05
    rr_errs = []
    for eps, k in ((math.log(3), 3), (1.0, 50), (0.007, 50)):
        v = np.random.default_rng(0).integers(0, k, size=n)
        kept = np.mean(pv.rr_categorical(v, k, eps, seed=1) == v)
        rr_errs.append(abs(kept - oracles.rr_truth_probability(eps, k)))
    ok &= max(rr_errs) < 0.01
    # two merchants; neighbouring datasets differ in the second merchant's zip
    eps, k = math.log(3), 3
    a = pv.rr_categorical(np.full(n, 0), k, eps, seed=21)
    c = pv.rr_categorical(np.full(n, 1), k, eps, seed=22)
    ha, hc = np.bincount(a, minlength=k) / n, np.bincount(c, minlength=k) / n
    ratio = np.maximum(ha / hc, hc / ha).max()
    ok &= ratio <= math.exp(eps) * 1.02   # 1e6 trials put ~7 standard errors inside the 2% slack
    return ok, f"laplace var rel err {var_err:.3%}, rr max abs err {max(rr_errs):.4f}, max ratio {ratio:.4f} vs 3"


def check_budget():
    spent = pv.account_merchant_budget(0.007, 627, 0.2)
    ok = f"{spent:.5f}" == "0.87780"
    tx = bench(0).transactions
    try:
        pv.privatize_pipeline(tx, pv.PrivacyConfig("rr", 0.8), bench(0).zips, 53)
        refused = False
    except pv.BudgetError:
        refused = True
    return ok and refused, f"merchant budget {spent:.5f}, overshoot refused: {refused}"


def check_synthetic_recovery():
    model, fc, elapsed = trained(0)
    l0, l1 = model.report.metapop[0], model.report.metapop[-1]
    ours = rmse(truth(0), fc.point)
    persist = rmse(truth(0), np.full(H, bench(0).panel.cases[T_TRAIN - 1]))
    ok = l1 <= 0.1 * l0 and ours <= 0.8 * persist and elapsed < 900
    return ok, (f"L_MetaPop {l0:.0f} -> {l1:.0f}, RMSE {ours:.0f} vs persistence {persist:.0f}, "
                f"training {elapsed:.0f}s")


def check_adapter_value():
    _, fc, _ = trained(0)
    a, r = rmse(truth(0), fc.point), rmse(truth(0), fc.raw)
    return a <= r, f"adapter RMSE {a:.1f} vs raw simulator RMSE {r:.1f}"


def check_privacy_ordering():
    mean = {e: np.mean([rmse(truth(s), trained(s, e)[1].point) for s in BENCH_SEEDS]) for e in (math.inf, 10.0, 1.0)}
    ok = mean[math.inf] <= mean[10.0] <= 1.5 * mean[1.0]
    return ok, (f"mean RMSE over seeds {BENCH_SEEDS}: none {mean[math.inf]:.0f}, "
                f"eps=10 {mean[10.0]:.0f}, eps=1 {mean[1.0]:.0f}")


def check_against_lstm():
    ours = np.mean([rmse(truth(s), trained(s)[1].point) for s in BENCH_SEEDS])
    base = np.mean([lstm_rmse(s) for s in BENCH_SEEDS])
    return ours <= 1.1 * base, f"mean RMSE over seeds {BENCH_SEEDS}: model {ours:.0f}, LSTM {base:.0f}"


def check_nowcast():
    s = bench(0)
    res = nowcast_run()
    stable = s.triangle.stable()
    days = slice(T_TRAIN - nc.DEFAULT_WINDOW - 1, T_TRAIN)
    ours = eq.mape(stable[days], res.values)
    provisional = eq.mape(stable[days], s.triangle.as_of(T_TRAIN)[days])
    return ours < provisional, f"MAPE over days {days.start + 1}..{days.stop}: nowcast {ours:.2f}% vs real-time {provisional:.2f}%"


def check_rt():
    inc = eq.renewal_simulation(1.5, 200, seed=0)
    avg = float(np.mean(eq.estimate_rt(inc).mean[29:200]))
    ok = abs(avg / 1.5 - 1) <= 0.05
    s = bench(0)
    res = nowcast_run()
    a = eq.estimate_rt(res.revised)
    b = eq.estimate_rt(s.triangle.stable()[:T_TRAIN])
    last = slice(T_TRAIN - 28, T_TRAIN)    # the revisions are confined to the last weeks
    mad = float(np.mean(np.abs(a.mean[last] - b.mean[last])))
    ok &= mad < 0.15
    return ok, f"renewal mean R {avg:.3f} (truth 1.5), nowcast-vs-stable Rt MAD over last 28 days {mad:.3f}"


def check_intervention_grid():
    model, _, _ = trained(0)
    s = bench(0)
    grid = sc.scenario_grid(model, s.panel.values, private_panel(0, math.inf), T_TRAIN, [0.0, 0.01, 0.05], [1, 2], H)
    cum = {k: v.cumulative[-1] for k, v in grid.items()}
    ok = all(cum[(0.05, d)] <= cum[(0.01, d)] <= cum[(0.0, d)] for d in (1, 2))
    ok &= all(cum[(x, 1)] <= cum[(x, 2)] for x in (0.0, 0.01, 0.05))
    shown = ", ".join(f"x={x:g} d={d}: {cum[(x, d)]:.0f}" for x, d in sorted(cum))
    return ok, shown


def check_quantile_coverage():
    inside = total = 0
    for seed in range(QUANTILE_RUNS):
        _, fc, _ = trained(seed, loss="quantile", epochs=QUANTILE_EPOCHS, model_seed=seed)
        y = truth(seed)
        inside += int(np.sum((fc.quantiles[:, 0] <= y) & (y <= fc.quantiles[:, 2])))
        total += y.size
    cov = inside / total
    return 0.5 <= cov <= 0.75, f"20-80 band coverage {cov:.1%} over {QUANTILE_RUNS} runs x {H} days"


def check_cli_determinism():
    import tempfile
    from test_cli import run_pipeline
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        first, second = run_pipeline(Path(a)), run_pipeline(Path(b))
        files = [(k, p.name) for k, d in first.items() for p in sorted(d.iterdir())]
        diff = [f"{k}/{n}" for k, n in files if (first[k] / n).read_bytes() != (second[k] / n).read_bytes()]
    return not diff, f"{len(files)} files compared, {len(diff)} differ {diff[:3]}"


CRITERIA = [
    (1, "gradient through parameter net, 3-group rollout and adapter", check_gradient_through_pipeline),
    (2, "365-day 4-group conservation, no clamping", check_conservation),
    (3, "single-patch hand step", check_hand_step),
    (4, "Laplace variance, RR retention, RR ratio bound", check_dp_statistics),
    (5, "merchant budget and overshoot refusal", check_budget),
    (6, "synthetic recovery vs persistence", check_synthetic_recovery),
    (7, "adapter improves raw simulator forecast", check_adapter_value),
    (8, "privacy-utility ordering", check_privacy_ordering),
    (9, "forecast vs LSTM baseline", check_against_lstm),
    (10, "nowcast beats real-time reports", check_nowcast),
    (11, "Rt recovery and nowcast Rt tracking", check_rt),
    (12, "intervention grid monotonicity", check_intervention_grid),
    (13, "quantile band coverage", check_quantile_coverage),
    (14, "CLI determinism", check_cli_determinism),
]


def line(n: int, title: str, ok: bool, detail: str) -> str:
    return f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title}: {detail}"


@pytest.mark.parametrize("n,title,check", CRITERIA, ids=[f"c{n:02d}" for n, _, _ in CRITERIA])
def test_criterion(n, title, check, capsys):
    ok, detail = check()
    with capsys.disabled():
        print("\n" + line(n, title, ok, detail), flush=True)
    assert ok, detail


if __name__ == "__main__":
    results = []
    for n, title, check in CRITERIA:
        ok, detail = check()
        results.append(ok)
        print(line(n, title, ok, detail), flush=True)
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 1)
