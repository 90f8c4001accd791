"""End-to-end acceptance runs.

Each test prints one ``criterion N: PASS|FAIL`` line (also collected in the
terminal summary) and then asserts the same condition.  The runs are long;
deselect them with ``-m "not slow"`` for a quick check.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.signal import savgol_filter

from qflow import evolve, flow, liouvillian as lv, metrics, reference as ref

PARAM_SEED = 7
N_METRIC = 20_000
TESTS = Path(__file__).parent

pytestmark = pytest.mark.slow


def harmonic_setup(n_modes):
    spec = lv.ModelSpec.draw_harmonic(n_modes, np.random.default_rng(PARAM_SEED))
    init = ref.GaussianMomentState.coherent(n_modes)
    model = flow.init_identity(2 * n_modes, flow.Prior.diagonal_gaussian(init.mean, np.diag(init.cov)))
    return spec, lv.compile_model(spec), init, model


def l1_hook(spec, init, op=None):
    def hook(model, t, rng):
        out = {"l1": metrics.model_l1_loss(model, ref.gaussian_moment_solution(spec, init, t), N_METRIC, rng)[0]}
        if op is not None:
            out["liouvillian_loss"] = metrics.liouvillian_loss(model, op, N_METRIC, rng)[0]
        return out

    return hook


def at_times(record, name, times):
    return {t: record.at_time(t).metrics[name] for t in times}


def fmt(values):
    return " ".join(f"t={t:g}:{v:.3e}" for t, v in values.items())


@pytest.fixture(scope="module")
def one_well_euler_run():
    spec, op, init, model = harmonic_setup(1)
    cfg = evolve.EulerKLConfig(dt=0.01, T=15.0, seed=0)
    steps = [300, 600, 900, 1200, 1500]
    start = time.perf_counter()
    _, rec = evolve.euler_kl_run(model, op, cfg, [l1_hook(spec, init, op)], cadence=None, at_steps=steps)
    return rec, time.perf_counter() - start


def test_criterion_1_one_well_euler_kl(one_well_euler_run, acceptance_report):
    rec, wall = one_well_euler_run
    l1 = at_times(rec, "l1", (3.0, 6.0, 9.0))
    ok = l1[3.0] <= 1e-2 and l1[6.0] <= 5e-3 and l1[3.0] >= l1[6.0] >= l1[9.0]
    acceptance_report(1, ok, f"L1 {fmt(l1)} (limits 1e-2, 5e-3, non-increasing); wall {wall / 60:.1f} min")
    assert ok


def test_criterion_5_liouvillian_loss_decay(one_well_euler_run, acceptance_report):
    rec, _ = one_well_euler_run
    loss = at_times(rec, "liouvillian_loss", (3.0, 15.0))
    ok = loss[15.0] <= 1e-2 * loss[3.0] and loss[15.0] < 1e-4
    acceptance_report(5, ok, f"Liouvillian loss {fmt(loss)} (drop >= 100x, final < 1e-4)")
    assert ok


def test_criterion_2_one_well_tdvp(acceptance_report):
    spec, op, init, model = harmonic_setup(1)
    cfg = evolve.TDVPConfig(dt=0.01, T=6.0, batch_n=1000, shift=0.01, seed=0)
    start = time.perf_counter()
    _, rec = evolve.tdvp_run(model, op, cfg, [l1_hook(spec, init)], cadence=None, at_steps=[300, 600])
    wall = time.perf_counter() - start
    l1 = at_times(rec, "l1", (3.0, 6.0))
    ok = l1[3.0] <= 2e-2 and l1[6.0] <= 1e-2 and wall <= 20 * 60
    acceptance_report(2, ok, f"L1 {fmt(l1)} (limits 2e-2, 1e-2); wall {wall / 60:.1f} min (limit 20)")
    assert ok


def test_criterion_3_two_well_euler_kl(acceptance_report):
    spec, op, init, model = harmonic_setup(2)
    cfg = evolve.EulerKLConfig(dt=0.01, T=6.0, seed=0)
    start = time.perf_counter()
    _, rec = evolve.euler_kl_run(model, op, cfg, [l1_hook(spec, init)], cadence=None, at_steps=[600])
    wall = time.perf_counter() - start
    l1 = at_times(rec, "l1", (6.0,))
    ok = l1[6.0] <= 2e-2 and wall <= 60 * 60
    acceptance_report(3, ok, f"L1 {fmt(l1)} (limit 2e-2); wall {wall / 60:.1f} min (limit 60)")
    assert ok


def test_criterion_4_pseudo_spectral_one_well(acceptance_report):
    spec, op, init, _ = harmonic_setup(1)
    times = list(range(3, 16))
    start = time.perf_counter()
    q0 = ref.GridState.from_function(init.density, (256, 256), 10.0).project()
    grids = ref.pseudospectral_solve(op, q0, times, rtol=1e-8, atol=1e-10)
    wall = time.perf_counter() - start
    l1 = {
        t: metrics.l1_loss(g.log_density, ref.gaussian_moment_solution(spec, init, t), N_METRIC,
                           np.random.default_rng(t))[0]
        for t, g in zip(times, grids)
    }
    worst = max(l1.values())
    ok = worst <= 1e-3 and wall <= 10 * 60
    acceptance_report(4, ok, f"max L1 over t=3..15 {worst:.3e} (limit 1e-3); solve {wall / 60:.1f} min (limit 10)")
    assert ok


# -- bosonic chain ------------------------------------------------------------------------------

def first_stationary_time(times, values, window=11):
    """Time of the first local minimum of |dv/dt| away from the ends.

    A strict extremum of v is a zero of dv/dt and hence such a minimum; so is
    a horizontal inflection, which a plain sign-change search would miss.
    """
    h = times[1] - times[0]
    rate = np.abs(savgol_filter(values, window, 3, deriv=1, delta=h))
    edge = window // 2
    for k in range(edge + 1, len(rate) - edge - 1):
        if rate[k] < rate[k - 1] and rate[k] <= rate[k + 1]:
            return float(times[k])
    return float("nan")


def test_criterion_6_bosonic_desk_scale(bec_pretrained, acceptance_report):
    J, gamma = 1.0, [1.0, 0.0]
    op = lv.compile_model(lv.ModelSpec.bosonic_chain(J, gamma))
    # per-step fit settings of the bosonic experiment: 10^4 samples, 200 epochs, lr 2e-3
    cfg = evolve.EulerKLConfig(dt=0.02, T=2.0, batch_n=10_000, epochs_per_step=200, lr=2e-3, seed=0)
    # one fixed prior draw for every step, so the n1 curve is smooth in t
    n1_hook = lambda model, t, rng: {"n1": metrics.n1_observable(flow.sample(model, 200_000, np.random.default_rng(6)))[0]}
    start = time.perf_counter()
    _, rec = evolve.euler_kl_run(bec_pretrained.model, op, cfg, [n1_hook], cadence=1)
    wall = time.perf_counter() - start

    c0 = ref.antisymmetric_bec_moments(4)
    oracle = lambda t: ref.bosonic_moment_solution(J, gamma, c0, t)[0, 0].real
    n1 = at_times(rec, "n1", (0.5, 1.0, 2.0))
    rel = {t: abs(v - oracle(t)) / oracle(t) for t, v in n1.items()}

    times = rec.times()
    fine = np.linspace(0.0, 2.0, 2001)
    t_exact = first_stationary_time(fine, np.array([oracle(t) for t in fine]), window=101)
    t_flow = first_stationary_time(times, rec.metric("n1"))
    phase_err = abs(t_flow - t_exact) / t_exact

    ok = max(rel.values()) <= 0.10 and phase_err <= 0.15 and wall <= 2 * 3600
    acceptance_report(
        6, ok,
        f"n1 rel. error {fmt(rel)} (limit 10%); first stationary point {t_flow:.3f} vs {t_exact:.3f} "
        f"({100 * phase_err:.1f}%, limit 15%); pretrain KL {bec_pretrained.kl:.3f}; wall {wall / 60:.1f} min",
    )
    assert ok


# -- optional benchmark --------------------------------------------------------------------------

@pytest.mark.benchmark
@pytest.mark.skipif(os.environ.get("QFLOW_RUN_BENCHMARK") != "1", reason="set QFLOW_RUN_BENCHMARK=1 to run")
def test_criterion_7_twenty_well_benchmark(acceptance_report):
    spec, op, init, model = harmonic_setup(20)
    cfg = evolve.EulerKLConfig(dt=0.01, T=3.0, batch_n=10_000, seed=0)
    start = time.perf_counter()
    _, rec = evolve.euler_kl_run(model, op, cfg, [l1_hook(spec, init)], cadence=None, at_steps=[300])
    wall = time.perf_counter() - start
    l1 = at_times(rec, "l1", (3.0,))
    ok = l1[3.0] <= 0.3
    acceptance_report(7, ok, f"L1 {fmt(l1)} (limit 0.3); wall {wall / 3600:.1f} h")
    assert ok


# -- property suites -------------------------------------------------------------------------------

PROPERTY_SUITES = {
    "flow invariants": ["test_flow.py"],
    "operator compiler": ["test_liouvillian.py"],
    "trace, roundtrips, Fock vs moments": ["test_fock.py"],
    "baseline, TDVP metric, determinism": ["test_evolve.py", "-k", "baseline or metric_is_symmetric or deterministic"],
}


@pytest.mark.parametrize("suite", list(PROPERTY_SUITES))
def test_criterion_8_property_suites(suite, acceptance_report):
    args = PROPERTY_SUITES[suite]
    start = time.perf_counter()
    res = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(TESTS / args[0]), *args[1:]],
        capture_output=True, text=True, cwd=TESTS.parent,
    )
    wall = time.perf_counter() - start
    summary = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr[-200:]
    ok = res.returncode == 0 and wall < 300
    acceptance_report(8, ok, f"{suite}: {summary} ({wall:.0f} s, limit 300 s)")
    assert ok, res.stdout[-3000:]
