import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qflow import evolve, flow, liouvillian as lv, metrics, reference as ref
from qflow.exceptions import InvalidConfigurationError, StepTooLargeError

SPEC = lv.ModelSpec.harmonic(1.2, 1.0, 2.0)
OP = lv.compile_model(SPEC)
INIT = ref.GaussianMomentState.coherent(1)


def coherent_model(n_layers=3, seed=0):
    prior = flow.Prior.diagonal_gaussian(INIT.mean, np.diag(INIT.cov))
    return flow.init_identity(2, prior, n_layers=n_layers, rng_seed=seed)


def perturbed(model, scale, seed):
    rng = np.random.default_rng(seed)
    return model.with_theta(model.theta + scale * rng.normal(size=model.n_params))


# -- Adam ----------------------------------------------------------------------------------

def test_adam_zero_gradient_does_not_move():
    p = np.array([1.0, -2.0])
    out, state = evolve.adam_update(p, evolve.adam_init(2), np.zeros(2), 0.1)
    assert np.array_equal(out, p) and state.step == 1


def test_adam_first_step_is_lr_per_coordinate():
    out, _ = evolve.adam_update(np.zeros(3), evolve.adam_init(3), np.array([5.0, -0.01, 300.0]), 1e-3)
    np.testing.assert_allclose(out, [-1e-3, 1e-3, -1e-3], rtol=1e-5)


def test_adam_converges_on_quadratic_bowl():
    target = np.array([0.7, -1.3])
    scale = np.array([1.0, 10.0])
    p, state = np.zeros(2), evolve.adam_init(2)
    for _ in range(2000):
        p, state = evolve.adam_update(p, state, 2 * scale * (p - target), 0.01)
    assert np.linalg.norm(p - target) < 1e-3


# -- configs and records -----------------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"dt": 0.0}, {"T": 0.001}, {"batch_n": 1}, {"clamp_eps": 0.0}, {"epochs_per_step": 0}])
def test_euler_config_validation(kw):
    with pytest.raises(InvalidConfigurationError):
        evolve.EulerKLConfig(**kw)


def test_step_count_from_config():
    assert evolve.EulerKLConfig(dt=0.01, T=15).n_steps == 1500
    assert evolve.TDVPConfig(dt=0.01, T=3).n_steps == 300


def test_trajectory_times_strictly_increase():
    rec = evolve.TrajectoryRecord()
    rec.append(evolve.TrajectoryRow(0, 0.0))
    with pytest.raises(ValueError):
        rec.append(evolve.TrajectoryRow(1, 0.0))


# -- Euler-KL gradient -----------------------------------------------------------------------------

def test_zero_operator_gradient_vanishes():
    m = coherent_model()
    batch = flow.sample(m, 500, np.random.default_rng(0))
    grad, loss, nclamp = evolve.euler_kl_grad(m, m, lv.zero_operator(1), 0.01, batch)
    assert np.all(grad == 0.0) and loss == 0.0 and nclamp == 0


def paired_gradients(nxt, cur, n_batches, batch_n, seed):
    rng = np.random.default_rng(seed)
    with_b, without_b = [], []
    for _ in range(n_batches):
        batch = flow.sample(nxt, batch_n, rng)
        with_b.append(evolve.euler_kl_grad(nxt, cur, OP, 0.01, batch, baseline=True)[0])
        without_b.append(evolve.euler_kl_grad(nxt, cur, OP, 0.01, batch, baseline=False)[0])
    return np.array(with_b), np.array(without_b)


def test_baseline_leaves_gradient_unbiased():
    cur = coherent_model()
    a, b = paired_gradients(perturbed(cur, 0.05, 1), cur, 200, 200, 2)
    se = np.sqrt(a.var(0, ddof=1) / len(a) + b.var(0, ddof=1) / len(b))
    assert np.all(np.abs(a.mean(0) - b.mean(0)) <= 3 * se + 1e-15)


def test_baseline_reduces_variance_at_the_fitted_step():
    cur = coherent_model()
    cfg = evolve.EulerKLConfig(dt=0.01, T=0.01)
    fitted, _, _, _ = evolve.euler_kl_step(cur, OP, cfg, np.random.default_rng(0))
    a, b = paired_gradients(fitted, cur, 200, 1000, 2)
    assert a.var(0).sum() <= b.var(0).sum()


def test_log_ratio_is_log_of_euler_target():
    cur = coherent_model()
    nxt = perturbed(cur, 0.02, 3)
    x = np.random.default_rng(4).normal(size=(50, 2)) - 1.0
    lr, clamped = evolve.kl_log_ratio(nxt, cur, OP, 0.01, x)
    ratio = metrics.liouvillian_ratio(cur, OP, x)
    expected = flow.log_density(nxt, x) - flow.log_density(cur, x) - np.log1p(0.01 * ratio)
    np.testing.assert_allclose(lr, expected, atol=1e-12)
    assert not clamped.any()


def test_all_clamped_batch_is_step_too_large():
    # L Q = -Q has ratio -1 everywhere, so 1 + dt * ratio < 0 for dt = 2
    op = lv.compile_terms([lv.LindbladTerm(-1.0, ((0, 0, 0, 0),))], 1)
    m = coherent_model()
    batch = flow.sample(m, 100, np.random.default_rng(0))
    with pytest.raises(StepTooLargeError):
        evolve.euler_kl_grad(m, m, op, 2.0, batch)
    _, _, nclamp = evolve.euler_kl_grad(m, m, op, 0.5, batch)
    assert nclamp == 0


def test_incompatible_operator_rejected():
    with pytest.raises(InvalidConfigurationError):
        evolve.euler_kl_step(coherent_model(), lv.zero_operator(2), evolve.EulerKLConfig(), np.random.default_rng(0))


# -- Euler-KL steps and runs ---------------------------------------------------------------------------

def test_one_step_moves_centroid_to_oracle():
    m = coherent_model()
    cfg = evolve.EulerKLConfig(dt=0.01, T=0.01)
    new, _, losses, _ = evolve.euler_kl_step(m, OP, cfg, np.random.default_rng(0))
    assert losses.shape == (150,)
    exact = ref.gaussian_moment_solution(SPEC, INIT, 0.01)
    mu, se = metrics.centroid(flow.sample(new, 400_000, np.random.default_rng(1)))
    assert np.all(np.abs(mu - exact.mean) < 3 * se), (mu, exact.mean, se)
    assert np.linalg.norm(mu - exact.mean) < np.linalg.norm(INIT.mean - exact.mean)


def test_zero_operator_run_is_stationary():
    m = coherent_model()
    cfg = evolve.EulerKLConfig(dt=0.01, T=0.1, epochs_per_step=10, batch_n=200)
    out, rec = evolve.euler_kl_run(m, lv.zero_operator(1), cfg)
    assert np.array_equal(out.theta, m.theta)
    assert len(rec.rows) == 11
    assert np.all(np.abs(rec.residuals()[1:]) < 1e-6)


def test_run_is_deterministic(tmp_path):
    cfg = evolve.EulerKLConfig(dt=0.01, T=0.03, epochs_per_step=5, batch_n=100, seed=9)
    hook = lambda model, t, rng: {"l1": metrics.model_l1_loss(model, INIT, 100, rng)[0]}
    a, ra = evolve.euler_kl_run(coherent_model(), OP, cfg, [hook])
    b, rb = evolve.euler_kl_run(coherent_model(), OP, cfg, [hook])
    assert a.theta.tobytes() == b.theta.tobytes()
    assert ra.metric("l1").tobytes() == rb.metric("l1").tobytes()
    flow.save_checkpoint(a, tmp_path / "a.ckpt")
    flow.save_checkpoint(b, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_run_schedule_and_checkpoints(tmp_path):
    cfg = evolve.EulerKLConfig(dt=0.01, T=0.04, epochs_per_step=3, batch_n=50)
    calls = []
    hook = lambda model, t, rng: calls.append(round(t, 9)) or {}
    _, rec = evolve.euler_kl_run(
        coherent_model(), OP, cfg, [hook], cadence=2, checkpoint_dir=tmp_path, checkpoint_every=2
    )
    assert calls == [0.0, 0.02, 0.04]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step_000000.ckpt", "step_000002.ckpt", "step_000004.ckpt"]
    assert rec.at_time(0.02).checkpoint.endswith("step_000002.ckpt")
    assert rec.rows[0].residual is None


def test_persistent_and_reset_optimizer_differ():
    cfg = evolve.EulerKLConfig(dt=0.01, T=0.01, epochs_per_step=5, batch_n=100)
    m = coherent_model()
    rng = np.random.default_rng(0)
    m1, adam, _, _ = evolve.euler_kl_step(m, OP, cfg, rng)
    assert adam.step == 5
    m2, adam2, _, _ = evolve.euler_kl_step(m1, OP, cfg, np.random.default_rng(1), adam)
    assert adam2.step == 10
    reset = evolve.EulerKLConfig(dt=0.01, T=0.01, epochs_per_step=5, batch_n=100, reset_optimizer=True)
    _, adam3, _, _ = evolve.euler_kl_step(m1, OP, reset, np.random.default_rng(1), adam)
    assert adam3.step == 5


# -- TDVP ----------------------------------------------------------------------------------------------

@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_tdvp_metric_is_symmetric_psd(seed):
    m = perturbed(coherent_model(), 0.1, seed)
    S, F = evolve.tdvp_matrices(m, OP, 200, np.random.default_rng(seed))
    assert np.array_equal(S, S.T)
    assert np.linalg.eigvalsh(S).min() > -1e-12
    assert F.shape == (m.n_params,)


def test_tdvp_shift_raises_spectrum():
    m = perturbed(coherent_model(), 0.1, 0)
    S, F = evolve.tdvp_matrices(m, OP, 500, np.random.default_rng(0))
    lam = 0.3
    np.testing.assert_allclose(
        np.linalg.eigvalsh(S + lam * np.eye(len(S))), np.linalg.eigvalsh(S) + lam, atol=1e-10
    )
    x = evolve.solve_metric(S, F, lam)
    np.testing.assert_allclose((S + lam * np.eye(len(S))) @ x, F, atol=1e-10)


def test_solve_metric_falls_back_on_singular_matrix():
    S = np.zeros((3, 3))
    x = evolve.solve_metric(S, np.zeros(3), 0.0)
    assert np.array_equal(x, np.zeros(3))


def test_tdvp_small_batch_warns():
    with pytest.warns(UserWarning, match="rank deficient"):
        evolve.tdvp_matrices(coherent_model(), OP, 10, np.random.default_rng(0))


def test_tdvp_zero_operator_is_stationary():
    m = coherent_model()
    cfg = evolve.TDVPConfig(dt=0.01, T=0.05, batch_n=200)
    out, rec = evolve.tdvp_run(m, lv.zero_operator(1), cfg)
    assert np.array_equal(out.theta, m.theta) and len(rec.rows) == 6


def test_tdvp_first_step_moves_centroid_to_oracle():
    m = coherent_model()
    cfg = evolve.TDVPConfig(dt=0.01, T=0.05, batch_n=4000, shift=1e-4)
    out, _ = evolve.tdvp_run(m, OP, cfg)
    exact = ref.gaussian_moment_solution(SPEC, INIT, 0.05)
    mu, se = metrics.centroid(flow.sample(out, 400_000, np.random.default_rng(1)))
    assert np.linalg.norm(mu - exact.mean) < 0.25 * np.linalg.norm(INIT.mean - exact.mean)
