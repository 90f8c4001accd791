import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from qflow import flow
from qflow.exceptions import DomainError, InvalidConfigurationError


def random_model(d=2, n_layers=3, seed=0, scale=0.3):
    m = flow.init_identity(d, n_layers=n_layers, rng_seed=seed)
    rng = np.random.default_rng(seed + 1000)
    return m.with_theta(m.theta + scale * rng.standard_normal(m.n_params))


def grid_points(lo, hi, n, d=2):
    ax = np.linspace(lo, hi, n)
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    return ax, np.stack([g.ravel() for g in mesh], axis=-1)


# -- identity initialization ---------------------------------------------------------------

def test_identity_standard_normal_at_origin():
    m = flow.init_identity(2)
    assert flow.log_density(m, [0.0, 0.0]) == pytest.approx(-math.log(2 * math.pi), abs=1e-14)


def test_identity_coherent_prior_at_center():
    prior = flow.Prior.diagonal_gaussian([-1.0, -1.0], 0.5)
    m = flow.init_identity(2, prior)
    assert flow.log_density(m, [-1.0, -1.0]) == pytest.approx(-math.log(math.pi), abs=1e-14)


def test_identity_off_center_value():
    m = flow.init_identity(2)
    assert flow.log_density(m, [1.0, 0.0]) == pytest.approx(-math.log(2 * math.pi) - 0.5, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(
    d=st.sampled_from([2, 4, 6]),
    layers=st.integers(1, 6),
    seed=st.integers(0, 2**16),
)
def test_identity_density_equals_prior(d, layers, seed):
    rng = np.random.default_rng(seed)
    prior = flow.Prior.diagonal_gaussian(rng.normal(size=d), rng.uniform(0.2, 3.0, d))
    m = flow.init_identity(d, prior, layers, seed)
    x = rng.normal(size=(50, d)) * 3
    assert np.max(np.abs(flow.log_density(m, x) - prior.log_prob(x))) < 1e-12
    assert np.array_equal(flow.forward(m, x), x)


@pytest.mark.parametrize("d,layers", [(3, 3), (0, 3), (2, 0)])
def test_init_rejects_bad_shapes(d, layers):
    with pytest.raises(InvalidConfigurationError):
        flow.init_identity(d, n_layers=layers)


def test_prior_rejects_nonpositive_variance():
    with pytest.raises(InvalidConfigurationError):
        flow.Prior.diagonal_gaussian([0.0, 0.0], [1.0, 0.0])


def test_identity_init_weight_ranges():
    m = flow.init_identity(4, n_layers=3, rng_seed=3)
    assert np.all(np.abs(m.theta) <= flow.INIT_SCALE)
    for sl in flow.final_layer_slices(m.structure):
        assert not np.any(m.theta[sl])


# -- sampling --------------------------------------------------------------------------------

def test_identity_sample_moments():
    m = flow.init_identity(2)
    b = flow.sample(m, 10_000, np.random.default_rng(0))
    assert np.all(np.abs(b.points.mean(axis=0)) < 4 / math.sqrt(10_000))
    assert np.all(np.abs(b.points.var(axis=0) - 1) < 0.05)


def test_cached_log_q_matches_density():
    m = random_model(4, seed=5)
    b = flow.sample(m, 500, np.random.default_rng(1))
    assert np.max(np.abs(b.log_q - flow.log_density(m, b.points))) < 1e-10


def test_sample_rejects_zero():
    with pytest.raises(InvalidConfigurationError):
        flow.sample(flow.init_identity(2), 0, np.random.default_rng(0))


def test_samples_match_density_histogram():
    m = random_model(2, seed=11)
    x = flow.sample(m, 100_000, np.random.default_rng(2)).points
    edges = np.linspace(-6, 6, 51)
    counts, _, _ = np.histogram2d(x[:, 0], x[:, 1], bins=[edges, edges])
    # cell probabilities by 4x4 sub-cell midpoint quadrature
    sub = np.linspace(-6, 6, 201)
    mid = 0.5 * (sub[1:] + sub[:-1])
    mesh = np.stack(np.meshgrid(mid, mid, indexing="ij"), -1).reshape(-1, 2)
    dens = np.exp(flow.log_density(m, mesh)).reshape(200, 200) * (sub[1] - sub[0]) ** 2
    probs = dens.reshape(50, 4, 50, 4).sum(axis=(1, 3))
    expected = probs * len(x)
    keep = expected > 5
    chi2 = np.sum((counts[keep] - expected[keep]) ** 2 / expected[keep])
    p = stats.chi2.sf(chi2, keep.sum() - 1)
    assert p > 1e-3


def test_sample_deterministic_given_seed():
    m = random_model(4, seed=2)
    a = flow.sample(m, 64, np.random.default_rng(9)).points
    b = flow.sample(m, 64, np.random.default_rng(9)).points
    assert a.tobytes() == b.tobytes()


# -- normalization and derivatives -----------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_normalization_by_quadrature_2d(seed):
    m = random_model(2, seed=seed)
    ax, pts = grid_points(-10, 10, 401)
    dx = ax[1] - ax[0]
    assert np.exp(flow.log_density(m, pts)).sum() * dx * dx == pytest.approx(1.0, abs=1e-3)


def test_normalization_by_quadrature_4d():
    m = random_model(4, seed=4, scale=0.15)
    ax, pts = grid_points(-7, 7, 41, d=4)
    dx = ax[1] - ax[0]
    assert np.exp(flow.log_density(m, pts)).sum() * dx**4 == pytest.approx(1.0, abs=1e-3)


def test_identity_input_derivatives():
    m = flow.init_identity(2)
    x = np.array([[0.3, -1.2], [2.0, 0.5]])
    g, h = flow.input_derivatives(m, x)
    np.testing.assert_allclose(g, -x, atol=1e-14)
    np.testing.assert_allclose(h, np.broadcast_to(-np.eye(2), h.shape), atol=1e-14)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.sampled_from([2, 4]))
def test_input_derivatives_match_finite_differences(seed, d):
    m = random_model(d, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=d)
    g, h = flow.input_derivatives(m, x)
    eps = 1e-4
    fd_g = np.empty(d)
    fd_h = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        fd_g[i] = (flow.log_density(m, x + e) - flow.log_density(m, x - e)) / (2 * eps)
        gp, _ = flow.input_derivatives(m, x + e)
        gm, _ = flow.input_derivatives(m, x - e)
        fd_h[:, i] = (gp - gm) / (2 * eps)
    assert np.max(np.abs(g - fd_g)) <= 1e-5 * max(1.0, np.max(np.abs(g)))
    assert np.max(np.abs(h - fd_h)) <= 1e-4 * max(1.0, np.max(np.abs(h)))
    assert np.max(np.abs(h - h.T)) < 1e-10


def test_param_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(100):
        m = random_model(2 if k % 2 else 4, seed=k)
        x = rng.normal(size=m.d)
        g = flow.param_grad_log_density(m, x)
        idx = rng.choice(m.n_params, 4, replace=False)
        for i in idx:
            e = np.zeros(m.n_params)
            e[i] = 1e-5
            fd = (flow.log_density(m.with_theta(m.theta + e), x) - flow.log_density(m.with_theta(m.theta - e), x)) / 2e-5
            worst = max(worst, abs(fd - g[i]) / max(1.0, abs(g[i])))
    assert worst < 1e-4


def test_final_bias_sensitivity_nonzero_at_identity():
    m = flow.init_identity(2)
    x = np.array([0.7, -0.4])
    g = flow.param_grad_log_density(m, x)
    last = flow.final_layer_slices(m.structure)[-1]
    assert np.any(np.abs(g[last]) > 1e-3)


def test_score_has_zero_mean():
    m = random_model(2, seed=8)
    x = flow.sample(m, 10_000, np.random.default_rng(3)).points
    s = flow.param_grad_log_density(m, x)
    mean = s.mean(axis=0)
    se = s.std(axis=0, ddof=1) / math.sqrt(len(s))
    assert np.all(np.abs(mean) < 5 * se + 1e-12)


def test_rejects_nonfinite_points():
    with pytest.raises(DomainError):
        flow.log_density(flow.init_identity(2), [np.nan, 0.0])


# -- bijectivity -------------------------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.sampled_from([2, 4, 6]), layers=st.integers(1, 12))
def test_roundtrip(seed, d, layers):
    m = random_model(d, layers, seed)
    z = np.random.default_rng(seed).normal(size=(1000, d)) * 2
    x = flow.forward(m, z)
    assert np.max(np.abs(flow.inverse(m, x) - z)) < 1e-9
    assert np.max(np.abs(flow.forward(m, flow.inverse(m, z)) - z)) < 1e-9


def test_roundtrip_with_saturated_scale():
    # huge weights on the scale rows only, so |s| sits on the clamp
    m = random_model(2, seed=1)
    theta = m.theta.copy()
    st_ = m.structure
    offset = 0
    for _ in range(st_.n_layers):
        for k, shape in enumerate(flow._layer_shapes(st_)):
            size = int(np.prod(shape))
            if k == 4:
                block = theta[offset:offset + size].reshape(shape)
                block[: st_.half] *= 100.0
                theta[offset:offset + size] = block.ravel()
            offset += size
    m = m.with_theta(theta)
    z = np.random.default_rng(0).normal(size=(1000, 2))
    x, logdet = m.fns()["forward"](m.theta, z)
    x, logdet = np.asarray(x), np.asarray(logdet)
    assert np.all(np.isfinite(x))
    assert np.max(np.abs(logdet)) > 0.9 * st_.s_cap
    assert np.max(np.abs(logdet)) <= st_.n_layers * st_.s_cap + 1e-9
    assert np.max(np.abs(flow.inverse(m, x) - z)) < 1e-9


def test_log_density_two_paths_agree():
    m = random_model(4, seed=3)
    z = np.random.default_rng(1).normal(size=(200, 4))
    x, logq = m.fns()["sample"](m.theta, m.prior.mean, m.prior.var, z)
    assert np.max(np.abs(np.asarray(logq) - flow.log_density(m, np.asarray(x)))) < 1e-10


def test_model_is_immutable():
    m = flow.init_identity(2)
    with pytest.raises(ValueError):
        m.theta[0] = 1.0


# -- checkpoints -----------------------------------------------------------------------------------

def test_checkpoint_roundtrip_byte_exact(tmp_path):
    prior = flow.Prior.diagonal_gaussian([-1.0, 0.25, 3.0, 1e-7], [0.5, 2.0, 1.0 / 3.0, 1.0])
    m = flow.init_identity(4, prior, 5, rng_seed=42)
    m = m.with_theta(m.theta + np.random.default_rng(0).normal(size=m.n_params) / 7)
    path = tmp_path / "m.ckpt"
    flow.save_checkpoint(m, path, time=1.23)
    m2, t = flow.load_checkpoint(path)
    assert t == 1.23
    assert m2.theta.tobytes() == m.theta.tobytes()
    assert m2.structure == m.structure and m2.seed == 42
    assert m2.prior.mean.tobytes() == prior.mean.tobytes()
    assert m2.prior.var.tobytes() == prior.var.tobytes()
    path2 = tmp_path / "m2.ckpt"
    flow.save_checkpoint(m2, path2, time=t)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_layout(tmp_path):
    m = flow.init_identity(2, n_layers=2)
    path = tmp_path / "m.ckpt"
    flow.save_checkpoint(m, path)
    raw = path.read_bytes()
    head, payload = raw.split(b"\n\n", 1)
    assert head.startswith(b"qflow-checkpoint 1\n")
    assert np.array_equal(np.frombuffer(payload, "<f8"), m.theta)


def test_checkpoint_truncated_payload_rejected(tmp_path):
    m = flow.init_identity(2)
    path = tmp_path / "m.ckpt"
    flow.save_checkpoint(m, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(InvalidConfigurationError):
        flow.load_checkpoint(path)
