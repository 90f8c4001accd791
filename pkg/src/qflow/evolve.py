"""Time evolution of a flow: stochastic Euler-KL and TDVP."""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
import warnings
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np
import scipy.linalg

from qflow import flow as flowmod
from qflow.exceptions import (
    InvalidConfigurationError,
    QFlowError,
    SingularMetricError,
    StepTooLargeError,
    UnsupportedError,
)
from qflow.flow import FlowModel, FlowStructure, SampleBatch
from qflow.liouvillian import QOperator

log = logging.getLogger(__name__)

# Largest number of standard-normal draws generated per jitted chunk.
NOISE_CHUNK = 4_000_000


class DivergenceError(QFlowError, FloatingPointError):
    """The training loss became non-finite."""


# -- Adam ------------------------------------------------------------------------

class AdamState(NamedTuple):
    step: int
    m: np.ndarray
    v: np.ndarray


def adam_init(n: int) -> AdamState:
    return AdamState(0, np.zeros(n), np.zeros(n))


def adam_update(params, state: AdamState, grad, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step; works for numpy and jax arrays alike."""
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    params = params - lr * m_hat / (v_hat ** 0.5 + eps)
    return params, AdamState(step, m, v)


# -- configs and records -----------------------------------------------------------

@dataclasses.dataclass
class EulerKLConfig:
    dt: float = 0.01
    T: float = 15.0
    epochs_per_step: int = 150
    batch_n: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clamp_eps: float = 1e-12
    seed: int = 0
    baseline: bool = True
    reset_optimizer: bool = False
    # learning rate inside each step: "constant", or "cosine" from lr down to 0
    lr_schedule: str = "constant"
    # commit the mean of theta over this trailing fraction of each step's epochs
    average_tail: float = 0.5

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidConfigurationError("dt must be positive")
        if self.T < self.dt:
            raise InvalidConfigurationError("T must be at least dt")
        if self.batch_n < 2:
            raise InvalidConfigurationError("batch_n must be >= 2")
        if self.lr_schedule not in ("constant", "cosine"):
            raise InvalidConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.average_tail < 1.0:
            raise InvalidConfigurationError("average_tail must lie in [0, 1)")
        if not self.clamp_eps > 0:
            raise InvalidConfigurationError("clamp_eps must be positive")
        if self.epochs_per_step < 1:
            raise InvalidConfigurationError("epochs_per_step must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclasses.dataclass
class TDVPConfig:
    dt: float = 0.01
    T: float = 15.0
    batch_n: int = 1000
    shift: float = 0.01
    centered: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidConfigurationError("dt must be positive")
        if self.T < self.dt:
            raise InvalidConfigurationError("T must be at least dt")
        if self.shift < 0:
            raise InvalidConfigurationError("diagonal shift must be >= 0")
        if self.batch_n < 2:
            raise InvalidConfigurationError("batch_n must be >= 2")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclasses.dataclass
class TrajectoryRow:
    step: int
    time: float
    residual: float | None = None
    clamp_count: int = 0
    metrics: dict = dataclasses.field(default_factory=dict)
    checkpoint: str | None = None


@dataclasses.dataclass
class TrajectoryRecord:
    rows: list[TrajectoryRow] = dataclasses.field(default_factory=list)

    def append(self, row: TrajectoryRow) -> None:
        if self.rows and row.time <= self.rows[-1].time:
            raise ValueError("trajectory times must increase strictly")
        self.rows.append(row)

    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.rows])

    def residuals(self) -> np.ndarray:
        return np.array([np.nan if r.residual is None else r.residual for r in self.rows])

    def metric(self, name: str) -> np.ndarray:
        return np.array([r.metrics.get(name, np.nan) for r in self.rows], dtype=float)

    def at_time(self, t: float, tol: float = 1e-9) -> TrajectoryRow:
        for r in self.rows:
            if abs(r.time - t) <= tol:
                return r
        raise KeyError(t)


MetricHook = Callable[[FlowModel, float, np.random.Generator], dict]


# -- jitted kernels ----------------------------------------------------------------

def _hessian_columns(arrs) -> tuple[np.ndarray, np.ndarray]:
    """Distinct Hessian columns the operator needs and each monomial's slot."""
    second = arrs.order == 2
    cols = np.unique(arrs.j[second]) if second.any() else np.zeros(0, dtype=np.int64)
    slot = np.zeros_like(arrs.j)
    for t in np.nonzero(second)[0]:
        slot[t] = int(np.searchsorted(cols, arrs.j[t]))
    return cols, slot


@functools.lru_cache(maxsize=None)
def _ratio_kernel(st: FlowStructure, op: QOperator):
    """Per-point (L Q)/Q of a flow from log-density derivatives (jax)."""
    arrs = op.arrays()
    cols, slot = _hessian_columns(arrs)
    d = st.d
    basis = np.eye(d)[cols] if cols.size else np.zeros((0, d))
    # numpy constants: this closure may first be built while tracing
    coeffs, poly, order = arrs.coeffs, arrs.poly, arrs.order
    ii, jj = arrs.i, arrs.j
    lp = functools.partial(flowmod.log_prob_point, st)

    def point(theta, mean, var, x):
        grad_fn = jax.grad(lambda y: lp(theta, mean, var, y))
        logq, g = jax.value_and_grad(lambda y: lp(theta, mean, var, y))(x)
        if coeffs.size == 0:
            return logq, jnp.zeros(())
        if basis.shape[0]:
            hcols = jax.vmap(lambda v: jax.jvp(grad_fn, (x,), (v,))[1])(basis)
        else:
            hcols = jnp.zeros((1, d))
        px = jnp.prod(x[None, :] ** poly, axis=-1)
        gi, gj = g[ii], g[jj]
        hij = hcols[slot, ii]
        dv = jnp.where(order == 0, 1.0, jnp.where(order == 1, gi, hij + gi * gj))
        return logq, jnp.sum(coeffs * px * dv)

    return jax.vmap(point, in_axes=(None, None, None, 0))


def _kl_pieces(st, op, theta_next, theta_cur, mean, var, x, dt, clamp_eps):
    """Log-ratio ln(Q_next / Q_L) at x, plus clamp mask."""
    ratio_fn = _ratio_kernel(st, op)
    logq_cur, ratio = ratio_fn(theta_cur, mean, var, x)
    arg = 1.0 + dt * ratio
    clamped = arg < clamp_eps
    log_target = logq_cur + jnp.log(jnp.maximum(arg, clamp_eps))
    lp = jax.vmap(functools.partial(flowmod.log_prob_point, st), in_axes=(None, None, None, 0))
    logq_next = lp(theta_next, mean, var, x)
    return logq_next - log_target, clamped


def _kl_grad(st, op, theta_next, theta_cur, mean, var, x, dt, clamp_eps, baseline):
    log_ratio, clamped = _kl_pieces(st, op, theta_next, theta_cur, mean, var, x, dt, clamp_eps)
    b = jnp.mean(log_ratio)
    weights = jax.lax.stop_gradient(log_ratio - jnp.where(baseline, b, 0.0))
    lp = jax.vmap(functools.partial(flowmod.log_prob_point, st), in_axes=(None, None, None, 0))
    surrogate = lambda th: jnp.mean(weights * lp(th, mean, var, x))
    return jax.grad(surrogate)(theta_next), b, jnp.sum(clamped)


@functools.lru_cache(maxsize=None)
def _kl_grad_jit(st, op):
    return jax.jit(functools.partial(_kl_grad, st, op))


@functools.lru_cache(maxsize=None)
def _euler_chunk(st: FlowStructure, op: QOperator):
    """Run a chunk of Adam epochs of the Euler-KL fit with lax.scan."""
    fwd = jax.vmap(functools.partial(flowmod.forward_point, st), in_axes=(None, 0))

    def run(theta, m, v, count, acc, theta_cur, mean, var, noise, lrs, keep, dt, clamp_eps, b1, b2, eps, baseline):
        def body(carry, xs):
            theta, m, v, count, acc = carry
            z, lr, k = xs
            x, _ = fwd(theta, z)
            x = jax.lax.stop_gradient(x)
            grad, loss, nclamp = _kl_grad(
                st, op, theta, theta_cur, mean, var, x, dt, clamp_eps, baseline
            )
            theta, state = adam_update(theta, AdamState(count, m, v), grad, lr, b1, b2, eps)
            return (theta, state.m, state.v, state.step, acc + k * (theta - theta_cur)), (loss, nclamp)

        carry = (theta, m, v, count, acc)
        (theta, m, v, count, acc), (losses, clamps) = jax.lax.scan(body, carry, (noise, lrs, keep))
        return theta, m, v, count, acc, losses, clamps

    return jax.jit(run)


@functools.lru_cache(maxsize=None)
def _tdvp_kernel(st: FlowStructure, op: QOperator):
    ratio_fn = _ratio_kernel(st, op)
    fwd = jax.vmap(functools.partial(flowmod.forward_point, st), in_axes=(None, 0))
    score = jax.vmap(
        jax.grad(functools.partial(flowmod.log_prob_point, st)), in_axes=(None, None, None, 0)
    )

    def run(theta, mean, var, z):
        x, _ = fwd(theta, z)
        _, ratio = ratio_fn(theta, mean, var, x)
        return score(theta, mean, var, x), ratio

    return jax.jit(run)


# -- Euler-KL -----------------------------------------------------------------------

def euler_kl_grad(
    model_next: FlowModel,
    model_cur: FlowModel,
    op: QOperator,
    dt: float,
    batch: SampleBatch,
    *,
    clamp_eps: float = 1e-12,
    baseline: bool = True,
):
    """Control-variate KL gradient on one batch drawn from ``model_next``.

    Returns (gradient, loss, clamp_count) where loss is the batch mean of
    ln(Q_next / Q_L), an estimate of KL(Q_next || Q_L).
    """
    _check_compatible(model_next, model_cur, op)
    fn = _kl_grad_jit(model_next.structure, op)
    grad, loss, nclamp = fn(
        model_next.theta, model_cur.theta, model_cur.prior.mean, model_cur.prior.var,
        np.asarray(batch.points, dtype=np.float64), float(dt), float(clamp_eps), bool(baseline),
    )
    nclamp = int(nclamp)
    if nclamp == len(batch):
        raise StepTooLargeError(f"all {nclamp} samples had 1 + dt*ratio < {clamp_eps}; reduce dt")
    return np.asarray(grad), float(loss), nclamp


def kl_log_ratio(model_next: FlowModel, model_cur: FlowModel, op: QOperator, dt: float, x, clamp_eps=1e-12):
    """ln(Q_next / Q_L) at points x (diagnostics and tests)."""
    lr, clamped = jax.jit(functools.partial(_kl_pieces, model_next.structure, op))(
        model_next.theta, model_cur.theta, model_cur.prior.mean, model_cur.prior.var,
        np.atleast_2d(np.asarray(x, dtype=np.float64)), float(dt), float(clamp_eps),
    )
    return np.asarray(lr), np.asarray(clamped)


def _check_compatible(a: FlowModel, b: FlowModel, op: QOperator) -> None:
    if a.structure != b.structure:
        raise InvalidConfigurationError("models must share an architecture")
    if op.dim != a.d:
        raise InvalidConfigurationError(f"operator acts on {op.dim} dims, flow has {a.d}")
    if op.max_order > 2:
        raise UnsupportedError("Euler-KL needs an operator of order <= 2")


def euler_kl_step(
    model: FlowModel,
    op: QOperator,
    cfg: EulerKLConfig,
    rng: np.random.Generator,
    adam: AdamState | None = None,
):
    """Fit Q^{t+dt} for one time step starting from (and frozen against) ``model``.

    Returns (new_model, adam_state, epoch_losses, clamp_count).
    """
    _check_compatible(model, model, op)
    st = model.structure
    run = _euler_chunk(st, op)
    if adam is None or cfg.reset_optimizer:
        adam = adam_init(model.n_params)
    theta = jnp.asarray(model.theta)
    m, v, count = jnp.asarray(adam.m), jnp.asarray(adam.v), adam.step
    theta_cur = jnp.asarray(model.theta)
    n_ep = cfg.epochs_per_step
    if cfg.lr_schedule == "cosine":
        lrs = 0.5 * cfg.lr * (1.0 + np.cos(np.pi * np.arange(n_ep) / n_ep))
    else:
        lrs = np.full(n_ep, cfg.lr)
    n_avg = int(round(cfg.average_tail * n_ep))
    keep = (np.arange(n_ep) >= n_ep - n_avg).astype(np.float64)
    acc = jnp.zeros_like(theta)
    per_chunk = max(1, NOISE_CHUNK // (cfg.batch_n * model.d))
    losses, clamps = [], []
    done = 0
    while done < n_ep:
        k = min(per_chunk, n_ep - done)
        noise = model.prior.sample(rng, k * cfg.batch_n).reshape(k, cfg.batch_n, model.d)
        theta, m, v, count, acc, l, c = run(
            theta, m, v, count, acc, theta_cur, model.prior.mean, model.prior.var, noise,
            lrs[done:done + k], keep[done:done + k],
            cfg.dt, cfg.clamp_eps, cfg.beta1, cfg.beta2, cfg.eps, cfg.baseline,
        )
        losses.append(np.asarray(l))
        clamps.append(np.asarray(c))
        done += k
    if n_avg:
        # averaging displacements keeps an unmoved theta bit-exact
        theta = theta_cur + acc / n_avg
    losses = np.concatenate(losses)
    clamps = np.concatenate(clamps)
    if np.any(clamps >= cfg.batch_n):
        raise StepTooLargeError("every sample of an epoch needed clamping; reduce dt")
    theta = np.asarray(theta)
    if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(theta))):
        raise DivergenceError("non-finite Euler-KL loss")
    new_adam = AdamState(int(count), np.asarray(m), np.asarray(v))
    return model.with_theta(theta), new_adam, losses, int(clamps.sum())


def _hook_steps(n_steps: int, cadence: int | None, at_steps: Sequence[int] | None) -> set[int]:
    steps: set[int] = set()
    if cadence:
        steps.update(range(0, n_steps + 1, cadence))
    if at_steps is not None:
        steps.update(int(s) for s in at_steps)
    return steps


def euler_kl_run(
    model: FlowModel,
    op: QOperator,
    cfg: EulerKLConfig,
    hooks: Sequence[MetricHook] = (),
    *,
    cadence: int | None = 1,
    at_steps: Sequence[int] | None = None,
    t0: float = 0.0,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    on_step: Callable[[int, FlowModel], None] | None = None,
):
    """Algorithm loop: freeze Q^t, fit Q^{t+dt} for epochs_per_step Adam updates, commit.

    Hooks are evaluated on the committed model at step 0 and at every step in
    the schedule; each returns a dict of metric columns.  Returns
    (final_model, TrajectoryRecord).
    """
    rng = np.random.default_rng(cfg.seed)
    metric_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    record = TrajectoryRecord()
    schedule = _hook_steps(cfg.n_steps, cadence, at_steps)
    adam = None

    def row_for(step, m, residual, nclamp):
        t = t0 + step * cfg.dt
        row = TrajectoryRow(step, t, residual, nclamp)
        if step in schedule:
            for hook in hooks:
                row.metrics.update(hook(m, t, metric_rng))
        if checkpoint_dir is not None and checkpoint_every and step % checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"step_{step:06d}.ckpt"
            flowmod.save_checkpoint(m, path, time=t)
            row.checkpoint = str(path)
        return row

    record.append(row_for(0, model, None, 0))
    for step in range(1, cfg.n_steps + 1):
        try:
            model_new, adam, losses, nclamp = euler_kl_step(model, op, cfg, rng, adam)
        except DivergenceError:
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"diverged_step_{step:06d}.ckpt"
                flowmod.save_checkpoint(model, path, time=t0 + (step - 1) * cfg.dt)
                log.error("non-finite loss at step %d; last finite model saved to %s", step, path)
            raise
        model = model_new
        record.append(row_for(step, model, float(losses[-1]), nclamp))
        if on_step is not None:
            on_step(step, model)
    return model, record


# -- TDVP ---------------------------------------------------------------------------

def tdvp_matrices(model: FlowModel, op: QOperator, batch_n: int, rng: np.random.Generator, centered=False):
    """Monte Carlo estimates of S = E[O O^T] and F = E[O (LQ/Q)] with O = grad_theta ln Q."""
    _check_compatible(model, model, op)
    if batch_n < model.n_params:
        warnings.warn(
            f"batch of {batch_n} is smaller than the {model.n_params} parameters; S is rank deficient",
            stacklevel=2,
        )
    z = model.prior.sample(rng, batch_n)
    O, ratio = _tdvp_kernel(model.structure, op)(model.theta, model.prior.mean, model.prior.var, z)
    O = np.asarray(O)
    ratio = np.asarray(ratio)
    if centered:
        O = O - O.mean(axis=0)
        ratio = ratio - ratio.mean()
    S = O.T @ O / batch_n
    F = O.T @ ratio / batch_n
    return 0.5 * (S + S.T), F


def solve_metric(S: np.ndarray, F: np.ndarray, shift: float) -> np.ndarray:
    """Solve (S + shift I) x = F by Cholesky, falling back to least squares."""
    A = S + shift * np.eye(S.shape[0])
    try:
        c = scipy.linalg.cho_factor(A, lower=True)
        return scipy.linalg.cho_solve(c, F)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(A, F, rcond=None)
        if not np.all(np.isfinite(sol)):
            raise SingularMetricError("metric solve failed after least-squares fallback")
        return sol


def tdvp_step(model: FlowModel, op: QOperator, cfg: TDVPConfig, rng: np.random.Generator) -> FlowModel:
    S, F = tdvp_matrices(model, op, cfg.batch_n, rng, cfg.centered)
    if not np.any(F):
        return model
    theta_dot = solve_metric(S, F, cfg.shift)
    return model.with_theta(model.theta + cfg.dt * theta_dot)


def tdvp_run(
    model: FlowModel,
    op: QOperator,
    cfg: TDVPConfig,
    hooks: Sequence[MetricHook] = (),
    *,
    cadence: int | None = 1,
    at_steps: Sequence[int] | None = None,
    t0: float = 0.0,
    on_step: Callable[[int, FlowModel], None] | None = None,
):
    rng = np.random.default_rng(cfg.seed)
    metric_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    record = TrajectoryRecord()
    schedule = _hook_steps(cfg.n_steps, cadence, at_steps)

    def row_for(step, m):
        t = t0 + step * cfg.dt
        row = TrajectoryRow(step, t)
        if step in schedule:
            for hook in hooks:
                row.metrics.update(hook(m, t, metric_rng))
        return row

    record.append(row_for(0, model))
    for step in range(1, cfg.n_steps + 1):
        model = tdvp_step(model, op, cfg, rng)
        record.append(row_for(step, model))
        if on_step is not None:
            on_step(step, model)
    return model, record
