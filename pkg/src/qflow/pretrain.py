"""Fit a flow to an analytic initial Q function.

Two stages: maximum likelihood on Metropolis-Hastings samples of the target,
then the importance-weighted KL(target || model) gradient.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
import warnings
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np
from scipy.special import gammaln

from qflow import flow as flowmod
from qflow.evolve import AdamState, DivergenceError, adam_init, adam_update
from qflow.exceptions import InvalidConfigurationError
from qflow.flow import FlowModel, FlowStructure

log = logging.getLogger(__name__)


class SamplerTuningWarning(UserWarning):
    pass


class ImportanceWeightWarning(UserWarning):
    pass


@dataclasses.dataclass(frozen=True)
class TargetDensity:
    """Log-density over R^d acting on (N, d) batches."""

    d: int
    log_density: Callable[[np.ndarray], np.ndarray]
    normalized: bool = True

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.asarray(self.log_density(x), dtype=np.float64)

    @classmethod
    def gaussian(cls, mean, cov) -> TargetDensity:
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        chol = np.linalg.cholesky(cov)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        d = mean.size

        def f(x):
            y = np.linalg.solve(chol, (x - mean).T)
            return -0.5 * (y * y).sum(axis=0) - 0.5 * logdet - 0.5 * d * np.log(2 * np.pi)

        return cls(d, f, True)

    @classmethod
    def antisymmetric_bec(cls, n_total: int) -> TargetDensity:
        """Q of (a1^dag - a2^dag)^N |0> / sqrt(2^N N!) on x = (q1, q2, p1, p2)."""
        if n_total < 0:
            raise InvalidConfigurationError("particle number must be >= 0")
        log_norm = 2 * np.log(np.pi) + n_total * np.log(2.0) + gammaln(n_total + 1)

        def f(x):
            r2 = (x[:, 0] - x[:, 1]) ** 2 + (x[:, 2] - x[:, 3]) ** 2
            rad = np.log(np.maximum(r2, 1e-300)) * n_total if n_total else 0.0
            return -(x * x).sum(axis=1) + rad - log_norm

        return cls(4, f, True)


# -- Metropolis-Hastings -------------------------------------------------------------

@dataclasses.dataclass
class MHResult:
    points: np.ndarray
    acceptance_rate: float
    ess: float


def effective_sample_size(chain: np.ndarray) -> float:
    """ESS of a 1-d chain from the autocorrelation summed to its first negative lag."""
    x = np.asarray(chain, dtype=np.float64)
    n = x.size
    x = x - x.mean()
    var = x @ x / n
    if n < 4 or var == 0:
        return float(n)
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    tau = 1.0
    for k in range(1, n):
        if acf[k] < 0:
            break
        tau += 2 * acf[k]
    return float(n / tau)


def mh_sample(
    target: TargetDensity,
    n: int,
    rng: np.random.Generator,
    *,
    proposal_sigma: float = 0.5,
    burn_in: int = 5000,
    thin: int = 5,
    n_chains: int = 1,
    x0=None,
) -> MHResult:
    """Gaussian random-walk Metropolis with ``n_chains`` lockstep chains.

    Draws are concatenated by chain index.  Acceptance outside [0.1, 0.7]
    after burn-in triggers a tuning warning.
    """
    if n < 1:
        raise InvalidConfigurationError("n must be >= 1")
    if not proposal_sigma > 0:
        raise InvalidConfigurationError("proposal_sigma must be positive")
    if thin < 1 or burn_in < 0 or n_chains < 1:
        raise InvalidConfigurationError("thin >= 1, burn_in >= 0, n_chains >= 1 required")
    d = target.d
    per_chain = -(-n // n_chains)
    x = np.zeros((n_chains, d)) if x0 is None else np.broadcast_to(np.asarray(x0, float), (n_chains, d)).copy()
    lp = target(x)
    if x0 is None and not np.all(np.isfinite(lp)):
        # the origin can sit on a zero of the target; start off it
        x = x + rng.standard_normal(x.shape)
        lp = target(x)
    out = np.empty((per_chain, n_chains, d))
    accepted = 0
    total_iters = burn_in + per_chain * thin
    for it in range(total_iters):
        prop = x + proposal_sigma * rng.standard_normal(x.shape)
        lp_prop = target(prop)
        accept = np.log(rng.random(n_chains)) < lp_prop - lp
        x = np.where(accept[:, None], prop, x)
        lp = np.where(accept, lp_prop, lp)
        k = it - burn_in
        if k >= 0:
            accepted += int(accept.sum())
            if (k + 1) % thin == 0:
                out[k // thin] = x
    rate = accepted / (per_chain * thin * n_chains)
    if not 0.1 <= rate <= 0.7:
        warnings.warn(
            f"MH acceptance rate {rate:.3f} outside [0.1, 0.7]; retune proposal_sigma",
            SamplerTuningWarning,
            stacklevel=2,
        )
    chains = np.transpose(out, (1, 0, 2))  # (chain, draw, d)
    ess = float(
        np.min([sum(effective_sample_size(chains[c, :, j]) for c in range(n_chains)) for j in range(d)])
    )
    log.info("MH acceptance %.3f, min per-axis ESS %.0f of %d", rate, ess, per_chain * n_chains)
    return MHResult(chains.reshape(-1, d)[:n], rate, ess)


# -- stage 1: maximum likelihood --------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _nll_epoch(st: FlowStructure):
    lp = jax.vmap(functools.partial(flowmod.log_prob_point, st), in_axes=(None, None, None, 0))

    def loss(theta, mean, var, x):
        return -jnp.mean(lp(theta, mean, var, x))

    vg = jax.value_and_grad(loss)

    def run(theta, m, v, count, mean, var, batches, lr):
        def body(carry, x):
            theta, m, v, count = carry
            val, g = vg(theta, mean, var, x)
            theta, s = adam_update(theta, AdamState(count, m, v), g, lr)
            return (theta, s.m, s.v, s.step), val

        (theta, m, v, count), vals = jax.lax.scan(body, (theta, m, v, count), batches)
        return theta, m, v, count, jnp.mean(vals)

    return jax.jit(run)


def nll_pretrain(
    model: FlowModel,
    points,
    epochs: int = 2000,
    lr: float = 1e-3,
    *,
    batch_size: int = 1024,
    rng: np.random.Generator | None = None,
):
    """Adam on the mean negative log-likelihood of ``points``.

    Each epoch is one shuffled pass in full minibatches.  Returns
    (model, per-epoch mean NLL).
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if x.shape[0] == 0 or x.size == 0:
        raise InvalidConfigurationError("nll_pretrain needs at least one point")
    if x.shape[1] != model.d:
        raise InvalidConfigurationError(f"points have dimension {x.shape[1]}, flow has {model.d}")
    rng = rng if rng is not None else np.random.default_rng(model.seed)
    bs = min(batch_size, x.shape[0])
    nb = x.shape[0] // bs
    run = _nll_epoch(model.structure)
    adam = adam_init(model.n_params)
    theta, m, v, count = jnp.asarray(model.theta), jnp.asarray(adam.m), jnp.asarray(adam.v), 0
    history = np.empty(epochs)
    for e in range(epochs):
        idx = rng.permutation(x.shape[0])[: nb * bs].reshape(nb, bs)
        theta, m, v, count, val = run(theta, m, v, count, model.prior.mean, model.prior.var, x[idx], lr)
        history[e] = float(val)
        if not math.isfinite(history[e]):
            raise DivergenceError(f"non-finite NLL at epoch {e}")
    return model.with_theta(np.asarray(theta)), history


# -- stage 2: importance-weighted KL ------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _kl_step(st: FlowStructure):
    lp = jax.vmap(functools.partial(flowmod.log_prob_point, st), in_axes=(None, None, None, 0))

    def grad(theta, mean, var, x, w):
        return jax.grad(lambda th: -jnp.mean(w * lp(th, mean, var, x)))(theta)

    def step(theta, m, v, count, mean, var, x, w, lr):
        g = grad(theta, mean, var, x, w)
        theta, s = adam_update(theta, AdamState(count, m, v), g, lr)
        return theta, s.m, s.v, s.step

    return jax.jit(grad), jax.jit(step)


def importance_weights(log_target, log_model, self_normalize: bool = True):
    """Weights Q_target/Q_model, optionally divided by their batch mean; plus ESS."""
    lw = np.asarray(log_target) - np.asarray(log_model)
    finite = np.isfinite(lw)
    shift = lw[finite].max() if finite.any() else 0.0
    w = np.where(finite, np.exp(lw - shift), 0.0)
    ess = float(w.sum() ** 2 / (w @ w)) if w.any() else 0.0
    if self_normalize:
        w = w / w.mean() if w.any() else w
    else:
        w = w * np.exp(shift)
    return w, ess


def kl_gradient(model: FlowModel, target: TargetDensity, x, *, self_normalize=True):
    """-(1/N) sum_i w_i grad ln Q_theta(x_i) with x drawn from the model."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w, ess = importance_weights(target(x), flowmod.log_density(model, x), self_normalize)
    grad, _ = _kl_step(model.structure)
    return np.asarray(grad(model.theta, model.prior.mean, model.prior.var, x, w)), ess


def kl_pretrain(
    model: FlowModel,
    target: TargetDensity,
    epochs: int = 2000,
    batch_n: int = 1024,
    lr: float = 1e-3,
    *,
    rng: np.random.Generator | None = None,
    self_normalize: bool = True,
):
    """Adam on the importance-weighted forward KL gradient.

    Returns (model, per-epoch ESS).  An ESS below 1% of the batch warns.
    """
    if not target.normalized and not self_normalize:
        raise InvalidConfigurationError("raw importance weights need a normalized target")
    if target.d != model.d:
        raise InvalidConfigurationError(f"target dimension {target.d} != flow dimension {model.d}")
    rng = rng if rng is not None else np.random.default_rng(model.seed)
    _, step = _kl_step(model.structure)
    fns = model.fns()
    adam = adam_init(model.n_params)
    theta, m, v, count = jnp.asarray(model.theta), jnp.asarray(adam.m), jnp.asarray(adam.v), 0
    ess_hist = np.empty(epochs)
    warned = False
    for e in range(epochs):
        z = model.prior.sample(rng, batch_n)
        x, log_q = fns["sample"](theta, model.prior.mean, model.prior.var, z)
        x = np.asarray(x)
        w, ess = importance_weights(target(x), np.asarray(log_q), self_normalize)
        ess_hist[e] = ess
        if ess < 0.01 * batch_n and not warned:
            warnings.warn(
                f"importance ESS {ess:.1f} < 1% of batch at epoch {e}; KL pretraining may diverge",
                ImportanceWeightWarning,
                stacklevel=2,
            )
            warned = True
        theta, m, v, count = step(theta, m, v, count, model.prior.mean, model.prior.var, x, w, lr)
    theta = np.asarray(theta)
    if not np.all(np.isfinite(theta)):
        raise DivergenceError("non-finite parameters after KL pretraining")
    return model.with_theta(theta), ess_hist


def forward_kl_estimate(model: FlowModel, target: TargetDensity, reference_points) -> tuple[float, float]:
    """KL(target || model) as the mean of ln Q_target - ln Q_model over target samples."""
    x = np.atleast_2d(np.asarray(reference_points, dtype=np.float64))
    diff = target(x) - flowmod.log_density(model, x)
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(len(diff)))
