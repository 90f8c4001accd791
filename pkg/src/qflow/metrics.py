"""Monte Carlo quality measures, each returned with a CLT standard error."""

from __future__ import annotations

from typing import Callable, Protocol

import numpy as np

from qflow import flow as flowmod
from qflow.exceptions import DomainError, InvalidConfigurationError
from qflow.flow import FlowModel, SampleBatch
from qflow.liouvillian import QOperator


class DegenerateSupportError(DomainError):
    """The reference density vanished at one of its own samples."""


class ExactDensity(Protocol):
    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray: ...

    def log_density(self, x) -> np.ndarray: ...


def _mean_stderr(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if n == 0:
        raise InvalidConfigurationError("empty batch")
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return float(values.mean()), se


def _points(batch) -> np.ndarray:
    x = batch.points if isinstance(batch, SampleBatch) else batch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidConfigurationError("batch must be a nonempty (N, d) array")
    return x


def l1_loss(
    sim_logdensity: Callable[[np.ndarray], np.ndarray],
    exact: ExactDensity,
    n: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """E_{x~exact} |Q_sim(x)/Q_exact(x) - 1|."""
    x = exact.sample(rng, n)
    log_exact = np.asarray(exact.log_density(x))
    if not np.all(np.isfinite(log_exact)):
        raise DegenerateSupportError("exact density is zero at a sampled point")
    ratio = np.exp(np.asarray(sim_logdensity(x)) - log_exact)
    return _mean_stderr(np.abs(ratio - 1.0))


def model_l1_loss(model: FlowModel, exact: ExactDensity, n: int, rng) -> tuple[float, float]:
    return l1_loss(lambda x: flowmod.log_density(model, x), exact, n, rng)


def centroid(batch) -> tuple[np.ndarray, np.ndarray]:
    x = _points(batch)
    se = x.std(axis=0, ddof=1) / np.sqrt(x.shape[0]) if x.shape[0] > 1 else np.full(x.shape[1], np.nan)
    return x.mean(axis=0), se


def centroid_norm(batch) -> tuple[float, float]:
    """|E x| with first-order (delta method) error propagation."""
    x = _points(batch)
    mu = x.mean(axis=0)
    norm = float(np.linalg.norm(mu))
    n = x.shape[0]
    if n < 2:
        return norm, float("nan")
    cov = np.atleast_2d(np.cov(x, rowvar=False)) / n
    if norm == 0.0:
        return 0.0, float(np.sqrt(np.trace(cov)))
    u = mu / norm
    return norm, float(np.sqrt(max(u @ cov @ u, 0.0)))


def liouvillian_ratio(model: FlowModel, op: QOperator, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if op.is_zero():
        return np.zeros(x.shape[0])
    from qflow.evolve import _ratio_kernel

    _, ratio = _ratio_kernel(model.structure, op)(model.theta, model.prior.mean, model.prior.var, x)
    return np.asarray(ratio)


def liouvillian_loss(model: FlowModel, op: QOperator, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """E_{x~Q_model}[((L Q)/Q)^2]."""
    if op.is_zero():
        return 0.0, 0.0
    x = flowmod.sample(model, n, rng).points
    return _mean_stderr(liouvillian_ratio(model, op, x) ** 2)


def n1_observable(batch, mode: int = 0) -> tuple[float, float]:
    """Occupation of one mode from Q samples: mean of q^2 + p^2 - 1."""
    x = _points(batch)
    if x.shape[1] < 2 or x.shape[1] % 2:
        raise InvalidConfigurationError("need an even coordinate count >= 2")
    m = x.shape[1] // 2
    if not 0 <= mode < m:
        raise InvalidConfigurationError(f"mode {mode} out of range for {m} modes")
    return _mean_stderr(x[:, mode] ** 2 + x[:, m + mode] ** 2 - 1.0)
