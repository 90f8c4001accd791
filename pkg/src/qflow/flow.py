"""Affine-coupling (RealNVP) normalizing flow over R^d with exact derivatives.

Parameters live in one flat float64 vector ``theta`` so that optimizers,
the TDVP metric and checkpoints all share a single fixed layout.  Per
coupling layer the layout is ``W1, b1, W2, b2, W3, b3`` (row-major weights
of shape ``(out, in)``).  Layer ``l`` conditions on the first half of the
coordinates when ``l`` is even and on the second half when ``l`` is odd.
"""

from __future__ import annotations

import dataclasses
import functools
import math
import struct
from pathlib import Path
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from qflow.exceptions import DomainError, InvalidConfigurationError

CHECKPOINT_MAGIC = "qflow-checkpoint"
CHECKPOINT_VERSION = 1
INIT_SCALE = 0.05


class FlowStructure(NamedTuple):
    """Static architecture; hashable so it can key jit caches."""

    d: int
    n_layers: int
    hidden: int = 5
    s_cap: float = 5.0

    @property
    def half(self) -> int:
        return self.d // 2


def _layer_shapes(st: FlowStructure) -> list[tuple[int, ...]]:
    a, h = st.half, st.hidden
    return [(h, a), (h,), (h, h), (h,), (2 * a, h), (2 * a,)]


def n_params(st: FlowStructure) -> int:
    per_layer = sum(math.prod(s) for s in _layer_shapes(st))
    return per_layer * st.n_layers


def final_layer_slices(st: FlowStructure) -> list[slice]:
    """Slices of theta holding each layer's last conditioner layer (W3, b3)."""
    shapes = _layer_shapes(st)
    sizes = [math.prod(s) for s in shapes]
    per_layer = sum(sizes)
    start = sum(sizes[:4])
    return [slice(l * per_layer + start, (l + 1) * per_layer) for l in range(st.n_layers)]


def _unpack(st: FlowStructure, theta):
    layers = []
    offset = 0
    for _ in range(st.n_layers):
        params = []
        for shape in _layer_shapes(st):
            size = math.prod(shape)
            params.append(theta[offset:offset + size].reshape(shape))
            offset += size
        layers.append(params)
    return layers


def _conditioner(st: FlowStructure, params, xa):
    w1, b1, w2, b2, w3, b3 = params
    h = jnp.tanh(w1 @ xa + b1)
    h = jnp.tanh(w2 @ h + b2)
    out = w3 @ h + b3
    a = st.half
    s = st.s_cap * jnp.tanh(out[:a] / st.s_cap)
    return s, out[a:]


def _split(st: FlowStructure, layer: int, x):
    a = st.half
    if layer % 2 == 0:
        return x[:a], x[a:]
    return x[a:], x[:a]


def _join(st: FlowStructure, layer: int, cond, moved):
    if layer % 2 == 0:
        return jnp.concatenate([cond, moved])
    return jnp.concatenate([moved, cond])


def forward_point(st: FlowStructure, theta, z):
    """Prior space to data space for one point; returns (x, log|det J|)."""
    logdet = 0.0
    x = z
    for l, params in enumerate(_unpack(st, theta)):
        cond, moved = _split(st, l, x)
        s, t = _conditioner(st, params, cond)
        x = _join(st, l, cond, moved * jnp.exp(s) + t)
        logdet = logdet + jnp.sum(s)
    return x, logdet


def inverse_point(st: FlowStructure, theta, x):
    """Data space to prior space for one point; returns (z, log|det J^{-1}|)."""
    logdet = 0.0
    z = x
    layers = _unpack(st, theta)
    for l in reversed(range(st.n_layers)):
        cond, moved = _split(st, l, z)
        s, t = _conditioner(st, layers[l], cond)
        z = _join(st, l, cond, (moved - t) * jnp.exp(-s))
        logdet = logdet - jnp.sum(s)
    return z, logdet


def prior_log_prob_point(mean, var, z):
    r = z - mean
    return -0.5 * jnp.sum(r * r / var + jnp.log(2.0 * jnp.pi * var))


def log_prob_point(st: FlowStructure, theta, mean, var, x):
    z, logdet = inverse_point(st, theta, x)
    return prior_log_prob_point(mean, var, z) + logdet


@functools.lru_cache(maxsize=None)
def _compiled(st: FlowStructure):
    """Batched, jitted evaluators for one architecture."""
    lp = functools.partial(log_prob_point, st)
    fwd = functools.partial(forward_point, st)
    inv = functools.partial(inverse_point, st)
    grad_x = jax.grad(lp, argnums=3)
    hess_x = jax.hessian(lp, argnums=3)
    grad_theta = jax.grad(lp, argnums=0)

    def sample_fn(theta, mean, var, z):
        x, logdet = jax.vmap(fwd, in_axes=(None, 0))(theta, z)
        logq = jax.vmap(prior_log_prob_point, in_axes=(None, None, 0))(mean, var, z) - logdet
        return x, logq

    return {
        "forward": jax.jit(jax.vmap(fwd, in_axes=(None, 0))),
        "inverse": jax.jit(jax.vmap(inv, in_axes=(None, 0))),
        "log_prob": jax.jit(jax.vmap(lp, in_axes=(None, None, None, 0))),
        "grad_x": jax.jit(jax.vmap(grad_x, in_axes=(None, None, None, 0))),
        "hess_x": jax.jit(jax.vmap(hess_x, in_axes=(None, None, None, 0))),
        "grad_theta": jax.jit(jax.vmap(grad_theta, in_axes=(None, None, None, 0))),
        "sample": jax.jit(sample_fn),
    }


@dataclasses.dataclass(frozen=True)
class Prior:
    kind: str
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        if self.kind not in ("standard-normal", "diagonal-gaussian"):
            raise InvalidConfigurationError(f"unknown prior kind {self.kind!r}")
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        var = np.asarray(self.var, dtype=np.float64).reshape(-1)
        if mean.shape != var.shape:
            raise InvalidConfigurationError("prior mean and variance differ in length")
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise InvalidConfigurationError("prior variances must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @classmethod
    def standard_normal(cls, d: int) -> Prior:
        return cls("standard-normal", np.zeros(d), np.ones(d))

    @classmethod
    def diagonal_gaussian(cls, mean, var) -> Prior:
        mean = np.asarray(mean, dtype=np.float64)
        var = np.broadcast_to(np.asarray(var, dtype=np.float64), mean.shape)
        return cls("diagonal-gaussian", mean, var)

    @property
    def d(self) -> int:
        return self.mean.size

    def log_prob(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        r = z - self.mean
        return -0.5 * np.sum(r * r / self.var + np.log(2.0 * np.pi * self.var), axis=-1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, self.d))


@dataclasses.dataclass(frozen=True, eq=False)
class FlowModel:
    """A flow is a value: updating parameters returns a new model."""

    structure: FlowStructure
    prior: Prior
    theta: np.ndarray
    seed: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size != n_params(self.structure):
            raise InvalidConfigurationError(
                f"theta has {theta.size} entries, architecture needs {n_params(self.structure)}"
            )
        if not np.all(np.isfinite(theta)):
            raise DomainError("flow parameters must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def d(self) -> int:
        return self.structure.d

    @property
    def n_layers(self) -> int:
        return self.structure.n_layers

    @property
    def n_params(self) -> int:
        return self.theta.size

    def with_theta(self, theta) -> FlowModel:
        return dataclasses.replace(self, theta=np.asarray(theta, dtype=np.float64))

    def fns(self):
        return _compiled(self.structure)


@dataclasses.dataclass
class SampleBatch:
    points: np.ndarray
    log_q: np.ndarray
    grad_logq: np.ndarray | None = None
    hess_logq: np.ndarray | None = None

    def __len__(self) -> int:
        return self.points.shape[0]


def init_identity(
    d: int,
    prior: Prior | None = None,
    n_layers: int = 3,
    rng_seed: int = 0,
    *,
    hidden: int = 5,
    s_cap: float = 5.0,
) -> FlowModel:
    """Flow whose map is exactly the identity, so its density equals the prior.

    Hidden conditioner weights are drawn uniformly from [-0.05, 0.05]; the
    output layer of every conditioner is zero, which makes s = t = 0.
    """
    if d < 2 or d % 2:
        raise InvalidConfigurationError(f"dimension must be even and >= 2, got {d}")
    if n_layers < 1:
        raise InvalidConfigurationError("need at least one coupling layer")
    if hidden < 1 or s_cap <= 0:
        raise InvalidConfigurationError("hidden width and s_cap must be positive")
    prior = Prior.standard_normal(d) if prior is None else prior
    if prior.d != d:
        raise InvalidConfigurationError(f"prior has dimension {prior.d}, flow has {d}")
    st = FlowStructure(d, n_layers, hidden, float(s_cap))
    rng = np.random.default_rng(rng_seed)
    chunks = []
    for _ in range(n_layers):
        for k, shape in enumerate(_layer_shapes(st)):
            size = math.prod(shape)
            if k in (0, 2):
                chunks.append(rng.uniform(-INIT_SCALE, INIT_SCALE, size))
            else:
                chunks.append(np.zeros(size))
    return FlowModel(st, prior, np.concatenate(chunks), seed=int(rng_seed))


def _as_batch(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != d:
        raise DomainError(f"expected points of dimension {d}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise DomainError("points must be finite")
    return x, single


def sample(model: FlowModel, n: int, rng: np.random.Generator) -> SampleBatch:
    """Draw n i.i.d. points; log_q comes from the forward change of variables."""
    if n < 1:
        raise InvalidConfigurationError("need n >= 1 samples")
    z = model.prior.sample(rng, n)
    x, logq = model.fns()["sample"](model.theta, model.prior.mean, model.prior.var, z)
    return SampleBatch(np.asarray(x), np.asarray(logq))


def log_density(model: FlowModel, x):
    xb, single = _as_batch(x, model.d)
    out = np.asarray(model.fns()["log_prob"](model.theta, model.prior.mean, model.prior.var, xb))
    return float(out[0]) if single else out


def input_derivatives(model: FlowModel, x):
    """Exact gradient and Hessian of log q with respect to the input point(s)."""
    xb, single = _as_batch(x, model.d)
    f = model.fns()
    args = (model.theta, model.prior.mean, model.prior.var, xb)
    g = np.asarray(f["grad_x"](*args))
    h = np.asarray(f["hess_x"](*args))
    return (g[0], h[0]) if single else (g, h)


def param_grad_log_density(model: FlowModel, x):
    xb, single = _as_batch(x, model.d)
    out = np.asarray(
        model.fns()["grad_theta"](model.theta, model.prior.mean, model.prior.var, xb)
    )
    return out[0] if single else out


def forward(model: FlowModel, z):
    zb, single = _as_batch(z, model.d)
    x, _ = model.fns()["forward"](model.theta, zb)
    x = np.asarray(x)
    return x[0] if single else x


def inverse(model: FlowModel, x):
    xb, single = _as_batch(x, model.d)
    z, _ = model.fns()["inverse"](model.theta, xb)
    z = np.asarray(z)
    return z[0] if single else z


def fill_batch_derivatives(model: FlowModel, batch: SampleBatch) -> SampleBatch:
    g, h = input_derivatives(model, batch.points)
    batch.grad_logq = g
    batch.hess_logq = h
    return batch


# -- checkpoints -----------------------------------------------------------

def _fmt_vec(v: np.ndarray) -> str:
    return ",".join(repr(float(a)) for a in v)


def save_checkpoint(model: FlowModel, path, *, time: float = 0.0) -> None:
    """Text header, blank line, then theta as little-endian float64."""
    st = model.structure
    header = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"d={st.d}",
        f"n_layers={st.n_layers}",
        f"hidden={st.hidden}",
        f"s_cap={float(st.s_cap)!r}",
        f"prior_kind={model.prior.kind}",
        f"prior_mean={_fmt_vec(model.prior.mean)}",
        f"prior_var={_fmt_vec(model.prior.var)}",
        f"seed={model.seed}",
        f"time={float(time)!r}",
        f"n_params={model.n_params}",
    ]
    payload = struct.pack(f"<{model.n_params}d", *model.theta.tolist())
    Path(path).write_bytes(("\n".join(header) + "\n\n").encode("ascii") + payload)


def load_checkpoint(path) -> tuple[FlowModel, float]:
    """Returns the model and the simulation time stored with it."""
    raw = Path(path).read_bytes()
    split = raw.find(b"\n\n")
    if split < 0:
        raise InvalidConfigurationError(f"{path}: missing checkpoint header terminator")
    lines = raw[:split].decode("ascii").split("\n")
    magic, version = lines[0].split()
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise InvalidConfigurationError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    fields = dict(line.split("=", 1) for line in lines[1:])
    n = int(fields["n_params"])
    payload = raw[split + 2:]
    if len(payload) != 8 * n:
        raise InvalidConfigurationError(f"{path}: expected {8 * n} payload bytes, got {len(payload)}")
    theta = np.array(struct.unpack(f"<{n}d", payload))
    st = FlowStructure(
        int(fields["d"]), int(fields["n_layers"]), int(fields["hidden"]), float(fields["s_cap"])
    )
    prior = Prior(
        fields["prior_kind"],
        np.array([float(v) for v in fields["prior_mean"].split(",")]),
        np.array([float(v) for v in fields["prior_var"].split(",")]),
    )
    return FlowModel(st, prior, theta, seed=int(fields["seed"])), float(fields["time"])
