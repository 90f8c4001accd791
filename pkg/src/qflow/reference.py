"""Grid and moment-equation solvers used as oracles for the flow simulations."""

from __future__ import annotations

import dataclasses
import math
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft
import scipy.linalg
from scipy.interpolate import RegularGridInterpolator

from qflow.exceptions import UnsupportedError
from qflow.liouvillian import ModelSpec, QOperator, compile_model

MAX_GRID_DIM = 4
GRID_MAGIC = b"QFGRID01"
LOG_FLOOR = 1e-300


# -- grids -------------------------------------------------------------------

@dataclasses.dataclass
class GridState:
    """Density sampled on a periodic tensor grid over [-L, L)^d.

    Point k of every axis sits at -L + k * (2L / n); index 0 is the boundary.
    """

    shape: tuple[int, ...]
    extent: tuple[float, ...]
    values: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.extent = tuple(float(e) for e in self.extent)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.shape)
        if len(self.shape) > MAX_GRID_DIM:
            raise UnsupportedError(
                f"{len(self.shape)}-dimensional grids exceed the {MAX_GRID_DIM}-dimensional limit"
            )

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def spacings(self) -> list[float]:
        return [2 * e / n for n, e in zip(self.shape, self.extent)]

    @property
    def axes(self) -> list[np.ndarray]:
        return grid_axes(self.shape, self.extent)

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacings)

    def total(self) -> float:
        # trapezoid rule on a periodic grid is the plain sum
        return float(self.values.sum() * self.cell_volume)

    @classmethod
    def from_function(cls, f: Callable, shape: Sequence[int], extent: Sequence[float] | float = 10.0):
        shape = tuple(shape)
        extent = tuple(np.broadcast_to(extent, (len(shape),)).tolist())
        mesh = np.meshgrid(*grid_axes(shape, extent), indexing="ij")
        pts = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        return cls(shape, extent, np.asarray(f(pts)).reshape(shape))

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def project(self) -> GridState:
        """Clip negatives, zero the boundary planes, renormalize to 1."""
        v = np.clip(self.values, 0.0, None)
        for axis in range(self.ndim):
            idx = [slice(None)] * self.ndim
            idx[axis] = 0
            v[tuple(idx)] = 0.0
        v /= v.sum() * self.cell_volume
        return GridState(self.shape, self.extent, v)

    def log_density(self, x) -> np.ndarray:
        """Cubic-spline interpolation of log Q (floored at 1e-300).

        Multilinear interpolation of log Q errs by about h^2/4 per axis, which on
        a 256-point grid already exceeds 1e-3 in L1; the cubic spline is ~h^4.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        axes = self.axes
        # close the periodic grid so points in the last cell interpolate too
        ext_axes = [np.append(a, a[-1] + (a[1] - a[0])) for a in axes]
        logv = np.log(np.maximum(self.values, LOG_FLOOR))
        logv = np.pad(logv, [(0, 1)] * self.ndim, mode="wrap")
        method = "cubic" if min(self.shape) >= 4 else "linear"
        interp = RegularGridInterpolator(
            ext_axes, logv, method=method, bounds_error=False, fill_value=np.log(LOG_FLOOR)
        )
        return interp(x)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Inverse-CDF draw of cells, uniform jitter inside the cell."""
        p = np.clip(self.values.reshape(-1), 0.0, None)
        cdf = np.cumsum(p)
        cdf /= cdf[-1]
        flat = np.searchsorted(cdf, rng.random(n), side="right")
        idx = np.stack(np.unravel_index(flat, self.shape), axis=-1)
        h = np.array(self.spacings)
        lo = -np.array(self.extent)
        return lo + (idx + rng.random((n, self.ndim)) - 0.5) * h

    def save(self, path) -> None:
        header = GRID_MAGIC + struct.pack("<I", self.ndim)
        header += struct.pack(f"<{self.ndim}Q", *self.shape)
        header += struct.pack(f"<{self.ndim}d", *self.extent)
        Path(path).write_bytes(header + self.values.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> GridState:
        raw = Path(path).read_bytes()
        if raw[:8] != GRID_MAGIC:
            raise ValueError(f"{path}: not a grid state file")
        (ndim,) = struct.unpack_from("<I", raw, 8)
        off = 12
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        extent = struct.unpack_from(f"<{ndim}d", raw, off)
        off += 8 * ndim
        values = np.frombuffer(raw[off:], dtype="<f8").reshape(shape).copy()
        return cls(shape, extent, values)


def grid_axes(shape: Sequence[int], extent: Sequence[float]) -> list[np.ndarray]:
    return [-e + np.arange(n) * (2 * e / n) for n, e in zip(shape, extent)]


def _wavenumbers(n: int, h: float) -> np.ndarray:
    return 2 * np.pi * np.fft.fftfreq(n, d=h)


def spectral_derivative(values: np.ndarray, spacings: Sequence[float]):
    """Fourier differentiation on a periodic grid; returns a ``derivative`` callable."""
    values = np.asarray(values)
    vhat = np.fft.fftn(values)
    ks = [_wavenumbers(n, h) for n, h in zip(values.shape, spacings)]

    def derivative(multi_index) -> np.ndarray:
        if not any(multi_index):
            return values
        factor = 1.0
        for axis, (k, e) in enumerate(zip(ks, multi_index)):
            if not e:
                continue
            ke = (1j * k) ** e
            if e % 2 and len(k) % 2 == 0:
                ke[len(k) // 2] = 0.0
            shape = [1] * values.ndim
            shape[axis] = -1
            factor = factor * ke.reshape(shape)
        return np.real(np.fft.ifftn(vhat * factor))

    return derivative


class SpectralOperator:
    """Precomputed grid form of a QOperator.

    Terms with a constant coefficient field are merged into one Fourier
    multiplier; the rest keep one inverse transform per derivative.  With
    ``dealias`` the derivative multipliers vanish above 2/3 of the Nyquist
    wavenumber, which removes the stiffest (unresolved) modes.
    """

    def __init__(self, op: QOperator, shape: Sequence[int], extent: Sequence[float], dealias: bool = True):
        if op.dim > MAX_GRID_DIM:
            raise UnsupportedError(
                f"pseudo-spectral grids are limited to {MAX_GRID_DIM} dimensions; "
                f"this system has {op.dim} (grid size grows exponentially with wells)"
            )
        self.shape = tuple(shape)
        axes = grid_axes(shape, extent)
        spacings = [2 * e / n for n, e in zip(shape, extent)]
        mesh = np.meshgrid(*axes, indexing="ij")
        self.const = 0.0
        merged = None
        fields: dict[tuple[int, ...], np.ndarray] = {}
        for m in op.monomials:
            if not any(m.deriv):
                if any(m.poly):
                    fields[m.deriv] = fields.get(m.deriv, 0.0) + m.coeff * _monomial(mesh, m.poly)
                else:
                    self.const += m.coeff
            elif not any(m.poly):
                f = m.coeff * _multiplier(shape, spacings, m.deriv, dealias)
                merged = f if merged is None else merged + f
            else:
                fields[m.deriv] = fields.get(m.deriv, 0.0) + m.coeff * _monomial(mesh, m.poly)
        self.merged = merged
        # Modes that the derivative multipliers drop would otherwise feel only the
        # constant term and grow like exp(const t); filtering the whole right-hand
        # side freezes them instead.
        self.keep = _low_pass(shape, spacings, dealias)
        self.terms = [
            (field, None if not any(deriv) else _multiplier(shape, spacings, deriv, dealias))
            for deriv, field in fields.items()
        ]

    def __call__(self, q: np.ndarray) -> np.ndarray:
        if self.merged is None and not self.terms:
            return self.const * q
        qhat = sfft.rfftn(q)
        out_hat = self.keep * sfft.rfftn(self.variable_part(q, qhat))
        if self.merged is not None:
            out_hat += qhat * self.merged
        return sfft.irfftn(out_hat, s=self.shape)

    def variable_part(self, q: np.ndarray, qhat: np.ndarray) -> np.ndarray:
        """Everything except the constant-coefficient derivative multiplier."""
        out = self.const * q
        for field, factor in self.terms:
            if factor is None:
                out += field * q
            else:
                out += field * sfft.irfftn(qhat * factor, s=self.shape)
        return out


def _low_pass(shape, spacings, dealias: bool) -> np.ndarray:
    """0/1 mask on the rfftn layout: the 2/3 rule, or just the Nyquist planes."""
    keep = np.ones([1] * len(shape))
    for axis, (n, h) in enumerate(zip(shape, spacings)):
        k = np.abs(_wavenumbers(n, h))
        if axis == len(shape) - 1:
            k = k[: n // 2 + 1]
        if dealias:
            m = (k <= (2.0 / 3.0) * np.pi / h).astype(np.float64)
        else:
            m = np.ones(k.size)
            if n % 2 == 0:
                m[n // 2] = 0.0
        bshape = [1] * len(shape)
        bshape[axis] = -1
        keep = keep * m.reshape(bshape)
    return keep


def _monomial(mesh, poly) -> np.ndarray:
    out = np.ones(mesh[0].shape)
    for xk, e in zip(mesh, poly):
        if e:
            out = out * xk ** e
    return out


def _multiplier(shape, spacings, deriv, dealias: bool) -> np.ndarray:
    """Fourier multiplier of d^deriv on the rfftn layout (last axis halved)."""
    factor = np.ones([1] * len(shape), dtype=np.complex128)
    for axis, (n, h) in enumerate(zip(shape, spacings)):
        k = _wavenumbers(n, h)
        if axis == len(shape) - 1:
            k = k[: n // 2 + 1].copy()
            k[-1] = abs(k[-1])
        e = deriv[axis]
        ke = (1j * k) ** e
        if e % 2 and n % 2 == 0:
            ke[n // 2] = 0.0
        if dealias:
            ke = np.where(np.abs(k) > (2.0 / 3.0) * np.pi / h, 0.0, ke)
        bshape = [1] * len(shape)
        bshape[axis] = -1
        factor = factor * ke.reshape(bshape)
    return factor


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_DP_E = _DP_B - np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


@dataclasses.dataclass
class SolveStats:
    accepted: int = 0
    rejected: int = 0
    evaluations: int = 0
    norms: list[tuple[float, float]] = dataclasses.field(default_factory=list)


def pseudospectral_solve(
    op: QOperator,
    q0: GridState,
    t_end: float | Sequence[float],
    rtol: float = 1e-8,
    atol: float = 1e-12,
    *,
    h0: float = 1e-3,
    dealias: bool = True,
    integrating_factor: bool = True,
    stats: SolveStats | None = None,
):
    """Integrate dQ/dt = L Q on the grid with adaptive Dormand-Prince 5(4).

    After every accepted step the state is projected (negatives clipped, boundary
    zeroed, renormalized).  With a scalar ``t_end`` returns the final GridState;
    with a sequence returns one GridState per requested time.

    With ``integrating_factor`` the constant-coefficient (diffusion) part is
    propagated exactly in Fourier space and the same 5(4) pair steps the rest
    (Lawson form).  That lifts the explicit diffusion limit dt ~ 1/(D k_max^2),
    which otherwise dominates the step count on fine grids.
    """
    if op.dim > MAX_GRID_DIM:
        raise UnsupportedError(
            f"pseudo-spectral grids are limited to {MAX_GRID_DIM} dimensions; "
            f"this system has {op.dim} (grid size grows exponentially with wells)"
        )
    if op.dim != q0.ndim:
        raise ValueError(f"operator acts on {op.dim} dimensions, grid has {q0.ndim}")
    scalar = np.isscalar(t_end)
    targets = [float(t_end)] if scalar else [float(t) for t in t_end]
    if any(b < a for a, b in zip(targets, targets[1:])) or targets[0] < 0:
        raise ValueError("output times must be nonnegative and sorted")
    stats = stats if stats is not None else SolveStats()
    rhs = SpectralOperator(op, q0.shape, q0.extent, dealias=dealias)

    def f(y):
        stats.evaluations += 1
        return rhs(y)

    outputs = []
    t = 0.0
    y = q0.values.copy()
    if op.is_zero():
        return q0 if scalar else [GridState(q0.shape, q0.extent, y.copy()) for _ in targets]
    if integrating_factor and rhs.merged is not None and np.all(rhs.merged.real <= 0):
        return _solve_integrating_factor(rhs, q0, targets, scalar, rtol, atol, h0, stats)
    k1 = f(y)
    acc = np.empty_like(y)
    h = h0
    for target in targets:
        while t < target - 1e-14 * max(1.0, target):
            h = min(h, target - t)
            ks = [k1]
            for s in range(1, 7):
                np.copyto(acc, y)
                for a, k in zip(_DP_A[s], ks):
                    if a:
                        acc += (h * a) * k
                ks.append(f(acc))
            y_new = y.copy()
            err = np.zeros_like(y)
            for b, e, k in zip(_DP_B, _DP_E, ks):
                if b:
                    y_new += (h * b) * k
                if e:
                    err += (h * e) * k
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            norm = float(np.sqrt(np.mean((err / scale) ** 2)))
            if norm <= 1.0:
                t += h
                state = GridState(q0.shape, q0.extent, y_new).project()
                y = state.values
                k1 = f(y)
                stats.accepted += 1
                stats.norms.append((t, state.total()))
                factor = 5.0 if norm == 0 else min(5.0, 0.9 * norm ** -0.2)
            else:
                stats.rejected += 1
                factor = max(0.2, 0.9 * norm ** -0.2)
            h *= factor
        outputs.append(GridState(q0.shape, q0.extent, y.copy()))
    return outputs[0] if scalar else outputs


def _step_control(norm: float) -> float:
    if norm <= 1.0:
        return 5.0 if norm == 0 else min(5.0, 0.9 * norm ** -0.2)
    return max(0.2, 0.9 * norm ** -0.2)


def _solve_integrating_factor(rhs, q0, targets, scalar, rtol, atol, h0, stats):
    # Stage i in Q space: Q_i = E(c_i) q_n + h sum_j a_ij E(c_i - c_j) N(Q_j), with E(s) = exp(L s h)
    shape = q0.shape
    lin = rhs.merged.real
    outputs = []
    t, h = 0.0, h0
    y = q0.values.copy()
    for target in targets:
        while t < target - 1e-14 * max(1.0, target):
            h = min(h, target - t)
            expo = {}

            def E(c):
                key = round(c, 12)
                if key not in expo:
                    expo[key] = np.exp(lin * (c * h))
                return expo[key]

            yhat = sfft.rfftn(y)
            stage_hat = yhat
            stage = y
            nhats = []
            for i in range(7):
                if i:
                    acc = E(_DP_C[i]) * yhat
                    for a, cj, nh in zip(_DP_A[i], _DP_C, nhats):
                        if a:
                            acc = acc + (h * a) * E(_DP_C[i] - cj) * nh
                    stage_hat = acc
                    stage = sfft.irfftn(stage_hat, s=shape)
                stats.evaluations += 1
                nhats.append(rhs.keep * sfft.rfftn(rhs.variable_part(stage, stage_hat)))
            new_hat = E(1.0) * yhat
            err_hat = 0.0
            for b, e, cj, nh in zip(_DP_B, _DP_E, _DP_C, nhats):
                if b:
                    new_hat = new_hat + (h * b) * E(1.0 - cj) * nh
                if e:
                    err_hat = err_hat + (h * e) * E(1.0 - cj) * nh
            y_new = sfft.irfftn(new_hat, s=shape)
            err = sfft.irfftn(err_hat, s=shape)
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            norm = float(np.sqrt(np.mean((err / scale) ** 2)))
            if norm <= 1.0:
                t += h
                state = GridState(shape, q0.extent, y_new).project()
                y = state.values
                stats.accepted += 1
                stats.norms.append((t, state.total()))
            else:
                stats.rejected += 1
            h *= _step_control(norm)
        outputs.append(GridState(shape, q0.extent, y.copy()))
    return outputs[0] if scalar else outputs


# -- Gaussian moment oracle --------------------------------------------------

@dataclasses.dataclass
class GaussianMomentState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match mean")

    @classmethod
    def coherent(cls, n_modes: int, center: float = -1.0) -> GaussianMomentState:
        """Coherent state: variance 1/2 per real axis."""
        d = 2 * n_modes
        return cls(np.full(d, center), 0.5 * np.eye(d))

    @property
    def d(self) -> int:
        return self.mean.size

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        chol = np.linalg.cholesky(self.cov)
        r = scipy.linalg.solve_triangular(chol, (x - self.mean).T, lower=True)
        logdet = 2 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (np.sum(r * r, axis=0) + logdet + self.d * np.log(2 * np.pi))

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        chol = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((n, self.d)) @ chol.T


def linear_drift_diffusion(op: QOperator) -> tuple[np.ndarray, np.ndarray]:
    """Read A and D off an operator of the form c0 + (B x).grad + sum D_ij d_i d_j.

    Returns the Fokker-Planck drift matrix A = -B and symmetric diffusion D.
    """
    d = op.dim
    B = np.zeros((d, d))
    D = np.zeros((d, d))
    c0 = 0.0
    for m in op.monomials:
        deg = sum(m.poly)
        if m.order == 0 and deg == 0:
            c0 += m.coeff
        elif m.order == 1 and deg == 1:
            B[m.deriv.index(1), m.poly.index(1)] += m.coeff
        elif m.order == 2 and deg == 0:
            idx = [k for k, e in enumerate(m.deriv) for _ in range(e)]
            i, j = idx
            if i == j:
                D[i, i] += m.coeff
            else:
                D[i, j] += 0.5 * m.coeff
                D[j, i] += 0.5 * m.coeff
        else:
            raise UnsupportedError(f"monomial {m} is not linear-drift/constant-diffusion")
    if abs(c0 - np.trace(B)) > 1e-10 * max(1.0, abs(c0)):
        raise UnsupportedError("operator is not of divergence form")
    return -B, D


def gaussian_moment_solution(spec: ModelSpec, init: GaussianMomentState, t: float) -> GaussianMomentState:
    """Exact Gaussian solution of the harmonic model at time t."""
    if spec.kind != "harmonic":
        raise UnsupportedError(f"Gaussian moment solution needs a harmonic model, got {spec.kind!r}")
    A, D = linear_drift_diffusion(compile_model(spec))
    return propagate_gaussian(A, D, init, t)


def propagate_gaussian(A: np.ndarray, D: np.ndarray, init: GaussianMomentState, t: float):
    """Solve dmu/dt = A mu, dSigma/dt = A Sigma + Sigma A^T + 2 D exactly.

    The Van Loan block exponential contains exp(-A t), which overflows for long
    times, so it is taken over short intervals tau and composed with
    I(s + tau) = I(tau) + phi(tau) I(s) phi(tau)^T.
    """
    if t == 0:
        return GaussianMomentState(init.mean.copy(), init.cov.copy())
    d = A.shape[0]
    n_sub = max(1, math.ceil(t * np.linalg.norm(A, 2)))
    tau = t / n_sub
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = -A
    block[:d, d:] = 2 * D
    block[d:, d:] = A.T
    F = scipy.linalg.expm(block * tau)
    phi_tau = F[d:, d:].T
    i_tau = phi_tau @ F[:d, d:]
    phi = np.eye(d)
    integral = np.zeros((d, d))
    for _ in range(n_sub):
        integral = i_tau + phi_tau @ integral @ phi_tau.T
        phi = phi_tau @ phi
    cov = phi @ init.cov @ phi.T + integral
    return GaussianMomentState(phi @ init.mean, 0.5 * (cov + cov.T))


# -- bosonic second moments ----------------------------------------------------

def hopping_matrix(n_modes: int, J: float) -> np.ndarray:
    h = np.zeros((n_modes, n_modes))
    for j in range(n_modes - 1):
        h[j, j + 1] = h[j + 1, j] = -J
    return h


def bosonic_moment_solution(J: float, gamma: Sequence[float], C0: np.ndarray, t: float) -> np.ndarray:
    """C_ij = <a_i^dag a_j> for the lossy hopping chain.

    dC/dt = i[h, C] - (Gamma C + C Gamma)/2, solved as C(t) = E C0 E^dag with
    E = exp((i h - Gamma/2) t).
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    C0 = np.asarray(C0, dtype=np.complex128)
    K = 1j * hopping_matrix(gamma.size, J) - 0.5 * np.diag(gamma)
    E = scipy.linalg.expm(K * t)
    C = E @ C0 @ E.conj().T
    return 0.5 * (C + C.conj().T)


def antisymmetric_bec_moments(n_per_well: float) -> np.ndarray:
    """Second moments of all particles in (a_1 - a_2)/sqrt(2)."""
    n = float(n_per_well)
    return np.array([[n, -n], [-n, n]], dtype=np.complex128)
