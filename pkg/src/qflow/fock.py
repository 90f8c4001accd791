"""Truncated Fock-space oracle for one or two bosonic modes.

Conventions: Q(alpha) = <alpha|rho|alpha> / pi with alpha = q + i p, so Q is a
density in (q, p).  Two-mode matrices use the ``kron(mode1, mode2)`` basis
order, and multi-mode real points are laid out as (q1, q2, p1, p2).
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from qflow.exceptions import CutoffError, QFlowError
from qflow.liouvillian import LindbladTerm

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-10
EIG_TOL = 1e-10


class InconsistentTableError(QFlowError, ValueError):
    """A Taylor table does not reconstruct a valid density matrix."""


@dataclasses.dataclass
class FockDensityMatrix:
    n_modes: int
    cutoff: int
    matrix: np.ndarray

    def __post_init__(self):
        if self.n_modes not in (1, 2):
            raise ValueError("Fock oracle supports one or two modes")
        self.matrix = np.asarray(self.matrix, dtype=np.complex128)
        dim = self.cutoff ** self.n_modes
        if self.matrix.shape != (dim, dim):
            raise ValueError(f"matrix must be {dim}x{dim} for cutoff {self.cutoff}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def trace(self) -> float:
        return float(np.real(np.trace(self.matrix)))

    def violations(self) -> dict[str, float]:
        m = self.matrix
        herm = float(np.max(np.abs(m - m.conj().T))) if m.size else 0.0
        eig = np.linalg.eigvalsh(0.5 * (m + m.conj().T))
        return {
            "hermitian": herm,
            "trace": abs(self.trace() - 1.0),
            "min_eigenvalue": float(eig.min()),
        }

    def is_valid(self, herm_tol=HERMITIAN_TOL, trace_tol=TRACE_TOL, eig_tol=EIG_TOL) -> bool:
        v = self.violations()
        return v["hermitian"] <= herm_tol and v["trace"] <= trace_tol and v["min_eigenvalue"] >= -eig_tol

    def expect(self, op: np.ndarray) -> complex:
        return complex(np.trace(self.matrix @ op))

    def edge_population(self) -> float:
        """Largest population on a top Fock level of any mode."""
        K = self.cutoff
        diag = np.real(np.diag(self.matrix)).reshape((K,) * self.n_modes)
        if self.n_modes == 1:
            return float(abs(diag[-1]))
        return float(max(np.abs(diag[-1, :]).sum(), np.abs(diag[:, -1]).sum()))

    def save(self, path) -> None:
        """Text: header line 'modes K', then one row per line of 're,im' pairs."""
        lines = [f"{self.n_modes} {self.cutoff}"]
        for row in self.matrix:
            lines.append(" ".join(f"{float(z.real)!r},{float(z.imag)!r}" for z in row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> FockDensityMatrix:
        lines = Path(path).read_text().splitlines()
        modes, K = (int(v) for v in lines[0].split())
        rows = []
        for line in lines[1:]:
            if not line.strip():
                continue
            rows.append([complex(*map(float, pair.split(","))) for pair in line.split()])
        return cls(modes, K, np.array(rows))


# -- states and ladder operators -----------------------------------------------

def annihilation(K: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, K, dtype=np.float64)), 1).astype(np.complex128)


def mode_operators(n_modes: int, K: int) -> list[np.ndarray]:
    """Annihilation operator of each mode on the full (kron) space."""
    a = annihilation(K)
    if n_modes == 1:
        return [a]
    eye = np.eye(K)
    return [np.kron(a, eye), np.kron(eye, a)]


def coherent_amplitudes(alpha, K: int) -> np.ndarray:
    """<n|alpha> for n < K; shape alpha.shape + (K,)."""
    alpha = np.asarray(alpha, dtype=np.complex128)
    n = np.arange(K)
    log_norm = -0.5 * gammaln(n + 1)
    with np.errstate(divide="ignore"):
        powers = alpha[..., None] ** n
    return np.exp(-0.5 * np.abs(alpha[..., None]) ** 2 + log_norm) * powers


def pure_state(psi: np.ndarray, n_modes: int, K: int) -> FockDensityMatrix:
    psi = np.asarray(psi, dtype=np.complex128)
    psi = psi / np.linalg.norm(psi)
    return FockDensityMatrix(n_modes, K, np.outer(psi, psi.conj()))


def coherent_state(beta: complex, K: int) -> FockDensityMatrix:
    return pure_state(coherent_amplitudes(beta, K), 1, K)


def thermal_state(nbar: float, K: int) -> FockDensityMatrix:
    n = np.arange(K)
    p = nbar ** n / (nbar + 1.0) ** (n + 1)
    return FockDensityMatrix(1, K, np.diag(p / p.sum()))


def number_state(n: int, K: int) -> FockDensityMatrix:
    psi = np.zeros(K)
    psi[n] = 1.0
    return pure_state(psi, 1, K)


def antisymmetric_bec(n_total: int, K: int) -> FockDensityMatrix:
    """All n_total particles in the mode (a1 - a2)/sqrt(2) of two wells."""
    if K <= n_total:
        raise CutoffError(f"cutoff {K} cannot hold {n_total} particles in one well")
    a1, a2 = mode_operators(2, K)
    b_dag = (a1 - a2).conj().T / np.sqrt(2.0)
    psi = np.zeros(K * K, dtype=np.complex128)
    psi[0] = 1.0
    for _ in range(n_total):
        psi = b_dag @ psi
    return pure_state(psi, 2, K)


# -- rho -> Q ------------------------------------------------------------------

def q_from_rho(rho: FockDensityMatrix, alpha, *, edge_tol: float = 1e-10) -> np.ndarray:
    """Q = <alpha|rho|alpha> / pi at one or more phase-space points.

    ``alpha`` is complex with shape (...,) for one mode or (..., 2) for two.
    Raises CutoffError when rho has population on its top Fock level above
    ``edge_tol``, a sign that the state was truncated.
    """
    if rho.edge_population() > edge_tol:
        raise CutoffError(
            f"population {rho.edge_population():.2e} on the top Fock level; raise the cutoff"
        )
    alpha = np.asarray(alpha, dtype=np.complex128)
    K = rho.cutoff
    if rho.n_modes == 1:
        c = coherent_amplitudes(alpha, K)
        norm = 1.0 / np.pi
    else:
        if alpha.shape[-1] != 2:
            raise ValueError("two-mode Q needs alpha of shape (..., 2)")
        c1 = coherent_amplitudes(alpha[..., 0], K)
        c2 = coherent_amplitudes(alpha[..., 1], K)
        c = (c1[..., :, None] * c2[..., None, :]).reshape(alpha.shape[:-1] + (K * K,))
        norm = 1.0 / np.pi ** 2
    val = np.einsum("...m,mn,...n->...", c.conj(), rho.matrix, c)
    return norm * np.real(val)


def q_from_rho_real(rho: FockDensityMatrix, x, **kw) -> np.ndarray:
    """Q at real points x = (q_1..q_M, p_1..p_M)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    M = rho.n_modes
    alpha = x[:, :M] + 1j * x[:, M:]
    if M == 1:
        alpha = alpha[:, 0]
    return q_from_rho(rho, alpha, **kw)


# -- Q -> rho via Taylor coefficients -------------------------------------------

@dataclasses.dataclass
class QTaylorTable:
    """coeffs[a, b] multiplies (alpha*)^a alpha^b in the Taylor series of Q."""

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != self.coeffs.shape[1]:
            raise ValueError("Taylor table must be square")

    @property
    def a_max(self) -> int:
        return self.coeffs.shape[0] - 1

    @classmethod
    def gaussian(cls, a_max: int, kappa=-1.0, u=0.0, v=0.0, w=0.0, prefactor=1.0 / np.pi) -> QTaylorTable:
        """Table of prefactor * exp(kappa alpha alpha* + u alpha + v alpha* + w).

        Coefficients follow in closed form from multiplying the three
        exponential series.
        """
        n = np.arange(a_max + 1)
        inv_fact = np.exp(-gammaln(n + 1))
        coeffs = np.zeros((a_max + 1, a_max + 1), dtype=np.complex128)
        for a in range(a_max + 1):
            for b in range(a_max + 1):
                s = np.arange(min(a, b) + 1)
                coeffs[a, b] = np.sum(
                    complex(kappa) ** s * inv_fact[s]
                    * complex(u) ** (b - s) * inv_fact[b - s]
                    * complex(v) ** (a - s) * inv_fact[a - s]
                )
        return cls(prefactor * np.exp(complex(w)) * coeffs)

    @classmethod
    def coherent(cls, beta: complex, a_max: int) -> QTaylorTable:
        beta = complex(beta)
        return cls.gaussian(a_max, -1.0, beta.conjugate(), beta, -abs(beta) ** 2)

    @classmethod
    def thermal(cls, nbar: float, a_max: int) -> QTaylorTable:
        return cls.gaussian(a_max, -1.0 / (nbar + 1.0), prefactor=1.0 / (np.pi * (nbar + 1.0)))

    @classmethod
    def vacuum(cls, a_max: int) -> QTaylorTable:
        return cls.gaussian(a_max)

    def evaluate(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=np.complex128)
        n = np.arange(self.a_max + 1)
        ac = np.conj(alpha)[..., None] ** n
        a = alpha[..., None] ** n
        return np.einsum("...i,ij,...j->...", ac, self.coeffs, a)


def rho_from_q_taylor(table: QTaylorTable, K: int, *, tol: float = 1e-6) -> FockDensityMatrix:
    """<m|rho|n> = pi sqrt(m! n!) sum_k coeffs[m-k, n-k] / k!."""
    if table.a_max < K - 1:
        raise ValueError(f"table order {table.a_max} too small for cutoff {K}")
    logfact = gammaln(np.arange(K) + 1)
    rho = np.zeros((K, K), dtype=np.complex128)
    for m in range(K):
        for n in range(K):
            k = np.arange(min(m, n) + 1)
            rho[m, n] = np.pi * np.exp(0.5 * (logfact[m] + logfact[n])) * np.sum(
                table.coeffs[m - k, n - k] * np.exp(-logfact[k])
            )
    out = FockDensityMatrix(1, K, rho)
    v = out.violations()
    if v["hermitian"] > tol or v["trace"] > tol or v["min_eigenvalue"] < -tol:
        raise InconsistentTableError(f"reconstructed matrix is not a density matrix: {v}")
    return out


# -- observables -------------------------------------------------------------------

def observable_moment(source, m: int, n: int, mode: int = 0):
    """<a^m (a^dag)^n> for one mode as a Q-moment of (q+ip)^m (q-ip)^n.

    ``source`` is either an (N, 2M) array of samples from Q, returning
    (mean, stderr), or a GridState, returning (quadrature, 0.0).
    """
    from qflow.reference import GridState

    if isinstance(source, GridState):
        M = source.ndim // 2
        pts = source.points()
        alpha = pts[:, mode] + 1j * pts[:, M + mode]
        f = alpha ** m * np.conj(alpha) ** n
        w = source.values.reshape(-1) * source.cell_volume
        return complex(np.sum(f * w)), 0.0
    x = np.atleast_2d(np.asarray(source, dtype=np.float64))
    M = x.shape[1] // 2
    alpha = x[:, mode] + 1j * x[:, M + mode]
    f = alpha ** m * np.conj(alpha) ** n
    N = f.size
    stderr = float(np.sqrt(np.var(f.real) + np.var(f.imag)) / np.sqrt(N)) if N > 1 else float("inf")
    return complex(np.mean(f)), stderr


def hermitian_moment(source, m: int, n: int, mode: int = 0):
    """Expectation of a^m (a^dag)^n plus its Hermitian conjugate (real)."""
    val, err = observable_moment(source, m, n, mode)
    if m == n:
        return val.real, err
    return 2.0 * val.real, 2.0 * err


# -- master equation -------------------------------------------------------------

def _term_matrices(term: LindbladTerm, ops: Sequence[np.ndarray]):
    dim = ops[0].shape[0]
    left = np.eye(dim, dtype=np.complex128)
    right = np.eye(dim, dtype=np.complex128)
    for a, (j, k, l, s) in zip(ops, term.powers):
        ad = a.conj().T
        left = left @ np.linalg.matrix_power(ad, j) @ np.linalg.matrix_power(a, k)
        right = right @ np.linalg.matrix_power(ad, l) @ np.linalg.matrix_power(a, s)
    return left, right


def lindblad_generator(terms: Sequence[LindbladTerm], n_modes: int, K: int):
    """rho -> sum_c c * L rho R as a closure over precomputed matrices."""
    ops = mode_operators(n_modes, K)
    parts = [(t.coefficient, *_term_matrices(t, ops)) for t in terms]

    def apply(rho: np.ndarray) -> np.ndarray:
        out = np.zeros_like(rho)
        for c, left, right in parts:
            out += c * (left @ rho @ right)
        return out

    return apply


def lindblad_fock_evolve(
    rho0: FockDensityMatrix,
    terms: Sequence[LindbladTerm],
    dt: float,
    steps: int,
    *,
    leak_tol: float = 1e-6,
    record_every: int = 0,
):
    """Classical RK4 on the truncated master equation.

    With ``record_every > 0`` also returns the list of (time, rho) snapshots.
    """
    if any(t.n_modes != rho0.n_modes for t in terms):
        raise ValueError("term mode count does not match the density matrix")
    if not terms:
        out = FockDensityMatrix(rho0.n_modes, rho0.cutoff, rho0.matrix.copy())
        return (out, [(0.0, out)]) if record_every else out
    f = lindblad_generator(terms, rho0.n_modes, rho0.cutoff)
    rho = rho0.matrix.copy()
    snapshots = [(0.0, FockDensityMatrix(rho0.n_modes, rho0.cutoff, rho.copy()))]
    for step in range(1, steps + 1):
        k1 = f(rho)
        k2 = f(rho + 0.5 * dt * k1)
        k3 = f(rho + 0.5 * dt * k2)
        k4 = f(rho + dt * k3)
        rho = rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if record_every and step % record_every == 0:
            snapshots.append((step * dt, FockDensityMatrix(rho0.n_modes, rho0.cutoff, rho.copy())))
    out = FockDensityMatrix(rho0.n_modes, rho0.cutoff, rho)
    leak = abs(out.trace() - rho0.trace())
    if leak >= leak_tol:
        raise CutoffError(f"trace leaked by {leak:.2e}; raise the cutoff")
    v = out.violations()
    if v["hermitian"] > 1e-8 or v["min_eigenvalue"] < -1e-8:
        raise CutoffError(f"evolved matrix lost density-matrix structure: {v}")
    return (out, snapshots) if record_every else out


def q_dynamics_crosscheck(
    terms: Sequence[LindbladTerm],
    rho0: FockDensityMatrix,
    t: float,
    *,
    shape: tuple[int, int] = (256, 256),
    extent: float = 10.0,
    fock_dt: float = 1e-3,
    rtol: float = 1e-8,
) -> float:
    """Max grid discrepancy between the Fock route and the pseudo-spectral Q route."""
    from qflow.liouvillian import compile_terms
    from qflow.reference import GridState, pseudospectral_solve

    if rho0.n_modes != 1:
        raise ValueError("crosscheck is implemented for one mode")
    q0 = GridState.from_function(lambda x: q_from_rho_real(rho0, x), shape, extent)
    op = compile_terms(terms, 1)
    steps = int(round(t / fock_dt))
    rho_t = lindblad_fock_evolve(rho0, terms, t / steps if steps else 0.0, steps)
    q_grid = pseudospectral_solve(op, q0, t, rtol=rtol) if t > 0 else q0
    exact = q_from_rho_real(rho_t, q_grid.points()).reshape(q_grid.shape)
    return float(np.max(np.abs(exact - q_grid.values)))
