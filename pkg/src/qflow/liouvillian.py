"""Compile Lindblad right-hand sides into real phase-space differential operators.

A term ``c * (a^dag)^j a^k rho (a^dag)^l a^s`` becomes, per mode,

    (alpha*)^j (alpha + d/dalpha*)^k alpha^s (alpha* + d/dalpha)^l

acting on Q.  With alpha = q + i p the Wirtinger derivatives are
d/dalpha = (d_q - i d_p)/2 and d/dalpha* = (d_q + i d_p)/2.  Expansion is
done with exact Gaussian-rational arithmetic; the complex term coefficient is
applied in floating point only at the very end.

Real coordinates are ordered ``x = (q_1, ..., q_M, p_1, ..., p_M)``.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from collections import defaultdict
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from qflow.exceptions import NonHermitianGeneratorError, UnsupportedError

MAX_POWER = 4
IMAG_TOL = 1e-12


@dataclasses.dataclass(frozen=True)
class _GQ:
    """Gaussian rational re + i*im with exact Fraction parts."""

    re: Fraction = Fraction(0)
    im: Fraction = Fraction(0)

    def __add__(self, other: _GQ) -> _GQ:
        return _GQ(self.re + other.re, self.im + other.im)

    def __mul__(self, other: _GQ) -> _GQ:
        return _GQ(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )

    def scale(self, k) -> _GQ:
        return _GQ(self.re * k, self.im * k)

    def __bool__(self) -> bool:
        return bool(self.re) or bool(self.im)

    def __complex__(self) -> complex:
        return complex(float(self.re), float(self.im))


_ONE = _GQ(Fraction(1))
_I = _GQ(Fraction(0), Fraction(1))
_HALF = _GQ(Fraction(1, 2))
_HALF_I = _GQ(Fraction(0), Fraction(1, 2))
_MINUS_HALF_I = _GQ(Fraction(0), Fraction(-1, 2))

# single-mode complex operator: {(pow_alpha, pow_alpha*, ord_d_alpha, ord_d_alpha*): _GQ}
_ComplexOp = dict


def _falling(n: int, k: int) -> int:
    return math.perm(n, k) if k <= n else 0


def _compose(left: _ComplexOp, right: _ComplexOp) -> _ComplexOp:
    """Operator product left∘right with all derivatives moved to the right."""
    out: dict = defaultdict(_GQ)
    for (a, b, da, db), cl in left.items():
        for (c, e, dc, de), cr in right.items():
            base = cl * cr
            for i in range(min(da, c) + 1):
                for j in range(min(db, e) + 1):
                    k = math.comb(da, i) * math.comb(db, j) * _falling(c, i) * _falling(e, j)
                    key = (a + c - i, b + e - j, da - i + dc, db - j + de)
                    out[key] = out[key] + base.scale(k)
    return {k: v for k, v in out.items() if v}


def _power(op: _ComplexOp, n: int) -> _ComplexOp:
    result = {(0, 0, 0, 0): _ONE}
    for _ in range(n):
        result = _compose(result, op)
    return result


def single_mode_complex_operator(j: int, k: int, l: int, s: int) -> _ComplexOp:
    """Q-space image of (a^dag)^j a^k rho (a^dag)^l a^s on one mode, in alpha, alpha*."""
    alpha_star_j = {(0, j, 0, 0): _ONE}
    left = {(1, 0, 0, 0): _ONE, (0, 0, 0, 1): _ONE}   # alpha + d/dalpha*
    alpha_s = {(s, 0, 0, 0): _ONE}
    right = {(0, 1, 0, 0): _ONE, (0, 0, 1, 0): _ONE}  # alpha* + d/dalpha
    op = _compose(alpha_star_j, _power(left, k))
    op = _compose(op, alpha_s)
    return _compose(op, _power(right, l))


def _binomial_expand(u: _GQ, v: _GQ, n: int) -> dict[tuple[int, int], _GQ]:
    """(u*X + v*Y)^n as {(power_X, power_Y): coeff} for commuting X, Y."""
    out = {}
    for r in range(n + 1):
        c = _ONE.scale(math.comb(n, r))
        for _ in range(r):
            c = c * u
        for _ in range(n - r):
            c = c * v
        out[(r, n - r)] = c
    return out


def to_real(op: _ComplexOp) -> dict[tuple[int, int, int, int], _GQ]:
    """Rewrite a single-mode alpha-space operator in (q, p).

    Keys of the result are (pow_q, pow_p, ord_d_q, ord_d_p).
    """
    out: dict = defaultdict(_GQ)
    for (a, b, da, db), coeff in op.items():
        poly_a = _binomial_expand(_ONE, _I, a)                        # (q + i p)^a
        poly_b = _binomial_expand(_ONE, _GQ(Fraction(0), Fraction(-1)), b)  # (q - i p)^b
        der_a = _binomial_expand(_HALF, _MINUS_HALF_I, da)            # ((d_q - i d_p)/2)^da
        der_b = _binomial_expand(_HALF, _HALF_I, db)                  # ((d_q + i d_p)/2)^db
        for (qa, pa), ca in poly_a.items():
            for (qb, pb), cb in poly_b.items():
                for (xa, ya), cda in der_a.items():
                    for (xb, yb), cdb in der_b.items():
                        key = (qa + qb, pa + pb, xa + xb, ya + yb)
                        out[key] = out[key] + coeff * ca * cb * cda * cdb
    return {k: v for k, v in out.items() if v}


@dataclasses.dataclass(frozen=True)
class LindbladTerm:
    """c * prod_m (a_m^dag)^j_m a_m^k_m  rho  (a_m^dag)^l_m a_m^s_m.

    ``powers`` holds one (j, k, l, s) tuple per mode.
    """

    coefficient: complex
    powers: tuple[tuple[int, int, int, int], ...]

    def __post_init__(self):
        powers = tuple(tuple(int(v) for v in p) for p in self.powers)
        for p in powers:
            if len(p) != 4 or min(p) < 0:
                raise ValueError(f"powers must be four nonnegative integers per mode, got {p}")
        object.__setattr__(self, "powers", powers)
        object.__setattr__(self, "coefficient", complex(self.coefficient))

    @property
    def n_modes(self) -> int:
        return len(self.powers)

    @classmethod
    def on_modes(cls, coefficient: complex, n_modes: int, factors: dict[int, tuple]) -> LindbladTerm:
        powers = [(0, 0, 0, 0)] * n_modes
        for mode, p in factors.items():
            powers[mode] = p
        return cls(coefficient, tuple(powers))


@dataclasses.dataclass(frozen=True)
class Monomial:
    coeff: float
    poly: tuple[int, ...]
    deriv: tuple[int, ...]

    @property
    def order(self) -> int:
        return sum(self.deriv)


@dataclasses.dataclass(frozen=True)
class QOperator:
    """Sum of coeff * x^poly * d^deriv acting on Q, over 2M real coordinates."""

    n_modes: int
    monomials: tuple[Monomial, ...]

    @property
    def dim(self) -> int:
        return 2 * self.n_modes

    @property
    def max_order(self) -> int:
        return max((m.order for m in self.monomials), default=0)

    def is_zero(self) -> bool:
        return not self.monomials

    def as_dict(self) -> dict[tuple[tuple[int, ...], tuple[int, ...]], float]:
        """{(deriv multi-index, poly exponents): coeff}."""
        return {(m.deriv, m.poly): m.coeff for m in self.monomials}

    def coordinate_names(self) -> list[str]:
        m = self.n_modes
        return [f"q{i + 1}" for i in range(m)] + [f"p{i + 1}" for i in range(m)]

    def pretty(self) -> str:
        """Canonical text: one monomial per line, sorted by derivative then polynomial."""
        names = self.coordinate_names()
        lines = []
        for m in sorted(self.monomials, key=lambda m: (m.deriv, m.poly)):
            poly = "*".join(
                f"{n}^{e}" if e > 1 else n for n, e in zip(names, m.poly) if e
            ) or "1"
            der = "".join(
                f"d{n}^{e}" if e > 1 else f"d{n}" for n, e in zip(names, m.deriv) if e
            ) or "1"
            lines.append(f"{m.coeff:+.12g} [{poly}] [{der}]")
        return "\n".join(lines) + ("\n" if lines else "")

    def arrays(self) -> OperatorArrays:
        if self.max_order > 2:
            raise UnsupportedError(f"cannot evaluate operator of order {self.max_order} (> 2)")
        return OperatorArrays.from_operator(self)

    def hessian_pairs(self) -> list[tuple[int, int]]:
        pairs = set()
        for m in self.monomials:
            if m.order == 2:
                idx = [i for i, e in enumerate(m.deriv) for _ in range(e)]
                pairs.add(tuple(idx))
        return sorted(pairs)


def compile_terms(terms: Sequence[LindbladTerm], n_modes: int) -> QOperator:
    """Turn a list of Lindblad terms into the real-coordinate operator on Q."""
    acc: dict = defaultdict(complex)
    cache: dict[tuple[int, int, int, int], dict] = {}
    for term in terms:
        if term.n_modes != n_modes:
            raise ValueError(f"term acts on {term.n_modes} modes, expected {n_modes}")
        if max(max(p) for p in term.powers) > MAX_POWER:
            raise UnsupportedError(f"term powers above {MAX_POWER} are not supported: {term.powers}")
        per_mode = []
        for p in term.powers:
            if p not in cache:
                cache[p] = to_real(single_mode_complex_operator(*p))
            per_mode.append(cache[p])
        for combo in itertools.product(*(m.items() for m in per_mode)):
            poly = [0] * (2 * n_modes)
            deriv = [0] * (2 * n_modes)
            coeff = _ONE
            for mode, ((qp, pp, dq, dp), c) in enumerate(combo):
                poly[mode], poly[n_modes + mode] = qp, pp
                deriv[mode], deriv[n_modes + mode] = dq, dp
                coeff = coeff * c
            acc[(tuple(deriv), tuple(poly))] += term.coefficient * complex(coeff)
    monomials = []
    for (deriv, poly), c in sorted(acc.items()):
        scale = max(1.0, abs(c))
        if abs(c.imag) >= IMAG_TOL * scale:
            raise NonHermitianGeneratorError(
                f"imaginary coefficient {c.imag:.3e} on poly {poly}, derivative {deriv}"
            )
        if abs(c.real) > IMAG_TOL * scale:
            monomials.append(Monomial(float(c.real), poly, deriv))
    return QOperator(n_modes, tuple(monomials))


# -- physical models -------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ModelSpec:
    """kind 'harmonic' uses omega, gamma, nbar; 'bosonic-chain' uses J and gamma."""

    kind: str
    n_modes: int
    omega: tuple[float, ...] = ()
    gamma: tuple[float, ...] = ()
    nbar: tuple[float, ...] = ()
    J: float = 0.0

    def __post_init__(self):
        if self.kind not in ("harmonic", "bosonic-chain"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.n_modes < 1:
            raise ValueError("need at least one mode")
        for name in ("omega", "gamma", "nbar"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        expected = ("omega", "gamma", "nbar") if self.kind == "harmonic" else ("gamma",)
        for name in expected:
            if len(getattr(self, name)) != self.n_modes:
                raise ValueError(f"{name} needs {self.n_modes} entries")
        if any(g < 0 for g in self.gamma) or any(n < 0 for n in self.nbar):
            raise ValueError("gamma and nbar must be nonnegative")

    @classmethod
    def harmonic(cls, omega, gamma, nbar) -> ModelSpec:
        omega, gamma, nbar = (tuple(np.atleast_1d(v).tolist()) for v in (omega, gamma, nbar))
        return cls("harmonic", len(omega), omega=omega, gamma=gamma, nbar=nbar)

    @classmethod
    def bosonic_chain(cls, J, gamma) -> ModelSpec:
        gamma = tuple(np.atleast_1d(gamma).tolist())
        return cls("bosonic-chain", len(gamma), gamma=gamma, J=float(J))

    @classmethod
    def draw_harmonic(cls, n_modes: int, rng: np.random.Generator) -> ModelSpec:
        """Per-well parameters uniform in nbar [3,7), gamma [0.5,1.5), omega [0.5,1.5)."""
        nbar = rng.uniform(3.0, 7.0, n_modes)
        gamma = rng.uniform(0.5, 1.5, n_modes)
        omega = rng.uniform(0.5, 1.5, n_modes)
        return cls.harmonic(omega, gamma, nbar)


_AD_A_RHO = (1, 1, 0, 0)      # a^dag a rho
_RHO_AD_A = (0, 0, 1, 1)      # rho a^dag a
_A_RHO_AD = (0, 1, 1, 0)      # a rho a^dag
_AD_RHO_A = (1, 0, 0, 1)      # a^dag rho a
_RHO = (0, 0, 0, 0)


def model_terms(spec: ModelSpec) -> list[LindbladTerm]:
    M = spec.n_modes
    terms: list[LindbladTerm] = []

    def add(c, factors):
        if c != 0:
            terms.append(LindbladTerm.on_modes(c, M, factors))

    if spec.kind == "harmonic":
        for m, (w, g, n) in enumerate(zip(spec.omega, spec.gamma, spec.nbar)):
            # -i[w a^dag a, rho]
            add(-1j * w, {m: _AD_A_RHO})
            add(1j * w, {m: _RHO_AD_A})
            # g/2 (2 a rho a^dag - a^dag a rho - rho a^dag a)
            add(g, {m: _A_RHO_AD})
            add(-0.5 * g, {m: _AD_A_RHO})
            add(-0.5 * g, {m: _RHO_AD_A})
            # g n (a rho a^dag + a^dag rho a - a^dag a rho - rho a a^dag), rho a a^dag = rho a^dag a + rho
            add(g * n, {m: _A_RHO_AD})
            add(g * n, {m: _AD_RHO_A})
            add(-g * n, {m: _AD_A_RHO})
            add(-g * n, {m: _RHO_AD_A})
            add(-g * n, {m: _RHO})
    else:
        J = spec.J
        for m in range(M - 1):
            n = m + 1
            # -i[H, rho] with H = -J (a_n^dag a_m + a_m^dag a_n)
            add(1j * J, {n: (1, 0, 0, 0), m: (0, 1, 0, 0)})
            add(1j * J, {m: (1, 0, 0, 0), n: (0, 1, 0, 0)})
            add(-1j * J, {n: (0, 0, 1, 0), m: (0, 0, 0, 1)})
            add(-1j * J, {m: (0, 0, 1, 0), n: (0, 0, 0, 1)})
        for m, g in enumerate(spec.gamma):
            # -g/2 (n rho + rho n - 2 a rho a^dag)
            add(-0.5 * g, {m: _AD_A_RHO})
            add(-0.5 * g, {m: _RHO_AD_A})
            add(g, {m: _A_RHO_AD})
    return terms


def compile_model(spec: ModelSpec) -> QOperator:
    return compile_terms(model_terms(spec), spec.n_modes)


def zero_operator(n_modes: int) -> QOperator:
    return QOperator(n_modes, ())


# -- evaluation ------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class OperatorArrays:
    """Dense arrays for batched evaluation (numpy or jax.numpy)."""

    coeffs: np.ndarray   # (T,)
    poly: np.ndarray     # (T, d) int
    order: np.ndarray    # (T,) in {0, 1, 2}
    i: np.ndarray        # (T,) first derivative index (0 if unused)
    j: np.ndarray        # (T,) second derivative index (0 if unused)

    @classmethod
    def from_operator(cls, op: QOperator) -> OperatorArrays:
        d = op.dim
        T = len(op.monomials)
        coeffs = np.zeros(T)
        poly = np.zeros((T, d), dtype=np.int64)
        order = np.zeros(T, dtype=np.int64)
        ii = np.zeros(T, dtype=np.int64)
        jj = np.zeros(T, dtype=np.int64)
        for t, m in enumerate(op.monomials):
            coeffs[t] = m.coeff
            poly[t] = m.poly
            order[t] = m.order
            idx = [k for k, e in enumerate(m.deriv) for _ in range(e)]
            if idx:
                ii[t] = idx[0]
                jj[t] = idx[-1]
        return cls(coeffs, poly, order, ii, jj)


def ratio_from_derivatives(arrs: OperatorArrays, x, g, H, xp=np):
    """(L Q)/Q at a batch of points from derivatives of log Q.

    ``x``, ``g`` have shape (N, d) and ``H`` (N, d, d).  Works with numpy or
    jax.numpy passed as ``xp``.
    """
    if arrs.coeffs.size == 0:
        return xp.zeros(x.shape[0])
    poly = xp.prod(x[:, None, :] ** arrs.poly[None, :, :], axis=-1)      # (N, T)
    gi = g[:, arrs.i]
    gj = g[:, arrs.j]
    hij = H[:, arrs.i, arrs.j]
    d = xp.where(arrs.order == 0, 1.0, xp.where(arrs.order == 1, gi, hij + gi * gj))
    return xp.sum(arrs.coeffs * poly * d, axis=-1)


def apply_ratio(op: QOperator, x, grad_logq, hess_logq):
    """(L Q)/Q at x given grad and Hessian of log Q; accepts one point or a batch."""
    arrs = op.arrays()
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    g = np.asarray(grad_logq, dtype=np.float64).reshape(xb.shape)
    H = np.asarray(hess_logq, dtype=np.float64).reshape(xb.shape + (xb.shape[1],))
    out = ratio_from_derivatives(arrs, xb, g, H)
    return float(out[0]) if single else out


def apply_to_grid(op: QOperator, axes: Sequence[np.ndarray], derivative) -> np.ndarray:
    """(L Q) on a tensor grid; ``derivative(multi_index)`` returns d^alpha Q on the grid."""
    if op.is_zero():
        return np.zeros(tuple(len(a) for a in axes))
    mesh = np.meshgrid(*axes, indexing="ij")
    out = None
    cache = {}
    for m in op.monomials:
        if m.deriv not in cache:
            cache[m.deriv] = derivative(m.deriv)
        poly = 1.0
        for xk, e in zip(mesh, m.poly):
            if e:
                poly = poly * xk ** e
        term = m.coeff * poly * cache[m.deriv]
        out = term if out is None else out + term
    return out


def finite_difference_derivative(values: np.ndarray, spacings: Sequence[float]):
    """Second-order central differences; returns a ``derivative`` callable."""

    def derivative(multi_index: Iterable[int]) -> np.ndarray:
        out = values
        for axis, e in enumerate(multi_index):
            for _ in range(e):
                out = np.gradient(out, spacings[axis], axis=axis, edge_order=2)
        return out

    return derivative


def conservation_defect(op: QOperator, axes: Sequence[np.ndarray], density: np.ndarray) -> float:
    """Quadrature of L Q over a grid; ~0 for trace-preserving generators.

    Derivatives are spectral (periodic grid), so density must vanish at the edges.
    """
    if op.dim > 4:
        raise UnsupportedError("grid checks are limited to 4 real dimensions")
    if op.is_zero():
        return 0.0
    from qflow.reference import spectral_derivative

    spacings = [a[1] - a[0] for a in axes]
    lq = apply_to_grid(op, axes, spectral_derivative(density, spacings))
    return float(lq.sum() * math.prod(spacings))
