"""Phase-type distributions: validated parameters, evaluation, sampling, templates.

A PhaseType is the absorption-time law of a transient Markov jump process:
density pi*exp(T*y)*t and survival pi*exp(T*y)*1 in terms of the sub-intensity
block T and exit rates t = -T*1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import gammaln

from . import matfun
from .errors import DomainError, SpectrumError, ValidationError

STRUCTURES = ("general", "coxian", "hyperexponential")

# Relative singular-value cutoff for Jordan-block rank tests.
_RANK_TOL = 1e-9


class SubIntensity:
    """Validated p x p sub-intensity matrix with derived exit rates.

    Invariants: strictly negative diagonal, nonnegative off-diagonal entries,
    nonpositive row sums, and spectrum in the open left half-plane (which
    implies invertibility).  Row sums within 1e-10 of zero (relative to the
    largest rate) are treated as exactly zero.
    """

    __slots__ = ("matrix", "exit_rates", "dim")

    def __init__(self, matrix):
        t = np.array(matrix, dtype=float)
        if t.ndim == 0:
            t = t.reshape(1, 1)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValidationError(f"T must be square, got shape {t.shape}")
        if t.shape[0] < 1:
            raise ValidationError("T must have dimension >= 1")
        if not np.all(np.isfinite(t)):
            raise ValidationError("T has non-finite entries")
        p = t.shape[0]
        for k in range(p):
            if not t[k, k] < 0:
                raise ValidationError(
                    f"diagonal entry T[{k},{k}] = {t[k, k]:g} must be strictly negative"
                )
        off = t.copy()
        np.fill_diagonal(off, 0.0)
        if np.any(off < 0):
            k, l = np.argwhere(off < 0)[0]
            raise ValidationError(
                f"off-diagonal entry T[{k},{l}] = {t[k, l]:g} must be nonnegative"
            )
        tol = 1e-10 * np.max(np.abs(t))
        row_sums = t.sum(axis=1)
        if np.any(row_sums > tol):
            k = int(np.argmax(row_sums))
            raise ValidationError(
                f"row {k} of T sums to {row_sums[k]:g} > 0; rows must sum to <= 0"
            )
        exit_rates = np.where(np.abs(row_sums) <= tol, 0.0, -row_sums)
        lam = np.linalg.eigvals(t)
        if np.max(lam.real) >= -1e-12 * max(1.0, np.max(np.abs(t))):
            raise ValidationError(
                "T must have spectrum in the open left half-plane "
                f"(max real part {np.max(lam.real):.3e}); is absorption reachable "
                "from every state?"
            )
        t.setflags(write=False)
        exit_rates.setflags(write=False)
        object.__setattr__(self, "matrix", t)
        object.__setattr__(self, "exit_rates", exit_rates)
        object.__setattr__(self, "dim", p)

    def __setattr__(self, name, value):
        raise AttributeError("SubIntensity is immutable")

    def __repr__(self):
        return f"SubIntensity(dim={self.dim})"


@dataclass(frozen=True)
class TailDominant:
    """Leading tail term: survival ~ constant * y**power * exp(-rate*y)."""

    rate: float
    power: int
    constant: float


class _Spectral:
    """Cached eigendecomposition of T used to vectorize evaluations."""

    __slots__ = ("ok", "lam", "v", "vinv", "pi_v", "v_t", "v_e")

    def __init__(self, pi, sub):
        basis = matfun._eig_basis(sub.matrix)
        self.ok = basis is not None
        if self.ok:
            self.lam, self.v, self.vinv = basis
            self.pi_v = pi @ self.v
            self.v_t = self.vinv @ sub.exit_rates
            self.v_e = self.vinv @ np.ones(sub.dim)


class PhaseType:
    """PH(pi, T) distribution with immutable parameters.

    Evaluators accept scalars or arrays; the sampler takes an explicit numpy
    Generator so callers control seeding (one generator per thread).
    """

    def __init__(self, pi, sub):
        if not isinstance(sub, SubIntensity):
            sub = SubIntensity(sub)
        pi = np.array(pi, dtype=float).reshape(-1)
        if pi.shape[0] != sub.dim:
            raise ValidationError(
                f"pi has length {pi.shape[0]}, expected {sub.dim}"
            )
        if np.any(pi < 0):
            k = int(np.argwhere(pi < 0)[0])
            raise ValidationError(f"pi[{k}] = {pi[k]:g} must be nonnegative")
        total = pi.sum()
        if abs(total - 1.0) > 1e-10:
            raise ValidationError(f"pi must sum to 1, got {total!r}")
        pi = pi / total
        pi.setflags(write=False)
        self.pi = pi
        self.sub = sub
        self._spec = None

    @property
    def dim(self) -> int:
        return self.sub.dim

    def _spectral(self) -> _Spectral:
        if self._spec is None:
            self._spec = _Spectral(self.pi, self.sub)
        return self._spec

    def _check_positive(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0) or not np.all(np.isfinite(y)):
            raise DomainError("argument must be positive and finite")
        return y

    def pdf(self, y):
        """Density pi * exp(T y) * t, y > 0."""
        y = self._check_positive(y)
        spec = self._spectral()
        if spec.ok:
            ey = np.exp(np.multiply.outer(y, spec.lam))
            out = np.real(ey * spec.pi_v @ spec.v_t)
        else:
            out = np.vectorize(
                lambda s: float(self.pi @ matfun.expm(self.sub.matrix * s) @ self.sub.exit_rates)
            )(y)
        return np.maximum(out, 0.0)[()] if np.ndim(out) else max(float(out), 0.0)

    def survival(self, y):
        """Tail probability pi * exp(T y) * 1."""
        y = self._check_positive(y)
        spec = self._spectral()
        if spec.ok:
            ey = np.exp(np.multiply.outer(y, spec.lam))
            out = np.real(ey * spec.pi_v @ spec.v_e)
        else:
            out = np.vectorize(
                lambda s: float(self.pi @ matfun.expm(self.sub.matrix * s).sum(axis=1))
            )(y)
        return np.clip(out, 0.0, 1.0)[()]

    def cdf(self, y):
        """Distribution function 1 - pi * exp(T y) * 1."""
        return 1.0 - self.survival(y)

    def moment(self, nu: float) -> float:
        """Fractional moment E[Y^nu] = Gamma(nu+1) * pi * (-T)^(-nu) * 1."""
        nu = float(nu)
        if nu < 0:
            raise DomainError(f"moment order must be >= 0, got {nu}")
        if nu == 0:
            return 1.0
        green_pow = matfun.matpow(-self.sub.matrix, -nu)
        value = self.pi @ green_pow @ np.ones(self.dim)
        return float(math.exp(gammaln(nu + 1.0)) * np.real(value))

    def sample(self, rng: np.random.Generator, size=None):
        """Absorption times of the jump chain; vectorized over `size` paths."""
        n = 1 if size is None else int(size)
        t = self.sub.matrix
        exit_rates = self.sub.exit_rates
        p = self.dim
        rates = -np.diag(t)
        # Per-state cumulative jump distribution: states 0..p-1 then absorption.
        probs = np.zeros((p, p + 1))
        for k in range(p):
            row = np.zeros(p + 1)
            row[:p] = t[k] / rates[k]
            row[k] = 0.0
            row[p] = exit_rates[k] / rates[k]
            probs[k] = np.cumsum(row)
        states = rng.choice(p, size=n, p=self.pi)
        times = np.zeros(n)
        active = np.ones(n, dtype=bool)
        while np.any(active):
            idx = np.flatnonzero(active)
            cur = states[idx]
            times[idx] += rng.exponential(1.0, size=idx.size) / rates[cur]
            u = rng.random(idx.size)
            nxt = np.empty(idx.size, dtype=int)
            for k in range(p):
                sel = cur == k
                if np.any(sel):
                    nxt[sel] = np.searchsorted(probs[k], u[sel], side="right")
            states[idx] = nxt
            active[idx] = nxt < p
        return float(times[0]) if size is None else times

    def tail_dominant(self) -> TailDominant:
        """Dominant tail term (rate, polynomial power, constant).

        The rate is minus the largest real eigenvalue of T, the power is the
        size of its largest Jordan block minus one (detected by rank tests),
        and the constant comes from the spectral projector onto that block.
        """
        t = self.sub.matrix
        lam_star = _dominant_real_eigenvalue(t)
        rate = -lam_star
        n_blk = _jordan_index(t, lam_star)
        shifted = t - lam_star * np.eye(self.dim)
        proj = _spectral_projector_at_zero(shifted)
        lead = np.linalg.matrix_power(shifted, n_blk - 1) @ proj
        c = float(np.real(self.pi @ lead @ np.ones(self.dim))) / math.factorial(n_blk - 1)
        if c <= 0:
            raise SpectrumError(
                f"nonpositive leading tail constant {c:g}; spectrum too clustered "
                "for reliable dominant-term extraction"
            )
        _check_tail_constant(self, rate, n_blk - 1, c)
        return TailDominant(rate=rate, power=n_blk - 1, constant=c)

    def __repr__(self):
        return f"PhaseType(dim={self.dim})"


def _dominant_real_eigenvalue(t: np.ndarray) -> float:
    lam = np.linalg.eigvals(t)
    scale = max(1.0, float(np.max(np.abs(lam))))
    lam_max = np.max(lam.real)
    near = lam[np.abs(lam.real - lam_max) <= 1e-9 * scale]
    if np.any(np.abs(near.imag) > 1e-9 * scale):
        raise SpectrumError(
            "dominant eigenvalue of T is complex; tail asymptotics unsupported"
        )
    return float(lam_max)

def _jordan_index(t: np.ndarray, lam_star: float) -> int:
    p = t.shape[0]
    shifted = t - lam_star * np.eye(p)
    tol = _RANK_TOL * np.linalg.norm(t, 2)

    def rank_of(power):
        sv = np.linalg.svd(np.linalg.matrix_power(shifted, power), compute_uv=False)
        return int(np.sum(sv > tol * max(1.0, sv[0] if sv.size else 1.0)))

    prev = rank_of(1)
    for k in range(1, p + 1):
        cur = rank_of(k + 1)
        if cur == prev:
            return k
        prev = cur
    return p


def _spectral_projector_at_zero(n_mat: np.ndarray) -> np.ndarray:
    """Projector onto the generalized eigenspace of the (near-)zero eigenvalues."""
    p = n_mat.shape[0]
    delta = max(_RANK_TOL * np.linalg.norm(n_mat, 2), 1e-300)
    u, z, sdim = scipy.linalg.schur(
        n_mat.astype(complex), output="complex", sort=lambda x: abs(x) < delta
    )
    if sdim == 0 or sdim == p:
        return np.eye(p)
    u11 = u[:sdim, :sdim]
    u12 = u[:sdim, sdim:]
    u22 = u[sdim:, sdim:]
    r = scipy.linalg.solve_sylvester(u11, -u22, -u12)
    block = np.zeros((p, p), dtype=complex)
    block[:sdim, :sdim] = np.eye(sdim)
    block[:sdim, sdim:] = r
    return np.real(z @ block @ z.conj().T)


def _check_tail_constant(ph: PhaseType, rate: float, power: int, c: float):
    lam = np.linalg.eigvals(ph.sub.matrix)
    others = lam.real[lam.real < -rate + 1e-9]
    gap = (-rate) - np.max(others) if others.size else rate
    y = max(40.0 / max(gap, 1e-6), 10.0 / rate)
    shifted = ph.sub.matrix + rate * np.eye(ph.dim)
    for yy in (y, 2 * y):
        val = ph.pi @ matfun.expm(shifted * yy) @ np.ones(ph.dim)
        ratio = float(val) / (c * yy**power)
        if abs(ratio - 1.0) > 0.1:
            warnings.warn(
                f"dominant tail term check off by {abs(ratio - 1.0):.2%} at y={yy:g}",
                RuntimeWarning,
                stacklevel=3,
            )
            break


def structure_masks(kind: str, p: int):
    """Boolean (off-diagonal, exit) masks describing a structure's zero pattern."""
    if kind not in STRUCTURES:
        raise ValidationError(f"unknown structure {kind!r}, expected one of {STRUCTURES}")
    off = np.zeros((p, p), dtype=bool)
    exits = np.ones(p, dtype=bool)
    if kind == "general":
        off = ~np.eye(p, dtype=bool)
    elif kind == "coxian":
        for k in range(p - 1):
            off[k, k + 1] = True
    return off, exits


def template(kind: str, p: int, rng: np.random.Generator) -> PhaseType:
    """Random valid PhaseType with the requested zero pattern.

    Rates are drawn uniformly on [0.1, 2] (diagonal set from row sums), which
    keeps initial spectra well separated for EM stability.  Coxian templates
    start deterministically in the first state.
    """
    if p < 1:
        raise ValidationError(f"dimension must be >= 1, got {p}")
    off_mask, exit_mask = structure_masks(kind, p)
    t = np.zeros((p, p))
    t[off_mask] = rng.uniform(0.1, 2.0, size=int(off_mask.sum()))
    exits = np.where(exit_mask, rng.uniform(0.1, 2.0, size=p), 0.0)
    np.fill_diagonal(t, -(t.sum(axis=1) + exits))
    if kind == "coxian":
        pi = np.zeros(p)
        pi[0] = 1.0
    else:
        pi = rng.dirichlet(np.ones(p))
    return PhaseType(pi, t)
