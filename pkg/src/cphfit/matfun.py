"""Matrix-function engine: exponentials, principal powers, coupled integrals.

All routines are pure functions of their arguments and safe to call
concurrently.  Matrices are dense numpy arrays; dimensions stay small
(p <= ~50), so direct decompositions are always affordable.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import DomainError, ValidationError

# Eigenvector-basis condition limit below which diagonalization is trusted.
EIG_COND_LIMIT = 1e8


def _as_square(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1 and a.size == 1:
        a = a.reshape(1, 1)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite entries")
    if not np.iscomplexobj(a):
        a = a.astype(float)
    return a


def expm(m) -> np.ndarray:
    """Matrix exponential exp(M) (scaling-and-squaring with Pade approximants)."""
    return scipy.linalg.expm(_as_square(m))


def _eig_basis(a: np.ndarray):
    """Eigendecomposition with a condition estimate; None when unreliable."""
    try:
        lam, v = np.linalg.eig(a)
        vinv = np.linalg.inv(v)
    except np.linalg.LinAlgError:
        return None
    cond = np.linalg.norm(v, 2) * np.linalg.norm(vinv, 2)
    if not np.isfinite(cond) or cond >= EIG_COND_LIMIT:
        return None
    return lam, v, vinv


def matpow(m, power) -> np.ndarray:
    """Principal-branch matrix power M**power for real or complex exponents.

    Integer exponents reduce to repeated multiplication.  Otherwise the
    spectrum must avoid the closed negative real axis; a well-conditioned
    eigenbasis is used when available (cond < 1e8), falling back to
    exp(power*log(M)) on the Schur-based principal logarithm.
    """
    a = _as_square(m)
    real_input = not np.iscomplexobj(a)
    power = complex(power)
    if power.imag == 0.0 and power.real == int(power.real):
        out = np.linalg.matrix_power(a, int(power.real))
        return out.astype(a.dtype, copy=False)

    lam_all = np.linalg.eigvals(a)
    scale = max(1.0, float(np.max(np.abs(lam_all))))
    on_cut = (np.abs(lam_all.imag) <= 1e-12 * scale) & (lam_all.real <= 1e-300 * scale)
    if np.any(on_cut):
        raise DomainError(
            "matrix power undefined: eigenvalue on the closed negative real axis "
            f"(found {lam_all[on_cut][0]:.6g})"
        )

    basis = _eig_basis(a)
    if basis is not None:
        lam, v, vinv = basis
        out = (v * lam.astype(complex) ** power) @ vinv
    else:
        out = scipy.linalg.expm(power * scipy.linalg.logm(a))

    if real_input and power.imag == 0.0:
        if np.max(np.abs(out.imag)) <= 1e-10 * max(1.0, np.max(np.abs(out.real))):
            return out.real
    return out


def vanloan_conv(a, b, x: float) -> np.ndarray:
    """Coupled integral J = int_0^x exp(A(x-u)) B exp(Au) du.

    Computed as the top-right p x p block of exp([[A, B], [0, A]] * x).
    """
    am = _as_square(a, "a")
    bm = _as_square(b, "b")
    if am.shape != bm.shape:
        raise ValidationError(f"dimension mismatch: {am.shape} vs {bm.shape}")
    x = float(x)
    if not np.isfinite(x) or x < 0:
        raise ValidationError(f"x must be finite and nonnegative, got {x}")
    p = am.shape[0]
    dtype = complex if (np.iscomplexobj(am) or np.iscomplexobj(bm)) else float
    blk = np.zeros((2 * p, 2 * p), dtype=dtype)
    blk[:p, :p] = am
    blk[:p, p:] = bm
    blk[p:, p:] = am
    return scipy.linalg.expm(blk * x)[:p, p:]


def exp_integral(t_mat, theta: float, v: float, w: float) -> np.ndarray:
    """int_v^w exp(theta*T*u) du = (theta T)^(-1) (exp(theta T w) - exp(theta T v)).

    T must be invertible; w = inf is allowed when the spectrum of T lies in
    the open left half-plane (the exponential then vanishes at infinity).
    """
    tm = _as_square(t_mat, "T")
    theta = float(theta)
    if theta <= 0:
        raise ValidationError(f"theta must be positive, got {theta}")
    v = float(v)
    w = float(w)
    if v < 0 or w < v:
        raise ValidationError(f"need 0 <= v <= w, got v={v}, w={w}")
    m = theta * tm
    ev = scipy.linalg.expm(m * v)
    ew = np.zeros_like(ev) if np.isinf(w) else scipy.linalg.expm(m * w)
    return np.linalg.solve(m, ew - ev)
