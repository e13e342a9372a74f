"""EM estimation of scaled phase-type models from exact and censored data.

The E-step needs, per observation, integrals of matrix exponentials against
the mixing density.  Two evaluation routes are implemented:

* Gamma mixing: fully closed form.  Integrals of the form
  int exp(theta*C*x) theta^m f(theta) dtheta collapse to
  (Gamma(alpha+m)/Gamma(alpha)) (I - Cx)^(-(alpha+m)) applied to the
  2p x 2p coupling block C = [[T, b*pi], [0, T]], so no quadrature enters and
  the log-likelihood trace is exactly monotone.
* any other family: a fixed quadrature rule over theta, which makes the
  discretized objective itself an EM objective (also exactly monotone).

Both routes are vectorized through an eigendecomposition of T when the
eigenbasis is well conditioned and fall back to dense per-observation matrix
functions otherwise.  Observation sums always reduce in index order, so fits
are bit-reproducible for a fixed seed regardless of the worker-thread count.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import digamma

from . import matfun
from .cph import ScaledPhaseType
from .errors import (
    DomainError,
    EstimationError,
    NumericalUnderflow,
    ValidationError,
)
from .mixing import (
    DensityMixing,
    GammaMixing,
    QuadratureRule,
    StableMixing,
    build_rule,
    digamma_inverse,
    rule_on_range,
)
from .phasetype import PhaseType, SubIntensity, structure_masks, template

_CHUNK_EXACT = 512
_CHUNK_CENSORED = 256
_OCCUPANCY_FLOOR = 1e-12
_UNDERFLOW_FLOOR = 1e-300


# ---------------------------------------------------------------------------
# data containers


@dataclass(frozen=True)
class Observation:
    """One data point: exact value, interval (v, w], or right-censoring at v."""

    lower: float
    upper: float

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if math.isnan(lo) or math.isnan(hi):
            raise ValidationError("observation bounds must not be NaN")
        if lo == hi:
            if lo <= 0 or math.isinf(lo):
                raise ValidationError(f"exact observation must be positive and finite, got {lo}")
        else:
            if lo < 0 or hi <= lo:
                raise ValidationError(f"need 0 <= lower < upper, got ({lo}, {hi})")

    @classmethod
    def exact(cls, x: float) -> "Observation":
        return cls(x, x)

    @classmethod
    def interval(cls, v: float, w: float) -> "Observation":
        return cls(v, w)

    @classmethod
    def right_censored(cls, v: float) -> "Observation":
        if not v > 0:
            raise ValidationError(f"right-censoring point must be positive, got {v}")
        return cls(v, math.inf)

    @classmethod
    def left_censored(cls, w: float) -> "Observation":
        return cls(0.0, w)

    @property
    def is_exact(self) -> bool:
        return self.lower == self.upper

    @property
    def kind(self) -> str:
        if self.is_exact:
            return "exact"
        return "right" if math.isinf(self.upper) else "interval"


@dataclass
class EMStats:
    """Expected complete-data sufficient statistics.

    ``starts`` are the expected chain starts per state, ``scaled_time`` the
    expected Theta-weighted occupation times, ``jumps`` the expected
    state-to-state transition counts (zero diagonal), ``exits`` the expected
    exit counts, and ``count`` the effective number of observations.  The
    scaling-family update consumes either per-node posterior masses
    (quadrature route) or the accumulated posterior mean of log Theta
    (closed-form Gamma route).
    """

    starts: np.ndarray
    scaled_time: np.ndarray
    jumps: np.ndarray
    exits: np.ndarray
    count: float
    node_masses: np.ndarray | None = None
    log_theta_sum: float | None = None

    def merged(self, other: "EMStats") -> "EMStats":
        def opt(a, b):
            if a is None and b is None:
                return None
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return EMStats(
            starts=self.starts + other.starts,
            scaled_time=self.scaled_time + other.scaled_time,
            jumps=self.jumps + other.jumps,
            exits=self.exits + other.exits,
            count=self.count + other.count,
            node_masses=opt(self.node_masses, other.node_masses),
            log_theta_sum=opt(self.log_theta_sum, other.log_theta_sum),
        )


def _zero_stats(p: int, n_nodes: int | None) -> EMStats:
    return EMStats(
        starts=np.zeros(p),
        scaled_time=np.zeros(p),
        jumps=np.zeros((p, p)),
        exits=np.zeros(p),
        count=0.0,
        node_masses=None if n_nodes is None else np.zeros(n_nodes),
        log_theta_sum=None if n_nodes is not None else 0.0,
    )


@dataclass
class EMConfig:
    """Settings for a fit: model structure, mixing family, and EM controls."""

    dim: int
    structure: str = "coxian"
    mixing: str = "gamma"
    alpha0: float = 1.0
    eta: float = 1.0
    max_iter: int = 2000
    tol: float = 1e-8
    nodes: int = 100
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f"dimension must be >= 1, got {self.dim}")
        if self.max_iter < 1:
            raise ValidationError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.tol > 0:
            raise ValidationError(f"tolerance must be positive, got {self.tol}")
        if self.mixing not in ("gamma", "stable"):
            raise ValidationError(f"mixing must be 'gamma' or 'stable', got {self.mixing!r}")
        if self.threads < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}")

    def make_family(self):
        if self.mixing == "gamma":
            return GammaMixing(self.alpha0)
        return StableMixing(self.alpha0, self.eta)


@dataclass
class FitReport:
    """Result of a fit: final model, objective trace, and convergence info."""

    model: ScaledPhaseType
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    coverage_ok: bool = True

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


# ---------------------------------------------------------------------------
# spectral helpers


class _Engine:
    """Per-parameter cache: eigenbasis of T and transformed rank-one blocks."""

    def __init__(self, ph: PhaseType):
        self.ph = ph
        self.p = ph.dim
        self.pi = ph.pi
        self.t_mat = ph.sub.matrix
        self.t_exit = ph.sub.exit_rates
        self.t_off = ph.sub.matrix.copy()
        np.fill_diagonal(self.t_off, 0.0)
        basis = matfun._eig_basis(self.t_mat)
        self.ok = basis is not None
        if self.ok:
            self.lam, self.v, self.vinv = basis
            ones = np.ones(self.p)
            self.pi_v = self.pi @ self.v
            self.v_t = self.vinv @ self.t_exit
            self.v_e = self.vinv @ ones
            self.g_t = self.vinv @ np.outer(self.t_exit, self.pi) @ self.v
            self.g_e = self.vinv @ np.outer(ones, self.pi) @ self.v
            scale = max(1.0, float(np.max(np.abs(self.lam))))
            den = self.lam[:, None] - self.lam[None, :]
            self._den = den
            self._near = np.abs(den) <= 1e-6 * scale
            self._mid = 0.5 * (self.lam[:, None] + self.lam[None, :])

    def dd_power(self, xs: np.ndarray, beta: float, coef: float) -> np.ndarray:
        """Divided differences of z -> coef*(1-x z)**(-beta) on the spectrum."""
        a = 1.0 - np.multiply.outer(xs, self.lam)
        f = coef * a ** (-beta)
        num = f[:, :, None] - f[:, None, :]
        amid = 1.0 - xs[:, None, None] * self._mid
        deriv = coef * beta * xs[:, None, None] * amid ** (-beta - 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            dd = num / self._den
        return np.where(self._near, deriv, dd)

    def dd_exp(self, svals: np.ndarray) -> np.ndarray:
        """Divided differences of z -> exp(s z) on the spectrum, per scalar s."""
        es = np.exp(np.multiply.outer(svals, self.lam))
        num = es[..., :, None] - es[..., None, :]
        shp = svals[..., None, None]
        deriv = shp * np.exp(shp * self._mid)
        with np.errstate(divide="ignore", invalid="ignore"):
            dd = num / self._den
        return np.where(self._near, deriv, dd)

    def sandwich(self, core: np.ndarray) -> np.ndarray:
        """V @ core @ Vinv over leading batch axes."""
        return np.real(np.einsum("ab,...bc,cd->...ad", self.v, core, self.vinv))


def _underflow(where: str, index: int) -> NumericalUnderflow:
    return NumericalUnderflow(
        f"likelihood underflow (below {_UNDERFLOW_FLOOR:g}) at {where} observation #{index}"
    )


# ---------------------------------------------------------------------------
# Gamma closed-form route


def _gamma_exact_spectral(eng: _Engine, alpha: float, xs, wts):
    lam = eng.lam
    a = 1.0 - np.multiply.outer(xs, lam)  # (N,p)
    pow1 = a ** (-(alpha + 1.0))
    f = alpha * np.real((pow1 * eng.pi_v) @ eng.v_t)
    bad = np.flatnonzero(~(f > _UNDERFLOW_FLOOR))
    if bad.size:
        raise _underflow("exact", int(bad[0]))
    e1t = alpha * np.real(np.einsum("ki,ni->nk", eng.v, pow1 * eng.v_t))
    pie1 = alpha * np.real(np.einsum("ni,ik->nk", pow1 * eng.pi_v, eng.vinv))
    dd = eng.dd_power(xs, alpha + 1.0, alpha)
    w_blk = eng.sandwich(dd * eng.g_t)  # (N,p,p)
    lognum = alpha * np.real(
        ((pow1 * (digamma(alpha + 1.0) - np.log(a))) * eng.pi_v) @ eng.v_t
    )
    inv_f = wts / f
    starts = eng.pi * (e1t.T @ inv_f)
    exits = eng.t_exit * (pie1.T @ inv_f)
    scaled_time = np.einsum("nkk,n->k", w_blk, inv_f)
    jumps = eng.t_off * np.einsum("nlk,n->kl", w_blk, inv_f)
    log_theta = float(lognum @ inv_f)
    ll = float(wts @ np.log(f))
    return starts, scaled_time, jumps, exits, None, log_theta, float(wts.sum()), ll


def _gamma_exact_dense(eng: _Engine, alpha: float, xs, wts):
    p = eng.p
    eye = np.eye(p)
    eye2 = np.eye(2 * p)
    c_blk = np.zeros((2 * p, 2 * p))
    c_blk[:p, :p] = eng.t_mat
    c_blk[:p, p:] = np.outer(eng.t_exit, eng.pi)
    c_blk[p:, p:] = eng.t_mat
    starts = np.zeros(p)
    scaled_time = np.zeros(p)
    jumps = np.zeros((p, p))
    exits = np.zeros(p)
    log_theta = 0.0
    ll = 0.0
    for n, (x, wt) in enumerate(zip(xs, wts)):
        big = alpha * np.real(matfun.matpow(eye2 - x * c_blk, -(alpha + 1.0)))
        e1 = big[:p, :p]
        w_blk = big[:p, p:]
        f = float(eng.pi @ e1 @ eng.t_exit)
        if not f > _UNDERFLOW_FLOOR:
            raise _underflow("exact", n)
        lg = scipy.linalg.logm(eye - x * eng.t_mat)
        lognum = float(
            np.real(eng.pi @ e1 @ (digamma(alpha + 1.0) * eye - lg) @ eng.t_exit)
        )
        starts += wt * eng.pi * (e1 @ eng.t_exit) / f
        exits += wt * eng.t_exit * (eng.pi @ e1) / f
        scaled_time += wt * np.diag(w_blk) / f
        jumps += wt * eng.t_off * w_blk.T / f
        log_theta += wt * lognum / f
        ll += wt * math.log(f)
    return starts, scaled_time, jumps, exits, None, log_theta, float(np.sum(wts)), ll


def _gamma_censored_spectral(eng: _Engine, alpha: float, vs, ws, wts):
    lam = eng.lam
    finite = np.isfinite(ws)
    ws_safe = np.where(finite, ws, 0.0)
    av = 1.0 - np.multiply.outer(vs, lam)
    aw = 1.0 - np.multiply.outer(ws_safe, lam)
    s0v = av ** (-alpha)
    s0w = np.where(finite[:, None], aw ** (-alpha), 0.0)
    prob = np.real(((s0v - s0w) * eng.pi_v) @ eng.v_e)
    bad = np.flatnonzero(~(prob > _UNDERFLOW_FLOOR))
    if bad.size:
        raise _underflow("censored", int(bad[0]))
    bnum = eng.pi * np.real(np.einsum("ki,ri->rk", eng.v, (s0v - s0w) * eng.v_e))
    # pi @ T^-1 [G0(w) - G0(v)]: the theta in the leading weight cancels the
    # 1/theta of int_v^w exp(theta T u) du, leaving the m = 0 kernel.
    piss0 = np.real(np.einsum("ri,ik->rk", eng.pi_v * (s0w - s0v) / lam, eng.vinv))
    dv0 = eng.sandwich(eng.dd_power(vs, alpha, 1.0) * eng.g_e)
    if np.any(finite):
        dw0 = eng.sandwich(
            np.where(finite[:, None, None], eng.dd_power(ws_safe, alpha, 1.0), 0.0)
            * eng.g_e
        )
    else:
        dw0 = np.zeros_like(dv0)
    hv = s0v * (digamma(alpha) - np.log(av))
    hw = np.where(finite[:, None], s0w * (digamma(alpha) - np.log(aw)), 0.0)
    lognum = np.real(((hv - hw) * eng.pi_v) @ eng.v_e)
    inv_p = wts / prob
    starts = bnum.T @ inv_p
    tz_term = piss0 - np.diagonal(dw0, axis1=1, axis2=2) + np.diagonal(dv0, axis1=1, axis2=2)
    scaled_time = tz_term.T @ inv_p
    jumps = eng.t_off * (
        np.einsum("rk,r->k", piss0, inv_p)[:, None]
        - np.einsum("rlk,r->kl", dw0, inv_p)
        + np.einsum("rlk,r->kl", dv0, inv_p)
    )
    exits = eng.t_exit * (piss0.T @ inv_p)
    log_theta = float(lognum @ inv_p)
    ll = float(wts @ np.log(prob))
    return starts, scaled_time, jumps, exits, None, log_theta, float(wts.sum()), ll


def _gamma_censored_dense(eng: _Engine, alpha: float, vs, ws, wts):
    p = eng.p
    eye = np.eye(p)
    eye2 = np.eye(2 * p)
    ce = np.zeros((2 * p, 2 * p))
    ce[:p, :p] = eng.t_mat
    ce[:p, p:] = np.outer(np.ones(p), eng.pi)
    ce[p:, p:] = eng.t_mat
    tinv = np.linalg.inv(eng.t_mat)
    ones = np.ones(p)
    starts = np.zeros(p)
    scaled_time = np.zeros(p)
    jumps = np.zeros((p, p))
    exits = np.zeros(p)
    log_theta = 0.0
    ll = 0.0

    def g_pow(x, m):
        coef = alpha if m else 1.0
        return coef * np.real(matfun.matpow(eye - x * eng.t_mat, -(alpha + m)))

    def dblock(x, m):
        coef = alpha if m else 1.0
        return coef * np.real(matfun.matpow(eye2 - x * ce, -(alpha + m)))[:p, p:]

    def hmat(x):
        lg = scipy.linalg.logm(eye - x * eng.t_mat)
        return g_pow(x, 0) @ (digamma(alpha) * eye - lg)

    zero = np.zeros((p, p))
    for r, (v, w, wt) in enumerate(zip(vs, ws, wts)):
        fin = np.isfinite(w)
        g0v, g0w = g_pow(v, 0), g_pow(w, 0) if fin else zero
        prob = float(eng.pi @ (g0v - g0w) @ ones)
        if not prob > _UNDERFLOW_FLOOR:
            raise _underflow("censored", r)
        piss0 = eng.pi @ tinv @ (g0w - g0v)
        dv0, dw0 = dblock(v, 0), dblock(w, 0) if fin else zero
        hv = hmat(v)
        hw = hmat(w) if fin else zero
        starts += wt * eng.pi * ((g0v - g0w) @ ones) / prob
        scaled_time += wt * (piss0 - np.diag(dw0) + np.diag(dv0)) / prob
        jumps += wt * eng.t_off * (piss0[:, None] - dw0.T + dv0.T) / prob
        exits += wt * eng.t_exit * piss0 / prob
        log_theta += wt * float(eng.pi @ (hv - hw) @ ones) / prob
        ll += wt * math.log(prob)
    return starts, scaled_time, jumps, exits, None, log_theta, float(np.sum(wts)), ll


# ---------------------------------------------------------------------------
# quadrature route (any mixing family)


def _quad_exact_spectral(eng: _Engine, rule: QuadratureRule, masses, xs, wts):
    nodes = rule.nodes
    s = np.multiply.outer(xs, nodes)  # (n,J)
    es = np.exp(s[..., None] * eng.lam)  # (n,J,p)
    per = np.real((es * eng.pi_v) @ eng.v_t)  # (n,J): pi exp(theta T x) t
    m_val = (masses * nodes) * per  # (n,J)
    f = m_val.sum(axis=1)
    bad = np.flatnonzero(~(f > _UNDERFLOW_FLOOR))
    if bad.size:
        raise _underflow("exact", int(bad[0]))
    inv_f = wts / f
    node_masses = m_val.T @ inv_f  # posterior node masses
    coef = (masses * nodes)[None, :] * inv_f[:, None]  # (n,J)
    bk = np.real(np.einsum("ki,nji->njk", eng.v, es * eng.v_t))
    pie = np.real(np.einsum("nji,ik->njk", es * eng.pi_v, eng.vinv))
    starts = eng.pi * np.einsum("njk,nj->k", bk, coef)
    exits = eng.t_exit * np.einsum("njk,nj->k", pie, coef)
    dd = eng.dd_exp(s)  # (n,J,p,p)
    w_blk = eng.sandwich(dd * eng.g_t)
    scaled_time = np.einsum("njkk,nj->k", w_blk, coef)
    jumps = eng.t_off * np.einsum("njlk,nj->kl", w_blk, coef)
    ll = float(wts @ np.log(f))
    return starts, scaled_time, jumps, exits, node_masses, None, float(wts.sum()), ll


def _quad_exact_dense(eng: _Engine, rule: QuadratureRule, masses, xs, wts):
    p = eng.p
    tpi = np.outer(eng.t_exit, eng.pi)
    starts = np.zeros(p)
    scaled_time = np.zeros(p)
    jumps = np.zeros((p, p))
    exits = np.zeros(p)
    node_masses = np.zeros(rule.count)
    ll = 0.0
    for n, (x, wt) in enumerate(zip(xs, wts)):
        e_list = [matfun.expm(theta * eng.t_mat * x) for theta in rule.nodes]
        val = np.array(
            [
                theta * float(eng.pi @ e_mat @ eng.t_exit)
                for theta, e_mat in zip(rule.nodes, e_list)
            ]
        )
        f = float(masses @ val)
        if not f > _UNDERFLOW_FLOOR:
            raise _underflow("exact", n)
        node_masses += wt * masses * val / f
        for j, (theta, mass) in enumerate(zip(rule.nodes, masses)):
            if mass == 0.0:
                continue
            coef = wt * mass * theta / f
            e_mat = e_list[j]
            starts += coef * eng.pi * (e_mat @ eng.t_exit)
            exits += coef * eng.t_exit * (eng.pi @ e_mat)
            j_blk = matfun.vanloan_conv(theta * eng.t_mat, tpi, x)
            scaled_time += coef * theta * np.diag(j_blk)
            jumps += coef * theta * eng.t_off * j_blk.T
        ll += wt * math.log(f)
    return starts, scaled_time, jumps, exits, node_masses, None, float(np.sum(wts)), ll


def _quad_censored_spectral(eng: _Engine, rule: QuadratureRule, masses, vs, ws, wts):
    nodes = rule.nodes
    lam = eng.lam
    finite = np.isfinite(ws)
    ws_safe = np.where(finite, ws, 0.0)
    sv = np.multiply.outer(vs, nodes)  # (r,J)
    sw = np.multiply.outer(ws_safe, nodes)
    ev = np.exp(sv[..., None] * lam)  # (r,J,p)
    ew = np.exp(sw[..., None] * lam) * finite[:, None, None]
    surv_v = np.real((ev * eng.pi_v) @ eng.v_e)
    surv_w = np.real((ew * eng.pi_v) @ eng.v_e)
    prob = (surv_v - surv_w) @ masses
    bad = np.flatnonzero(~(prob > _UNDERFLOW_FLOOR))
    if bad.size:
        raise _underflow("censored", int(bad[0]))
    inv_p = wts / prob
    node_masses = ((surv_v - surv_w) * masses).T @ inv_p
    coef_b = masses[None, :] * inv_p[:, None]  # (r,J)
    coef_t = coef_b * nodes[None, :]
    bkv = np.real(np.einsum("ki,rji->rjk", eng.v, ev * eng.v_e))
    bkw = np.real(np.einsum("ki,rji->rjk", eng.v, ew * eng.v_e))
    starts = eng.pi * np.einsum("rjk,rj->k", bkv - bkw, coef_b)
    # S(theta; v, w) = int_v^w exp(theta T u) du, diagonal in the eigenbasis.
    theta_lam = nodes[:, None] * lam[None, :]  # (J,p)
    sint = (ew - ev) / theta_lam[None, :, :]
    pis = np.real(np.einsum("rji,ik->rjk", sint * eng.pi_v, eng.vinv))
    exits = eng.t_exit * np.einsum("rjk,rj->k", pis, coef_t)
    # sandwich values equal theta * D(theta; x) (coupling block is unscaled
    # e*pi), so the leading theta is already absorbed: weight by masses only.
    ddv = eng.dd_exp(sv)
    ddw = eng.dd_exp(sw) * finite[:, None, None, None]
    dv = eng.sandwich(ddv * eng.g_e)
    dw = eng.sandwich(ddw * eng.g_e)
    scaled_time = (
        np.einsum("rjk,rj->k", pis, coef_t)
        - np.einsum("rjkk,rj->k", dw, coef_b)
        + np.einsum("rjkk,rj->k", dv, coef_b)
    )
    jumps = eng.t_off * (
        np.einsum("rjk,rj->k", pis, coef_t)[:, None]
        - np.einsum("rjlk,rj->kl", dw, coef_b)
        + np.einsum("rjlk,rj->kl", dv, coef_b)
    )
    ll = float(wts @ np.log(prob))
    return starts, scaled_time, jumps, exits, node_masses, None, float(wts.sum()), ll


def _quad_censored_dense(eng: _Engine, rule: QuadratureRule, masses, vs, ws, wts):
    p = eng.p
    epi = np.outer(np.ones(p), eng.pi)
    ones = np.ones(p)
    starts = np.zeros(p)
    scaled_time = np.zeros(p)
    jumps = np.zeros((p, p))
    exits = np.zeros(p)
    node_masses = np.zeros(rule.count)
    ll = 0.0
    for r, (v, w, wt) in enumerate(zip(vs, ws, wts)):
        ev_list = [matfun.expm(theta * eng.t_mat * v) for theta in rule.nodes]
        ew_list = [
            matfun.expm(theta * eng.t_mat * w) if np.isfinite(w) else np.zeros((p, p))
            for theta in rule.nodes
        ]
        sdiff = np.array(
            [
                float(eng.pi @ (ev - ew) @ ones)
                for ev, ew in zip(ev_list, ew_list)
            ]
        )
        prob = float(masses @ sdiff)
        if not prob > _UNDERFLOW_FLOOR:
            raise _underflow("censored", r)
        node_masses += wt * masses * sdiff / prob
        for j, (theta, mass) in enumerate(zip(rule.nodes, masses)):
            if mass == 0.0:
                continue
            coef = wt * mass / prob
            ev, ew = ev_list[j], ew_list[j]
            starts += coef * eng.pi * ((ev - ew) @ ones)
            sint = matfun.exp_integral(eng.t_mat, theta, v, w)
            pis = eng.pi @ sint
            exits += coef * theta * eng.t_exit * pis
            dv = matfun.vanloan_conv(theta * eng.t_mat, epi, v)
            dw = (
                matfun.vanloan_conv(theta * eng.t_mat, epi, w)
                if np.isfinite(w)
                else np.zeros((p, p))
            )
            scaled_time += coef * theta * (pis - np.diag(dw) + np.diag(dv))
            jumps += coef * theta * eng.t_off * (pis[:, None] - dw.T + dv.T)
        ll += wt * math.log(prob)
    return starts, scaled_time, jumps, exits, node_masses, None, float(np.sum(wts)), ll


# ---------------------------------------------------------------------------
# E-step orchestration


def _chunk_ranges(n: int, size: int):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _run_chunks(task, ranges, threads: int):
    if threads <= 1 or len(ranges) <= 1:
        return [task(r) for r in ranges]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(task, ranges))


def _estep_pass(
    ph: PhaseType,
    family,
    rule: QuadratureRule | None,
    xs: np.ndarray,
    xw: np.ndarray,
    vs: np.ndarray,
    ws: np.ndarray,
    cw: np.ndarray,
    threads: int = 1,
):
    """One full E-step over exact and censored data; returns (EMStats, loglik)."""
    eng = _Engine(ph)
    gamma_route = isinstance(family, GammaMixing)
    if gamma_route:
        masses = None
        n_nodes = None
    else:
        if rule is None:
            rule = build_rule(family, 100)
        masses = (
            rule.masses
            if rule.degenerate
            else rule.weights * family.pdf(rule.nodes)
        )
        n_nodes = rule.count

    total = _zero_stats(ph.dim, n_nodes)
    ll = 0.0

    def pack(parts):
        return EMStats(
            starts=parts[0],
            scaled_time=parts[1],
            jumps=parts[2],
            exits=parts[3],
            count=parts[6],
            node_masses=parts[4],
            log_theta_sum=parts[5],
        ), parts[7]

    if xs.size:
        if gamma_route:
            fn = _gamma_exact_spectral if eng.ok else _gamma_exact_dense
            task = lambda r: pack(fn(eng, family.alpha, xs[r[0]:r[1]], xw[r[0]:r[1]]))
        else:
            fn = _quad_exact_spectral if eng.ok else _quad_exact_dense
            task = lambda r: pack(fn(eng, rule, masses, xs[r[0]:r[1]], xw[r[0]:r[1]]))
        for stats, part_ll in _run_chunks(task, _chunk_ranges(xs.size, _CHUNK_EXACT), threads):
            total = total.merged(stats)
            ll += part_ll
    if vs.size:
        if gamma_route:
            fn = _gamma_censored_spectral if eng.ok else _gamma_censored_dense
            task = lambda r: pack(
                fn(eng, family.alpha, vs[r[0]:r[1]], ws[r[0]:r[1]], cw[r[0]:r[1]])
            )
        else:
            fn = _quad_censored_spectral if eng.ok else _quad_censored_dense
            task = lambda r: pack(
                fn(eng, rule, masses, vs[r[0]:r[1]], ws[r[0]:r[1]], cw[r[0]:r[1]])
            )
        for stats, part_ll in _run_chunks(
            task, _chunk_ranges(vs.size, _CHUNK_CENSORED), threads
        ):
            total = total.merged(stats)
            ll += part_ll

    total.starts = np.maximum(total.starts, 0.0)
    total.scaled_time = np.maximum(total.scaled_time, 0.0)
    total.jumps = np.maximum(total.jumps, 0.0)
    total.exits = np.maximum(total.exits, 0.0)
    if total.node_masses is not None:
        total.node_masses = np.maximum(total.node_masses, 0.0)
    return total, ll


def _split_data(data):
    obs = list(data)
    if not obs:
        raise ValidationError("no observations")
    for o in obs:
        if not isinstance(o, Observation):
            raise ValidationError(f"expected Observation, got {type(o).__name__}")
    xs = np.array([o.lower for o in obs if o.is_exact], dtype=float)
    vs = np.array([o.lower for o in obs if not o.is_exact], dtype=float)
    ws = np.array([o.upper for o in obs if not o.is_exact], dtype=float)
    return xs, vs, ws


# ---------------------------------------------------------------------------
# public operations


def loglik(model: ScaledPhaseType, data) -> float:
    """Log-likelihood: exact points use log pdf, censored ones log interval mass.

    Returns -inf (with a warning naming the offending observations) when any
    observation has zero likelihood under the model.
    """
    obs = list(data)
    if not obs:
        raise ValidationError("no observations")
    terms = np.empty(len(obs))
    for i, o in enumerate(obs):
        if not isinstance(o, Observation):
            raise ValidationError(f"expected Observation, got {type(o).__name__}")
        if o.is_exact:
            val = model.pdf(o.lower)
        elif math.isinf(o.upper):
            val = model.survival(o.lower)
        else:
            val = model.cdf(o.upper) - model.cdf(o.lower)
        terms[i] = math.log(val) if val > 0 else -math.inf
    if np.any(np.isneginf(terms)):
        bad = np.flatnonzero(np.isneginf(terms))
        warnings.warn(
            f"zero likelihood at observations {bad.tolist()[:10]}"
            + ("..." if bad.size > 10 else ""),
            RuntimeWarning,
            stacklevel=2,
        )
        return -math.inf
    return float(terms.sum())


def estep(model: ScaledPhaseType, data, force_quadrature: bool = False) -> EMStats:
    """Expected complete-data statistics for exact observations."""
    xs, vs, ws = _split_data(data)
    if vs.size:
        raise ValidationError("estep handles exact observations; use estep_censored")
    family = model.mixing
    rule = None
    if force_quadrature and isinstance(family, GammaMixing):
        family = _GammaAsGeneric(family)
    if not isinstance(family, GammaMixing):
        rule = model.rule() if not force_quadrature else build_rule(family, 200)
    stats, _ = _estep_pass(
        model.ph, family, rule, xs, np.ones(xs.size), vs, ws, np.ones(0)
    )
    return stats


def estep_censored(model: ScaledPhaseType, data, force_quadrature: bool = False) -> EMStats:
    """Expected complete-data statistics for interval/right-censored observations."""
    xs, vs, ws = _split_data(data)
    if xs.size:
        raise ValidationError("estep_censored handles censored observations; use estep")
    family = model.mixing
    rule = None
    if force_quadrature and isinstance(family, GammaMixing):
        family = _GammaAsGeneric(family)
    if not isinstance(family, GammaMixing):
        rule = model.rule() if not force_quadrature else build_rule(family, 200)
    stats, _ = _estep_pass(
        model.ph, family, rule, xs, np.ones(0), vs, ws, np.ones(vs.size)
    )
    return stats


class _GammaAsGeneric:
    """Gamma family forced through the quadrature route (testing cross-check)."""

    tag = "gamma-quadrature"
    is_point_mass = False
    coverage_ok = True

    def __init__(self, gamma: GammaMixing):
        self._g = gamma
        self.alpha = gamma.alpha

    def pdf(self, theta):
        return self._g.pdf(theta)

    def quantile(self, q):
        return self._g.quantile(q)

    def refit(self, nodes, masses):
        return _GammaAsGeneric(self._g.refit(nodes, masses))


def mstep(
    stats: EMStats,
    ph: PhaseType,
    family,
    structure: str = "general",
    rule: QuadratureRule | None = None,
):
    """Maximization step: ratio updates for (pi, T), family-specific for alpha.

    States whose expected scaled occupation time falls below the occupancy
    floor keep their previous rates for this iteration.  Structurally zero
    entries stay zero.
    """
    p = ph.dim
    off_mask, exit_mask = structure_masks(structure, p)
    m = stats.count
    if not m > 0:
        raise EstimationError("empty statistics")
    pi_new = np.maximum(stats.starts, 0.0)
    pi_new = pi_new / pi_new.sum()
    t_new = np.array(ph.sub.matrix)
    frozen = stats.scaled_time <= _OCCUPANCY_FLOOR * max(1.0, m)
    exit_new = np.array(ph.sub.exit_rates)
    for k in range(p):
        if frozen[k]:
            continue
        row = np.zeros(p)
        row[off_mask[k]] = stats.jumps[k, off_mask[k]] / stats.scaled_time[k]
        exit_new[k] = (
            stats.exits[k] / stats.scaled_time[k] if exit_mask[k] else 0.0
        )
        row[k] = -(row.sum() + exit_new[k])
        t_new[k] = row
    try:
        sub_new = SubIntensity(t_new)
    except ValidationError as exc:
        raise EstimationError(f"M-step produced an invalid generator: {exc}") from exc
    ph_new = PhaseType(pi_new, sub_new)

    if stats.log_theta_sum is not None and isinstance(family, GammaMixing):
        target = stats.log_theta_sum / m
        fam_new = GammaMixing(digamma_inverse(target))
    elif stats.node_masses is not None:
        if rule is None:
            raise EstimationError("node-mass statistics require the quadrature rule")
        fam_new = family.refit(rule.nodes, stats.node_masses) if not rule.degenerate else family
    else:
        fam_new = family
    return ph_new, fam_new


def _fit_rule(family, n: int) -> QuadratureRule | None:
    """Quadrature rule held fixed for a whole fit (widened for stable mixing)."""
    if isinstance(family, GammaMixing):
        return None
    if isinstance(family, StableMixing):
        if family.is_point_mass:
            return build_rule(family, n)
        lo_a = max(0.05, family.alpha - 0.25)
        hi_a = min(0.999, family.alpha + 0.25)
        qlo = min(
            StableMixing(a, family.eta).quantile(1e-8) for a in (lo_a, family.alpha, hi_a)
        )
        qhi = max(
            StableMixing(a, family.eta).quantile(1.0 - 1e-8)
            for a in (lo_a, family.alpha, hi_a)
        )
        return rule_on_range(family, n, qlo, qhi)
    return build_rule(family, n)


def _em_loop(ph, family, rule, xs, xw, vs, ws, cw, config, structure):
    trace = []
    converged = False
    iterations = 0
    ll_prev = -math.inf
    for it in range(config.max_iter + 1):
        try:
            stats, ll = _estep_pass(
                ph, family, rule, xs, xw, vs, ws, cw, threads=config.threads
            )
        except NumericalUnderflow as exc:
            raise NumericalUnderflow(f"iteration {it}: {exc}") from exc
        trace.append(ll)
        if it > 0 and abs(ll - ll_prev) < config.tol:
            converged = True
            break
        if it == config.max_iter:
            break
        ll_prev = ll
        ph, family = mstep(stats, ph, family, structure=structure, rule=rule)
        iterations = it + 1
    return ph, family, np.array(trace), iterations, converged


def fit(data, config: EMConfig) -> FitReport:
    """Maximum-likelihood fit by EM from a random structured start.

    Exact and censored observations may be mixed; the printed update formulas
    are used for (pi, T) and the family-specific update for the scaling
    parameter.  Fixed seed and config give bit-identical results.
    """
    xs, vs, ws = _split_data(data)
    rng = np.random.default_rng(config.seed)
    ph = template(config.structure, config.dim, rng)
    family = config.make_family()
    rule = _fit_rule(family, config.nodes)
    ph, family, trace, iterations, converged = _em_loop(
        ph,
        family,
        rule,
        xs,
        np.ones(xs.size),
        vs,
        ws,
        np.ones(vs.size),
        config,
        config.structure,
    )
    coverage_ok = True
    if rule is not None and not rule.degenerate:
        coverage_ok = abs(float(rule.weights @ family.pdf(rule.nodes)) - 1.0) <= 1e-4
    model = ScaledPhaseType(ph, family, nodes=config.nodes)
    return FitReport(
        model=model,
        loglik_trace=trace,
        iterations=iterations,
        converged=converged,
        coverage_ok=coverage_ok,
    )


def fit_density(target_pdf, support, config: EMConfig, x_nodes: int = 256) -> FitReport:
    """Fit the model to a known density by weighted EM (cross-entropy ascent).

    Data sums are replaced by an outer quadrature over the target's support;
    the trace records sum of w_n h(x_n) log f_X(x_n), an estimate of
    int h log f_X.  The target must integrate to one within 1e-4.
    """
    wrapper = DensityMixing(target_pdf, support, mass_tol=1e-4)
    if not wrapper.coverage_ok:
        raise ValidationError("target density tail mass could not be resolved")
    xrule = build_rule(wrapper, x_nodes)
    xs = xrule.nodes
    xw = xrule.masses
    rng = np.random.default_rng(config.seed)
    ph = template(config.structure, config.dim, rng)
    family = config.make_family()
    rule = _fit_rule(family, config.nodes)
    ph, family, trace, iterations, converged = _em_loop(
        ph,
        family,
        rule,
        xs,
        xw,
        np.zeros(0),
        np.zeros(0),
        np.zeros(0),
        config,
        config.structure,
    )
    model = ScaledPhaseType(ph, family, nodes=config.nodes)
    return FitReport(
        model=model,
        loglik_trace=trace,
        iterations=iterations,
        converged=converged,
    )
