"""Scaling-law families: densities, matrix Laplace transforms, samplers, rules.

Three families are supported for the scaling variable:

* ``GammaMixing(alpha)`` -- Gamma(alpha, 1); the rate is fixed to one because
  it is absorbed by the phase-type matrix and would not be identifiable.
* ``StableMixing(alpha, eta)`` -- positive stable law with Laplace transform
  exp(-eta * s**alpha), alpha in (0, 1]; alpha = 1 is the unit point mass
  scaled by eta.
* ``DensityMixing(pdf, support)`` -- arbitrary continuous density, evaluated
  through an adapted quadrature rule.

Families are immutable; samplers take explicit numpy Generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.stats
from scipy.optimize import bisect, brentq
from scipy.special import digamma, gammaln, logsumexp, polygamma

from . import matfun
from .errors import DomainError, EstimationError, ValidationError

_EULER = 0.5772156649015329
_ANGULAR_NODES = 200


@dataclass(frozen=True)
class QuadratureRule:
    """Positive nodes and weights adapted to a mixing density.

    ``masses`` holds weight * density(node); for a well-covered family these
    sum to one within 1e-6.  ``degenerate`` marks a single-point rule for a
    point-mass scaling law.
    """

    nodes: np.ndarray
    weights: np.ndarray
    masses: np.ndarray
    coverage_ok: bool = True
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "masses", np.asarray(self.masses, dtype=float))
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)
        self.masses.setflags(write=False)

    @property
    def count(self) -> int:
        return self.nodes.size


def _gauss_legendre(n: int, lo: float, hi: float):
    x, w = np.polynomial.legendre.leggauss(n)
    half = (hi - lo) / 2.0
    return lo + half * (x + 1.0), half * w


def build_rule(family, n: int = 100) -> QuadratureRule:
    """Log-transformed Gauss-Legendre rule over the family's central quantile range.

    Covers [q(1e-8), q(1-1e-8)]; the log transform handles both densities with
    a spike at the origin and heavy right tails.
    """
    if n < 8:
        raise ValidationError(f"need at least 8 nodes, got {n}")
    if getattr(family, "is_point_mass", False):
        return QuadratureRule(
            nodes=np.array([family.point_mass_location()]),
            weights=np.array([1.0]),
            masses=np.array([1.0]),
            degenerate=True,
        )
    qlo = family.quantile(1e-8)
    qhi = family.quantile(1.0 - 1e-8)
    if not (0 < qlo < qhi and np.isfinite(qlo) and np.isfinite(qhi)):
        raise EstimationError(
            f"could not resolve quantile range for quadrature: [{qlo}, {qhi}]"
        )
    return rule_on_range(family, n, qlo, qhi)


def rule_on_range(family, n: int, qlo: float, qhi: float) -> QuadratureRule:
    """Rule with explicitly chosen positive range (log-transformed nodes)."""
    u, uw = _gauss_legendre(n, math.log(qlo), math.log(qhi))
    nodes = np.exp(u)
    weights = uw * nodes
    masses = weights * family.pdf(nodes)
    coverage = abs(masses.sum() - 1.0) <= 1e-6 and getattr(family, "coverage_ok", True)
    return QuadratureRule(nodes, weights, masses, coverage_ok=bool(coverage))


def golden_max(g, lo: float, hi: float, tol: float = 1e-5) -> float:
    """Deterministic golden-section maximization of g on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    invphi2 = (3.0 - math.sqrt(5.0)) / 2.0
    a, b = float(lo), float(hi)
    h = b - a
    c, d = a + invphi2 * h, a + invphi * h
    yc, yd = g(c), g(d)
    while h > tol:
        if yc >= yd:
            b, d, yd = d, c, yc
            h = b - a
            c = a + invphi2 * h
            yc = g(c)
        else:
            a, c, yc = c, d, yd
            h = b - a
            d = a + invphi * h
            yd = g(d)
    return (a + b) / 2.0


def digamma_inverse(target: float) -> float:
    """Solve psi(a) = target by safeguarded Newton with a bisection fallback."""
    if not np.isfinite(target):
        raise EstimationError(f"digamma equation has non-finite target {target}")
    a = math.exp(target) + 0.5 if target >= -2.22 else -1.0 / (target + _EULER)
    a = max(a, 1e-12)
    for _ in range(100):
        step = (digamma(a) - target) / polygamma(1, a)
        a_new = a - step
        if a_new <= 0:
            a_new = a / 2.0
        if abs(a_new - a) <= 1e-12 * max(1.0, a_new):
            return float(a_new)
        a = a_new
    lo, hi = 1e-12, 1e12
    if digamma(lo) > target or digamma(hi) < target:
        raise EstimationError(f"digamma target {target} outside bracket")
    return float(bisect(lambda x: digamma(x) - target, lo, hi, xtol=1e-12))


def _check_theta(theta):
    th = np.asarray(theta, dtype=float)
    if np.any(th <= 0) or not np.all(np.isfinite(th)):
        raise DomainError("scaling value must be positive and finite")
    return th


class GammaMixing:
    """Gamma(alpha, 1) scaling; the CPH law is then matrix-Pareto type II."""

    tag = "gamma"
    is_point_mass = False
    coverage_ok = True

    def __init__(self, alpha: float):
        alpha = float(alpha)
        if not (alpha > 0 and np.isfinite(alpha)):
            raise ValidationError(f"Gamma shape must be positive, got {alpha}")
        self.alpha = alpha

    def log_pdf(self, theta):
        th = _check_theta(theta)
        return (self.alpha - 1.0) * np.log(th) - th - gammaln(self.alpha)

    def pdf(self, theta):
        return np.exp(self.log_pdf(theta))

    def laplace(self, s):
        return (1.0 + np.asarray(s, dtype=float)) ** (-self.alpha)

    def laplace_mat(self, m) -> np.ndarray:
        """L(M) = (I + M)^(-alpha) for spectra in the right half-plane."""
        m = matfun._as_square(m)
        return matfun.matpow(np.eye(len(m)) + m, -self.alpha)

    def laplace_deriv_mat(self, m) -> np.ndarray:
        """L'(M) = -alpha (I + M)^(-alpha-1)."""
        m = matfun._as_square(m)
        return -self.alpha * matfun.matpow(np.eye(len(m)) + m, -(self.alpha + 1.0))

    def quantile(self, q: float) -> float:
        return float(scipy.stats.gamma.ppf(q, self.alpha))

    def sample(self, rng: np.random.Generator, size=None):
        return rng.gamma(self.alpha, 1.0, size=size)

    def inverse_moment(self, nu: float, rule: QuadratureRule | None = None) -> float:
        """E[Theta^-nu] = Gamma(alpha-nu)/Gamma(alpha) for nu < alpha, else inf."""
        if nu >= self.alpha:
            return math.inf
        return math.exp(gammaln(self.alpha - nu) - gammaln(self.alpha))

    def refit(self, nodes, masses) -> "GammaMixing":
        """Weighted-likelihood update: solve psi(alpha) = weighted mean log theta."""
        nodes = np.asarray(nodes, dtype=float)
        masses = np.asarray(masses, dtype=float)
        total = masses.sum()
        if not (total > 0 and np.all(masses >= 0) and np.all(np.isfinite(masses))):
            raise EstimationError(
                "posterior node masses must be nonnegative, finite, not all zero"
            )
        new = GammaMixing(digamma_inverse(float(masses @ np.log(nodes)) / total))
        old_obj = float(masses @ self.log_pdf(nodes))
        new_obj = float(masses @ new.log_pdf(nodes))
        return new if new_obj >= old_obj else self

    def to_dict(self):
        return {"family": "gamma", "alpha": self.alpha}

    def __repr__(self):
        return f"GammaMixing(alpha={self.alpha:g})"


def _stable_log_a(phi, alpha: float):
    """log of the Zolotarev/Kanter angular function for the one-sided stable law."""
    r = alpha / (1.0 - alpha)
    return (
        r * np.log(np.sin(alpha * phi))
        + np.log(np.sin((1.0 - alpha) * phi))
        - (r + 1.0) * np.log(np.sin(phi))
    )


def _stable_logpdf_std(x, alpha: float, log_w: np.ndarray, log_a: np.ndarray):
    """Standard (eta=1) one-sided stable log-density via the angular integral."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    r = alpha / (1.0 - alpha)
    a_vals = np.exp(log_a)
    z = x**(-r)
    with np.errstate(over="ignore", invalid="ignore"):
        # terms[i, j] = log(w_i a(phi_i)) - a(phi_i) * z_j; overflow -> -inf.
        terms = (log_w + log_a)[:, None] - np.multiply.outer(a_vals, z)
    terms = np.where(np.isnan(terms), -np.inf, terms)
    log_int = logsumexp(terms, axis=0)
    return math.log(r) - (r + 1.0) * np.log(x) - math.log(math.pi) + log_int


class StableMixing:
    """Positive stable scaling with Laplace transform exp(-eta * s**alpha).

    The density uses Zolotarev's integral representation with 200-point
    Gauss-Legendre in the angular variable (assembled by logsumexp so extreme
    arguments degrade gracefully); the alpha = 1/2 closed form is the
    validation anchor.  alpha = 1 is the point mass at eta.  eta is a fixed
    evaluation-time scale, never estimated.
    """

    tag = "stable"
    coverage_ok = True

    def __init__(self, alpha: float, eta: float = 1.0):
        alpha = float(alpha)
        eta = float(eta)
        if not (0.0 < alpha <= 1.0):
            raise ValidationError(f"stable index must be in (0, 1], got {alpha}")
        if not (eta > 0 and np.isfinite(eta)):
            raise ValidationError(f"stable scale must be positive, got {eta}")
        self.alpha = alpha
        self.eta = eta
        if alpha < 1.0:
            phi, w = _gauss_legendre(_ANGULAR_NODES, 0.0, math.pi)
            self._log_w = np.log(w)
            self._log_a = _stable_log_a(phi, alpha)

    @property
    def is_point_mass(self) -> bool:
        return self.alpha == 1.0

    def point_mass_location(self) -> float:
        return self.eta

    @property
    def _scale(self) -> float:
        # Theta = eta**(1/alpha) * S with S the standard one-sided stable law.
        return self.eta ** (1.0 / self.alpha)

    def log_pdf(self, theta):
        th = _check_theta(theta)
        if self.is_point_mass:
            raise DomainError("Stable(1) is a point mass; it has no density")
        c = self._scale
        out = _stable_logpdf_std(th / c, self.alpha, self._log_w, self._log_a) - math.log(c)
        return out if np.ndim(th) else float(out[0])

    def pdf(self, theta):
        return np.exp(self.log_pdf(theta))

    def cdf(self, theta):
        th = np.atleast_1d(_check_theta(theta))
        if self.is_point_mass:
            out = np.where(th >= self.eta, 1.0, 0.0)
        else:
            x = th / self._scale
            r = self.alpha / (1.0 - self.alpha)
            a_vals = np.exp(self._log_a)
            w = np.exp(self._log_w)
            with np.errstate(over="ignore"):
                expo = np.exp(-np.multiply.outer(a_vals, x**(-r)))
            out = (w @ expo) / math.pi
        return out if np.ndim(theta) else float(out[0])

    def laplace(self, s):
        return np.exp(-self.eta * np.asarray(s, dtype=float) ** self.alpha)

    def laplace_mat(self, m) -> np.ndarray:
        """L(M) = exp(-eta * M^alpha)."""
        m = matfun._as_square(m)
        if self.alpha == 1.0:
            return matfun.expm(-self.eta * m)
        return matfun.expm(-self.eta * matfun.matpow(m, self.alpha))

    def laplace_deriv_mat(self, m) -> np.ndarray:
        """L'(M) = -eta*alpha * M^(alpha-1) exp(-eta * M^alpha)."""
        m = matfun._as_square(m)
        if self.alpha == 1.0:
            return -self.eta * matfun.expm(-self.eta * m)
        front = matfun.matpow(m, self.alpha - 1.0)
        return -self.eta * self.alpha * front @ self.laplace_mat(m)

    def quantile(self, q: float) -> float:
        if self.is_point_mass:
            return self.eta
        if not 0.0 < q < 1.0:
            raise DomainError(f"quantile level must be in (0,1), got {q}")
        target = float(q)
        lo, hi = math.log(self._scale), math.log(self._scale)
        while self.cdf(math.exp(lo)) > target and lo > -700:
            lo -= 2.0
        while self.cdf(math.exp(hi)) < target and hi < 700:
            hi += 2.0
        u = brentq(lambda v: self.cdf(math.exp(v)) - target, lo, hi, xtol=1e-12)
        return math.exp(u)

    def sample(self, rng: np.random.Generator, size=None):
        """Chambers-Mallows-Stuck / Kanter draw for the one-sided stable law."""
        if self.is_point_mass:
            return self.eta if size is None else np.full(int(size), self.eta)
        n = 1 if size is None else int(size)
        u = rng.uniform(0.0, math.pi, size=n)
        w = rng.exponential(1.0, size=n)
        log_s = ((1.0 - self.alpha) / self.alpha) * (
            _stable_log_a(u, self.alpha) - np.log(w)
        )
        out = np.exp(log_s) * self._scale
        return float(out[0]) if size is None else out

    def inverse_moment(self, nu: float, rule: QuadratureRule | None = None) -> float:
        """E[Theta^-nu] by quadrature (always finite for the stable family)."""
        rule = rule if rule is not None else build_rule(self, 200)
        return float(rule.masses @ rule.nodes ** (-float(nu)))

    def refit(self, nodes, masses) -> "StableMixing":
        """Golden-section update of alpha over (0, 1] on the weighted log-density."""
        nodes = np.asarray(nodes, dtype=float)
        masses = np.asarray(masses, dtype=float)
        if not (masses.sum() > 0 and np.all(masses >= 0) and np.all(np.isfinite(masses))):
            raise EstimationError(
                "posterior node masses must be nonnegative, finite, not all zero"
            )

        def objective(alpha: float) -> float:
            alpha = min(alpha, 1.0 - 1e-9)
            return float(masses @ StableMixing(alpha, self.eta).log_pdf(nodes))

        best = golden_max(objective, 0.01, 1.0, tol=1e-5)
        old_obj = objective(min(self.alpha, 1.0 - 1e-9))
        if objective(best) >= old_obj:
            return StableMixing(min(best, 1.0 - 1e-9), self.eta)
        return self

    def to_dict(self):
        return {"family": "stable", "alpha": self.alpha, "eta": self.eta}

    def __repr__(self):
        return f"StableMixing(alpha={self.alpha:g}, eta={self.eta:g})"


class DensityMixing:
    """Scaling law given by an arbitrary density handle on (lo, hi).

    The density is tabulated on a geometric grid for quantiles and sampling;
    matrix Laplace transforms go through an adapted quadrature rule.  The
    density must integrate to one within 1e-6 over its declared support.
    """

    tag = "density"
    is_point_mass = False

    def __init__(self, pdf, support=(0.0, math.inf), n_tab: int = 8000, mass_tol: float = 1e-6):
        lo, hi = float(support[0]), float(support[1])
        if lo < 0 or hi <= lo:
            raise ValidationError(f"support must satisfy 0 <= lo < hi, got ({lo}, {hi})")
        self._pdf = pdf
        self.support = (lo, hi)
        self.coverage_ok = True

        scale = self._probe_scale(lo, hi)
        eff_lo = lo if lo > 0 else scale * 1e-24
        eff_hi = hi
        if math.isinf(hi):
            eff_hi = scale * 10.0
            added = math.inf
            while added > 1e-10 and eff_hi < scale * 1e15:
                nxt = eff_hi * 2.0
                grid = np.geomspace(eff_hi, nxt, 64)
                added = float(np.trapezoid(self._eval(grid), grid))
                eff_hi = nxt
            if added > 1e-10:
                self.coverage_ok = False
        grid = np.geomspace(eff_lo, eff_hi, n_tab)
        vals = self._eval(grid)
        panel = 0.5 * (vals[1:] + vals[:-1]) * np.diff(grid)
        cum = np.concatenate([[0.0], np.cumsum(panel)])
        total = cum[-1]
        if abs(total - 1.0) > mass_tol:
            raise ValidationError(
                f"density must integrate to 1 over its support (got {total:.8f})"
            )
        self._grid = grid
        self._cum = cum
        self._rule_cache: QuadratureRule | None = None

    def _probe_scale(self, lo: float, hi: float) -> float:
        lo_probe = max(lo, 1e-12)
        hi_probe = hi if np.isfinite(hi) else 1e12
        probes = np.geomspace(lo_probe, hi_probe, 400)
        vals = self._eval(probes) * probes
        best = int(np.argmax(vals))
        return float(probes[best]) if vals[best] > 0 else 1.0

    def _eval(self, theta):
        out = np.asarray(self._pdf(np.asarray(theta, dtype=float)), dtype=float)
        if np.any(out < 0) or not np.all(np.isfinite(out)):
            raise ValidationError("density handle returned negative or non-finite values")
        return out

    def pdf(self, theta):
        th = _check_theta(theta)
        return self._eval(th)

    def log_pdf(self, theta):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(theta))

    def _rule(self) -> QuadratureRule:
        if self._rule_cache is None:
            self._rule_cache = build_rule(self, 128)
        return self._rule_cache

    def laplace(self, s):
        rule = self._rule()
        s = np.asarray(s, dtype=float)
        return np.exp(-np.multiply.outer(s, rule.nodes)) @ rule.masses

    def laplace_mat(self, m) -> np.ndarray:
        """L(M) = sum_j w_j f(theta_j) exp(-theta_j M)."""
        m = matfun._as_square(m)
        rule = self._rule()
        out = np.zeros_like(m, dtype=float)
        for theta, mass in zip(rule.nodes, rule.masses):
            out = out + mass * matfun.expm(-theta * m)
        return out

    def laplace_deriv_mat(self, m) -> np.ndarray:
        """L'(M) = -sum_j w_j theta_j f(theta_j) exp(-theta_j M)."""
        m = matfun._as_square(m)
        rule = self._rule()
        out = np.zeros_like(m, dtype=float)
        for theta, mass in zip(rule.nodes, rule.masses):
            out = out - mass * theta * matfun.expm(-theta * m)
        return out

    def quantile(self, q: float) -> float:
        if not 0.0 < q < 1.0:
            raise DomainError(f"quantile level must be in (0,1), got {q}")
        return float(np.interp(q, self._cum, self._grid))

    def sample(self, rng: np.random.Generator, size=None):
        """Inverse-CDF draw on the tabulated grid."""
        n = 1 if size is None else int(size)
        u = rng.random(n) * self._cum[-1]
        out = np.interp(u, self._cum, self._grid)
        return float(out[0]) if size is None else out

    def inverse_moment(self, nu: float, rule: QuadratureRule | None = None) -> float:
        nu = float(nu)
        lo = self.support[0]
        if lo == 0.0 and nu > 0:
            # Estimate the local density exponent near zero: f ~ theta**(a-1).
            t0 = self.quantile(1e-8)
            f0, f1 = self._eval(np.array([t0, 2.0 * t0]))
            if f0 > 0 and f1 > 0:
                a_loc = 1.0 + math.log(f1 / f0) / math.log(2.0)
                if nu >= a_loc - 0.05:
                    return math.inf
        rule = rule if rule is not None else self._rule()
        return float(rule.masses @ rule.nodes ** (-nu))

    def refit(self, nodes, masses) -> "DensityMixing":
        """No free parameters; the family is returned unchanged."""
        return self

    def to_dict(self):
        raise ValidationError("a generic density handle cannot be serialized")

    def __repr__(self):
        return f"DensityMixing(support={self.support})"


def family_from_dict(d: dict):
    """Rebuild a mixing family from its serialized form."""
    kind = d.get("family")
    if kind == "gamma":
        return GammaMixing(d["alpha"])
    if kind == "stable":
        return StableMixing(d["alpha"], d.get("eta", 1.0))
    raise ValidationError(f"unknown mixing family {kind!r}")
