"""The scaled law X = Y / Theta: distribution functionals, sampling, quantiles.

Evaluation dispatches on the mixing family: Gamma mixing uses the closed
matrix-Pareto type II forms, positive-stable mixing the matrix-Weibull-type
closed forms, and generic densities a quadrature rule cached on the model.
A generic-quadrature path is also available for any family (used as a
cross-check oracle).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq

from . import matfun
from .errors import DomainError, EstimationError
from .mixing import DensityMixing, GammaMixing, QuadratureRule, StableMixing, build_rule
from .phasetype import PhaseType


class ScaledPhaseType:
    """CPH model: a PhaseType component divided by an independent scaling law.

    Immutable; all evaluators are pure.  The quadrature rule used by
    generic-path evaluations is built once per model and cached.
    """

    def __init__(self, ph: PhaseType, mixing, nodes: int = 100):
        self.ph = ph
        self.mixing = mixing
        self._nodes = int(nodes)
        self._rule_cache: QuadratureRule | None = None

    @property
    def dim(self) -> int:
        return self.ph.dim

    def rule(self) -> QuadratureRule:
        if self._rule_cache is None:
            self._rule_cache = build_rule(self.mixing, self._nodes)
        return self._rule_cache

    def _check_positive(self, x):
        arr = np.asarray(x, dtype=float)
        if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
            raise DomainError("argument must be positive and finite")
        return arr

    # -- closed-form fast paths -------------------------------------------

    def _gamma_eval(self, x, density: bool):
        alpha = self.mixing.alpha
        t_mat = self.ph.sub.matrix
        spec = self.ph._spectral()
        xs = np.atleast_1d(x)
        if spec.ok:
            base = 1.0 - np.multiply.outer(xs, spec.lam)
            if density:
                vals = alpha * np.real(base ** (-alpha - 1.0) * spec.pi_v @ spec.v_t)
            else:
                vals = np.real(base ** (-alpha) * spec.pi_v @ spec.v_e)
        else:
            eye = np.eye(self.dim)
            vals = np.empty(xs.size)
            for i, xx in enumerate(xs):
                power = matfun.matpow(eye - xx * t_mat, -(alpha + 1.0) if density else -alpha)
                if density:
                    vals[i] = alpha * np.real(
                        self.ph.pi @ power @ self.ph.sub.exit_rates
                    )
                else:
                    vals[i] = np.real(self.ph.pi @ power @ np.ones(self.dim))
        return vals

    def _stable_eval(self, x, density: bool):
        alpha, eta = self.mixing.alpha, self.mixing.eta
        t_mat = self.ph.sub.matrix
        spec = self.ph._spectral()
        xs = np.atleast_1d(x)
        if spec.ok:
            mu = (-spec.lam.astype(complex)) ** alpha
            expo = np.exp(-eta * np.multiply.outer(xs**alpha, mu))
            if density:
                front = eta * alpha * xs ** (alpha - 1.0)
                mu1 = (-spec.lam.astype(complex)) ** (alpha - 1.0)
                vals = front * np.real((expo * mu1) * spec.pi_v @ spec.v_t)
            else:
                vals = np.real(expo * spec.pi_v @ spec.v_e)
        else:
            vals = np.empty(xs.size)
            root = matfun.matpow(-t_mat, alpha)
            for i, xx in enumerate(xs):
                core = matfun.expm(-eta * xx**alpha * root)
                if density:
                    front = matfun.matpow(-t_mat * xx, alpha - 1.0)
                    vals[i] = eta * alpha * np.real(
                        self.ph.pi @ front @ core @ self.ph.sub.exit_rates
                    )
                else:
                    vals[i] = np.real(self.ph.pi @ core @ np.ones(self.dim))
        return vals

    def _quad_eval(self, x, density: bool):
        rule = self.rule()
        spec = self.ph._spectral()
        xs = np.atleast_1d(x)
        if spec.ok:
            s = np.multiply.outer(xs, rule.nodes)  # (N, J)
            ey = np.exp(s[..., None] * spec.lam)  # (N, J, p)
            if density:
                core = np.real((ey * spec.pi_v) @ spec.v_t)  # (N, J)
                vals = core @ (rule.masses * rule.nodes)
            else:
                core = np.real((ey * spec.pi_v) @ spec.v_e)
                vals = core @ rule.masses
        else:
            t_mat = self.ph.sub.matrix
            vals = np.zeros(xs.size)
            for i, xx in enumerate(xs):
                for theta, mass in zip(rule.nodes, rule.masses):
                    e_mat = matfun.expm(theta * t_mat * xx)
                    if density:
                        vals[i] += mass * theta * float(
                            self.ph.pi @ e_mat @ self.ph.sub.exit_rates
                        )
                    else:
                        vals[i] += mass * float(self.ph.pi @ e_mat.sum(axis=1))
        return vals

    # -- public functionals ------------------------------------------------

    def survival(self, x, force_quadrature: bool = False):
        """Tail probability P(X > x) = pi * L_Theta(-T x) * 1."""
        arr = self._check_positive(x)
        if force_quadrature or isinstance(self.mixing, DensityMixing):
            vals = self._quad_eval(arr, density=False)
        elif isinstance(self.mixing, GammaMixing):
            vals = self._gamma_eval(arr, density=False)
        elif isinstance(self.mixing, StableMixing):
            vals = self._stable_eval(arr, density=False)
        else:
            vals = self._quad_eval(arr, density=False)
        vals = np.clip(vals, 0.0, 1.0)
        return vals[()] if np.ndim(x) else float(vals[0])

    def cdf(self, x, force_quadrature: bool = False):
        """Distribution function 1 - pi * L_Theta(-T x) * 1."""
        return 1.0 - self.survival(x, force_quadrature=force_quadrature)

    def pdf(self, x, force_quadrature: bool = False):
        """Density -pi * L'_Theta(-T x) * t."""
        arr = self._check_positive(x)
        if force_quadrature or isinstance(self.mixing, DensityMixing):
            vals = self._quad_eval(arr, density=True)
        elif isinstance(self.mixing, GammaMixing):
            vals = self._gamma_eval(arr, density=True)
        elif isinstance(self.mixing, StableMixing):
            vals = self._stable_eval(arr, density=True)
        else:
            vals = self._quad_eval(arr, density=True)
        vals = np.maximum(vals, 0.0)
        return vals[()] if np.ndim(x) else float(vals[0])

    def laplace(self, s) -> float:
        """Laplace transform E[exp(-sX)] = pi * E[(s/Theta I - T)^(-1)] * t."""
        s_arr = self._check_positive(s)
        rule = self.rule()
        t_mat = self.ph.sub.matrix
        eye = np.eye(self.dim)
        out = np.zeros(np.atleast_1d(s_arr).shape)
        for i, sv in enumerate(np.atleast_1d(s_arr)):
            acc = 0.0
            for theta, mass in zip(rule.nodes, rule.masses):
                resolvent = np.linalg.solve((sv / theta) * eye - t_mat, self.ph.sub.exit_rates)
                acc += mass * float(self.ph.pi @ resolvent)
            out[i] = acc
        return out[()] if np.ndim(s) else float(out[0])

    def moment(self, nu: float) -> float:
        """E[X^nu] = E[Theta^-nu] * Gamma(nu+1) * pi * (-T)^(-nu) * 1.

        Returns math.inf when the inverse moment of the scaling law diverges.
        """
        nu = float(nu)
        if nu < 0:
            raise DomainError(f"moment order must be >= 0, got {nu}")
        if nu == 0:
            return 1.0
        inv = self.mixing.inverse_moment(nu, rule=self.rule() if not isinstance(self.mixing, GammaMixing) else None)
        if math.isinf(inv):
            return math.inf
        return inv * self.ph.moment(nu)

    def sample(self, rng: np.random.Generator, size=None):
        """Independent draws of Y and Theta combined as Y / Theta."""
        y = self.ph.sample(rng, size=size)
        theta = self.mixing.sample(rng, size=size)
        return y / theta

    def quantile(self, q: float) -> float:
        """Solve cdf(x) = q by bracket doubling plus Brent refinement."""
        q = float(q)
        if not 0.0 < q < 1.0:
            raise DomainError(f"quantile level must be in (0,1), got {q}")
        mean = self.moment(1.0)
        guess = mean if np.isfinite(mean) and mean > 0 else 1.0
        hi = guess
        for _ in range(400):
            if self.cdf(hi) >= q:
                break
            hi *= 2.0
        else:
            raise EstimationError(f"failed to bracket quantile {q} from above")
        lo = min(guess, hi) / 2.0
        for _ in range(400):
            if self.cdf(lo) <= q:
                break
            lo /= 2.0
        else:
            raise EstimationError(f"failed to bracket quantile {q} from below")
        x = brentq(lambda v: self.cdf(v) - q, lo, hi, xtol=1e-30, rtol=8.9e-16, maxiter=200)
        # Newton polish toward |cdf(x) - q| < 1e-10.
        for _ in range(3):
            err = self.cdf(x) - q
            if abs(err) < 1e-12:
                break
            slope = self.pdf(x)
            if slope <= 0:
                break
            x = max(x - err / slope, x * 0.5)
        return float(x)

    def __repr__(self):
        return f"ScaledPhaseType(dim={self.dim}, mixing={self.mixing!r})"
