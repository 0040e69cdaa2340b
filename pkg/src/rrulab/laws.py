"""Reinforcement laws: the distribution of added ball mass per draw.

A law is a nonnegative distribution with declared mean m > 0, normalized
second moment sigma2 = E[(U/m)^2] >= 1, and a declared moment order p >= 2
used to validate test hypotheses.  Supported kinds:

    constant(alpha)                    point mass
    two_point(low, high, p_low)        two atoms
    uniform_discrete(values, weights)  finite support
    scaled_beta(alpha, beta, scale)    scale * Beta(alpha, beta)
    lognormal(mu_log, sigma_log)       exp(N(mu_log, sigma_log^2))

Sampling is by inverse cdf of a [0,1) uniform so that every consumer
(scalar engine, vectorized kernels) draws identical values from identical
uniforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaincinv, ndtri

_REL_TOL = 1e-12
_U_MAX = 1.0 - 2.0**-53

FINITE_KINDS = ("constant", "two_point", "uniform_discrete")
CONTINUOUS_KINDS = ("scaled_beta", "lognormal")


class LawError(ValueError):
    """Invalid reinforcement-law specification."""


@dataclass(frozen=True)
class ReinforcementLaw:
    kind: str
    params: tuple
    mean: float
    sigma2: float
    moment_order: float = math.inf
    # Finite-support kinds only; atoms sorted ascending, probs > 0.
    values: np.ndarray | None = field(default=None, repr=False)
    probs: np.ndarray | None = field(default=None, repr=False)
    cum_probs: np.ndarray | None = field(default=None, repr=False)

    @property
    def finite_support(self) -> bool:
        return self.values is not None

    @property
    def is_point_mass(self) -> bool:
        return self.finite_support and len(self.values) == 1

    def has_moment(self, order: float) -> bool:
        # Every supported kind has all polynomial moments finite.
        return order > 0

    def second_moment(self) -> float:
        """E[U^2] (not normalized)."""
        return self.sigma2 * self.mean * self.mean

    def quantile(self, u):
        """Inverse cdf; accepts scalars or arrays of uniforms in [0, 1)."""
        if self.kind == "constant":
            return np.full_like(np.asarray(u, dtype=np.float64), self.params[0]) \
                if np.ndim(u) else self.params[0]
        if self.finite_support:
            idx = np.searchsorted(self.cum_probs, u, side="right")
            idx = np.minimum(idx, len(self.values) - 1)
            return self.values[idx]
        if self.kind == "scaled_beta":
            a, b, scale = self.params
            return scale * betaincinv(a, b, np.minimum(u, _U_MAX))
        if self.kind == "lognormal":
            mu, sig = self.params
            return np.exp(mu + sig * ndtri(np.minimum(u, _U_MAX)))
        raise LawError(f"unknown kind {self.kind!r}")

    def kernel_atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Atoms plus guarded cumulative probs (> 1 sentinel) for step kernels."""
        if not self.finite_support:
            raise LawError(f"{self.kind} has no finite atom table")
        cums = self.cum_probs.copy()
        cums[-1] = 2.0
        return self.values.copy(), cums


def _check_declared(name: str, declared, analytic: float) -> None:
    if declared is None:
        return
    if abs(declared - analytic) > _REL_TOL * max(abs(analytic), 1.0):
        raise LawError(
            f"declared {name}={declared!r} does not match analytic value "
            f"{analytic!r} of the law kind"
        )


def _check_common(mean: float, sigma2: float, moment_order: float) -> None:
    if not (mean > 0.0) or not math.isfinite(mean):
        raise LawError(f"law mean must be positive and finite, got {mean}")
    if sigma2 < 1.0 - _REL_TOL:
        raise LawError(f"sigma2 = E[(U/m)^2] must be >= 1, got {sigma2}")
    if moment_order < 2.0:
        raise LawError(f"moment order must be >= 2, got {moment_order}")


def _finite(kind, params, values, probs, moment_order, declared_mean, declared_sigma2):
    values = np.asarray(values, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if values.ndim != 1 or values.shape != probs.shape or len(values) == 0:
        raise LawError("values and weights must be equal-length 1-d sequences")
    if np.any(values < 0.0) or not np.all(np.isfinite(values)):
        raise LawError("support points must be finite and >= 0")
    if np.any(probs <= 0.0):
        raise LawError("weights must be positive")
    total = probs.sum()
    if abs(total - 1.0) > 1e-9:
        raise LawError(f"weights must sum to 1 (got {total})")
    probs = probs / total
    order = np.argsort(values, kind="stable")
    values, probs = values[order], probs[order]
    # Merge duplicate atoms.
    keep_v, keep_p = [values[0]], [probs[0]]
    for v, p in zip(values[1:], probs[1:]):
        if v == keep_v[-1]:
            keep_p[-1] += p
        else:
            keep_v.append(v)
            keep_p.append(p)
    values = np.array(keep_v)
    probs = np.array(keep_p)
    mean = float(np.dot(probs, values))
    second = float(np.dot(probs, values * values))
    _check_common(mean, second / mean**2 if mean else math.inf, moment_order)
    sigma2 = second / (mean * mean)
    if len(values) > 1 and sigma2 <= 1.0 + 1e-15:
        raise LawError("sigma2 == 1 implies a point mass; atom table is inconsistent")
    _check_declared("mean", declared_mean, mean)
    _check_declared("sigma2", declared_sigma2, sigma2)
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    return ReinforcementLaw(kind, params, mean, sigma2, moment_order,
                            values=values, probs=probs, cum_probs=cum)


def constant(alpha: float, *, moment_order: float = math.inf,
             mean: float | None = None, sigma2: float | None = None) -> ReinforcementLaw:
    if not (alpha > 0.0) or not math.isfinite(alpha):
        raise LawError(f"constant reinforcement must be positive, got {alpha}")
    _check_declared("mean", mean, alpha)
    _check_declared("sigma2", sigma2, 1.0)
    return _finite("constant", (float(alpha),), [alpha], [1.0], moment_order, None, None)


def two_point(low: float, high: float, p_low: float, *, moment_order: float = math.inf,
              mean: float | None = None, sigma2: float | None = None) -> ReinforcementLaw:
    if not (0.0 < p_low < 1.0):
        raise LawError(f"p_low must be in (0, 1), got {p_low}")
    if low == high:
        raise LawError("two_point atoms must differ (use constant)")
    return _finite("two_point", (float(low), float(high), float(p_low)),
                   [low, high], [p_low, 1.0 - p_low], moment_order, mean, sigma2)


def uniform_discrete(values, weights=None, *, moment_order: float = math.inf,
                     mean: float | None = None, sigma2: float | None = None) -> ReinforcementLaw:
    values = list(values)
    if weights is None:
        weights = [1.0 / len(values)] * len(values)
    return _finite("uniform_discrete", (tuple(float(v) for v in values),
                                        tuple(float(w) for w in weights)),
                   values, weights, moment_order, mean, sigma2)


def scaled_beta(alpha: float, beta: float, scale: float, *, moment_order: float = math.inf,
                mean: float | None = None, sigma2: float | None = None) -> ReinforcementLaw:
    if alpha <= 0 or beta <= 0 or scale <= 0:
        raise LawError("scaled_beta requires alpha, beta, scale > 0")
    m = scale * alpha / (alpha + beta)
    second = scale * scale * alpha * (alpha + 1.0) / ((alpha + beta) * (alpha + beta + 1.0))
    s2 = second / (m * m)
    _check_common(m, s2, moment_order)
    _check_declared("mean", mean, m)
    _check_declared("sigma2", sigma2, s2)
    return ReinforcementLaw("scaled_beta", (float(alpha), float(beta), float(scale)), m, s2,
                            moment_order)


def lognormal(mu_log: float, sigma_log: float, *, moment_order: float = math.inf,
              mean: float | None = None, sigma2: float | None = None) -> ReinforcementLaw:
    if sigma_log <= 0:
        raise LawError("lognormal requires sigma_log > 0")
    m = math.exp(mu_log + 0.5 * sigma_log**2)
    s2 = math.exp(sigma_log**2)
    _check_common(m, s2, moment_order)
    _check_declared("mean", mean, m)
    _check_declared("sigma2", sigma2, s2)
    return ReinforcementLaw("lognormal", (float(mu_log), float(sigma_log)), m, s2, moment_order)


_FACTORIES = {
    "constant": constant,
    "two_point": two_point,
    "uniform_discrete": uniform_discrete,
    "scaled_beta": scaled_beta,
    "lognormal": lognormal,
}


def from_spec(kind: str, **kwargs) -> ReinforcementLaw:
    """Build a law from config-style keyword parameters."""
    try:
        factory = _FACTORIES[kind]
    except KeyError:
        raise LawError(f"unknown law kind {kind!r}; expected one of {sorted(_FACTORIES)}")
    return factory(**kwargs)
