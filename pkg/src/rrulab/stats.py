"""Derived statistics of an urn path.

Equal-mean regime (m1 == m2), with z the color-1 mass fraction and
sk2 = E[(U_k/m_k)^2]:

    sigma_tilde(z) = sqrt(z(1-z)) * sqrt((1-z)*s1^2 + z*s2^2)
    H(z)           = s1^2/z + s2^2/(1-z)
    h(z)           = sqrt(z(1-z)) * sqrt((1-z)(2 s1^2 - 1) + z(2 s2^2 - 1))
    A_k            = mean of (U/m_k - 1) over the draws of color k

Unequal-mean regime (m1 < m2, rho = m1/m2):

    psi   = y1 / y2^rho
    Q     = log(y1)/m1 - log(y2)/m2 = log(psi)/m1
    eta   = psi * m2^rho / m1
    s_piv = sigma1 * sqrt(m1 * psi) / m2^(rho/2)

The per-step log-ratio increment splits exactly as dQ = dQ1 + dQ2 with
f(x) = x - log(1+x):

    dQ1 = X1*(U1/m1)/y1 - X2*(U2/m2)/y2
    dQ2 = -X1*f(U1/y1)/m1 + X2*f(U2/y2)/m2

All functions are pure and accept numpy arrays where a float is shown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import Checkpoint, DrawRecord, UrnState


def sigma_tilde(z, s1sq: float, s2sq: float):
    return np.sqrt(z * (1.0 - z)) * np.sqrt((1.0 - z) * s1sq + z * s2sq)


def h_cap(z, s1sq: float, s2sq: float):
    return s1sq / z + s2sq / (1.0 - z)


def h_small(z, s1sq: float, s2sq: float):
    return np.sqrt(z * (1.0 - z)) * np.sqrt((1.0 - z) * (2.0 * s1sq - 1.0)
                                            + z * (2.0 * s2sq - 1.0))


def unequal_pivot_scale(psi, m1: float, m2: float, sigma1: float):
    rho = m1 / m2
    return sigma1 * np.sqrt(m1 * psi) / m2 ** (rho / 2.0)


@dataclass(frozen=True, slots=True)
class EqualMeanStats:
    z: float
    sigma_tilde: float
    h_cap: float
    h_small: float
    a1: float
    a2: float
    degenerate: bool = False


@dataclass(frozen=True, slots=True)
class UnequalMeanStats:
    rho: float
    psi: float
    q: float
    eta_hat: float
    pivot_scale: float


def equal_mean_stats(state: UrnState, laws) -> EqualMeanStats:
    law1, law2 = laws
    if law1.mean != law2.mean:
        raise ValueError("equal-mean statistics require m1 == m2")
    z = state.y1 / (state.y1 + state.y2)
    a1 = state.sum_u1_centered / state.n1 if state.n1 else 0.0
    a2 = state.sum_u2_centered / state.n2 if state.n2 else 0.0
    if not 0.0 < z < 1.0:
        return EqualMeanStats(z, math.nan, math.nan, math.nan, a1, a2, degenerate=True)
    return EqualMeanStats(
        z,
        float(sigma_tilde(z, law1.sigma2, law2.sigma2)),
        float(h_cap(z, law1.sigma2, law2.sigma2)),
        float(h_small(z, law1.sigma2, law2.sigma2)),
        a1, a2,
    )


def unequal_mean_stats(state: UrnState, laws) -> UnequalMeanStats:
    law1, law2 = laws
    m1, m2 = law1.mean, law2.mean
    if not m1 < m2:
        raise ValueError("unequal-mean statistics require m1 < m2")
    rho = m1 / m2
    psi = state.y1 / state.y2 ** rho
    q = math.log(state.y1) / m1 - math.log(state.y2) / m2
    eta_hat = psi * m2 ** rho / m1
    return UnequalMeanStats(
        rho, psi, q, eta_hat,
        float(unequal_pivot_scale(psi, m1, m2, math.sqrt(law1.sigma2))),
    )


def checkpoint_stats(state: UrnState, laws) -> Checkpoint:
    """All trajectory checkpoint fields, regime-agnostic."""
    law1, law2 = laws
    m1, m2 = law1.mean, law2.mean
    rho = m1 / m2
    z = state.y1 / (state.y1 + state.y2)
    a1 = state.sum_u1_centered / state.n1 if state.n1 else 0.0
    a2 = state.sum_u2_centered / state.n2 if state.n2 else 0.0
    return Checkpoint(
        n=state.n,
        z=z,
        psi=state.y1 / state.y2 ** rho,
        q=math.log(state.y1) / m1 - math.log(state.y2) / m2,
        sigma_tilde=float(sigma_tilde(z, law1.sigma2, law2.sigma2)),
        h_cap=float(h_cap(z, law1.sigma2, law2.sigma2)),
        n1=state.n1,
        n2=state.n2,
        a1=a1,
        a2=a2,
    )


def f_log_remainder(x):
    """f(x) = x - log(1+x); 0 <= f(x) <= x^2 for x >= 0."""
    return x - np.log1p(x)


def q_decomposition(record: DrawRecord, prior: UrnState, laws) -> tuple[float, float]:
    """Split of the per-step log-ratio increment into martingale + remainder parts.

    Returns (dq1, dq2); dq1 + dq2 equals Q_after - Q_before exactly in real
    arithmetic (to rounding in floats).
    """
    law1, law2 = laws
    u = record.reinforcement
    if record.color == 1:
        x = u / prior.y1
        dq1 = (u / law1.mean) / prior.y1
        dq2 = -f_log_remainder(x) / law1.mean
    else:
        x = u / prior.y2
        dq1 = -(u / law2.mean) / prior.y2
        dq2 = f_log_remainder(x) / law2.mean
    return float(dq1), float(dq2)


def bridge_max_statistic(z_prefix: np.ndarray, sigma_tilde_n: float,
                         two_sided: bool = False) -> float:
    """max over l <= n of l*(Z_l - Z_n) / (sigma_tilde_n * sqrt(n)).

    z_prefix holds Z_1..Z_n (the l = 0 term vanishes).  The l = n term is
    zero, so the one-sided statistic is always >= 0.
    """
    n = len(z_prefix)
    if n < 1:
        raise ValueError("need a non-empty path prefix")
    if not sigma_tilde_n > 0.0 or not math.isfinite(sigma_tilde_n):
        raise ValueError("degenerate normalizer sigma_tilde")
    l = np.arange(1, n + 1, dtype=np.float64)
    dev = l * (z_prefix - z_prefix[-1])
    norm = sigma_tilde_n * math.sqrt(n)
    if two_sided:
        return float(np.max(np.abs(dev)) / norm)
    return float(np.max(dev) / norm)


def bridge_max_statistic_unequal(psi_prefix: np.ndarray, rho: float, sigma1: float,
                                 n1_at_n: float, two_sided: bool = False) -> float:
    """max over l <= n of l^rho*(psi_l - psi_n) / (sigma1 * sqrt(N_n1))."""
    n = len(psi_prefix)
    if n < 1:
        raise ValueError("need a non-empty path prefix")
    if not n1_at_n > 0:
        raise ValueError("no color-1 draws; normalizer degenerate")
    l = np.arange(1, n + 1, dtype=np.float64)
    dev = l ** rho * (psi_prefix - psi_prefix[-1])
    norm = sigma1 * math.sqrt(n1_at_n)
    if two_sided:
        return float(np.max(np.abs(dev)) / norm)
    return float(np.max(dev) / norm)


def lil_normalized(z_n, n, z_limit_proxy):
    """sqrt(n)*(Z_n - z_inf) / sqrt(2 log log n); requires n >= 16."""
    n_arr = np.asarray(n, dtype=np.float64)
    if np.any(n_arr < 16):
        raise ValueError("law-of-iterated-logarithm scaling needs n >= 16")
    return np.sqrt(n_arr) * (np.asarray(z_n) - np.asarray(z_limit_proxy)) \
        / np.sqrt(2.0 * np.log(np.log(n_arr)))
