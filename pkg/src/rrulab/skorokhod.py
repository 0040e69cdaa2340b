"""Brownian embedding of centered finite-support martingale increments.

A mean-zero finite law F is realized as Brownian motion stopped at the exit
of a random interval: draw an opposite-sign atom pair (u, v), u < 0 < v,
from the measure proportional to (v-u) F(du) F(dv) (a zero atom stops
immediately), then stop at the first exit of [u, v].  The exit lands on v
with probability |u|/(v + |u|), so atom frequencies are exact by
construction and the stopped value has law F with E[tau] = E[X^2].

The exit side is drawn analytically first; the stopping time tau is then
sampled by simulating the path at step dt = min(|u|, v)^2 / DT_DIVISOR with
a Brownian-bridge crossing check per step (removing the O(sqrt(dt))
undershoot bias) and rejecting paths that exit on the wrong side.

Coupled to an urn run, the realized increment fixes the exit side and the
partner atom is drawn from the exact conditional (weight |x| F(x) on the
opposite sign, independent of which atom was realized), which reproduces
the joint law of increments and stopping times while B(T_k) tracks the urn
martingale pathwise.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import engine, streams
from .laws import ReinforcementLaw

_GAMMA = np.uint64(streams.GAMMA)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

DT_DIVISOR = 400.0
_MEAN_TOL = 1e-12
_TWO_PI = 2.0 * math.pi
# Bridge crossing probability below exp(-24) is treated as zero.
_BRIDGE_CUT = 12.0


class EmbeddingError(ValueError):
    """Invalid law or increment stream for embedding."""


@dataclass(frozen=True)
class CenteredFiniteLaw:
    """Mean-zero finite-support law (atoms sorted, merged, recentered)."""
    values: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_atoms(cls, values, probs) -> "CenteredFiniteLaw":
        values = np.asarray(values, dtype=np.float64) + 0.0  # normalize -0.0
        probs = np.asarray(probs, dtype=np.float64)
        if values.ndim != 1 or values.shape != probs.shape or len(values) == 0:
            raise EmbeddingError("atoms must be equal-length 1-d sequences")
        if np.any(probs < 0.0) or not np.all(np.isfinite(values)):
            raise EmbeddingError("atom probabilities must be >= 0 and values finite")
        keep = probs > 0.0
        values, probs = values[keep], probs[keep]
        if len(values) == 0:
            raise EmbeddingError("law has no mass")
        total = probs.sum()
        if abs(total - 1.0) > _MEAN_TOL * max(1.0, abs(total)):
            raise EmbeddingError(f"atom probabilities sum to {total}, not 1")
        probs = probs / total
        order = np.argsort(values, kind="stable")
        values, probs = values[order], probs[order]
        merged_v, merged_p = [values[0]], [probs[0]]
        for v, p in zip(values[1:], probs[1:]):
            if v == merged_v[-1]:
                merged_p[-1] += p
            else:
                merged_v.append(v)
                merged_p.append(p)
        values = np.array(merged_v)
        probs = np.array(merged_p)
        mean = float(np.dot(values, probs))
        scale = float(np.max(np.abs(values))) or 1.0
        if abs(mean) > _MEAN_TOL * scale:
            raise EmbeddingError(f"law mean {mean} exceeds recentering tolerance")
        if abs(mean) > 0.0:
            values = values - mean
        has_neg = bool(np.any(values < 0.0))
        has_pos = bool(np.any(values > 0.0))
        if has_neg != has_pos:
            raise EmbeddingError("centered law needs atoms of both signs (or only zero)")
        return cls(values, probs)

    @property
    def is_zero(self) -> bool:
        return len(self.values) == 1 and self.values[0] == 0.0

    @property
    def second_moment(self) -> float:
        return float(np.dot(self.values * self.values, self.probs))

    def zero_mass(self) -> float:
        at_zero = self.values == 0.0
        return float(self.probs[at_zero].sum())


@dataclass(frozen=True, slots=True)
class EmbeddingResult:
    value: float
    tau: float
    dt: float


# ---------------------------------------------------------------------------
# Exit-time path simulation (numba).
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _u01(key, j):
    x = key + np.uint64(j + 1) * _GAMMA
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)) * 1.1102230246251565e-16


@njit(cache=True)
def _exit_times(lo, hi, side, dt, key, ctr0):
    """Exit times of Brownian paths from [lo_i, hi_i] conditioned on the side.

    side[i] is +1 for exit at hi, -1 for exit at lo; mismatched paths are
    rejected and resimulated.  Returns (taus, final stream counter).
    """
    n = lo.shape[0]
    taus = np.empty(n)
    ctr = ctr0
    have_spare = False
    spare = 0.0
    for i in range(n):
        u = lo[i]
        v = hi[i]
        want = side[i]
        h = dt[i]
        sdt = math.sqrt(h)
        while True:
            x = 0.0
            t = 0.0
            exited = 0
            while exited == 0:
                if have_spare:
                    z = spare
                    have_spare = False
                else:
                    u1 = _u01(key, ctr)
                    ctr += 1
                    u2 = _u01(key, ctr)
                    ctr += 1
                    if u1 <= 0.0:
                        u1 = 1.1102230246251565e-16
                    r = math.sqrt(-2.0 * math.log(u1))
                    z = r * math.cos(_TWO_PI * u2)
                    spare = r * math.sin(_TWO_PI * u2)
                    have_spare = True
                xn = x + sdt * z
                t += h
                if xn >= v:
                    exited = 1
                elif xn <= u:
                    exited = -1
                else:
                    du = (v - x) * (v - xn)
                    if du <= _BRIDGE_CUT * h:
                        ub = _u01(key, ctr)
                        ctr += 1
                        if ub < math.exp(-2.0 * du / h):
                            exited = 1
                    if exited == 0:
                        dl = (x - u) * (xn - u)
                        if dl <= _BRIDGE_CUT * h:
                            ub = _u01(key, ctr)
                            ctr += 1
                            if ub < math.exp(-2.0 * dl / h):
                                exited = -1
                x = xn
            if exited == want:
                taus[i] = t
                break
    return taus, ctr


def _conditioned_taus(lo, hi, side, seed, replicate, ctr0=0):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo >= 0.0) or np.any(hi <= 0.0):
        raise EmbeddingError("exit pairs must satisfy lo < 0 < hi")
    dt = np.minimum(-lo, hi) ** 2 / DT_DIVISOR
    key = np.uint64(streams.stream_key(seed, replicate, streams.ROLE_EMBED))
    taus, ctr = _exit_times(lo, hi, np.asarray(side, dtype=np.int64), dt,
                            key, int(ctr0))
    return taus, dt, ctr


# ---------------------------------------------------------------------------
# Pair / side / partner sampling.
# ---------------------------------------------------------------------------

def _signed_parts(law: CenteredFiniteLaw):
    neg = law.values < 0.0
    pos = law.values > 0.0
    return (law.values[neg], law.probs[neg]), (law.values[pos], law.probs[pos])


def sample_pair_and_side(law: CenteredFiniteLaw, uniforms) -> tuple[float, float, int]:
    """Draw (lo, hi, side) from the exit-pair measure; consumes 4 uniforms.

    Mixture form of the pair weights (v-u) a_u b_v: with probability
    A/(A+B) draw u ~ a/A and v ~ v b/theta, else u ~ |u| a/theta and
    v ~ b/B, where A, B are the total negative/positive masses and theta
    the common one-sided absolute mean.
    """
    (nv, npr), (pv, ppr) = _signed_parts(law)
    a_tot = npr.sum()
    b_tot = ppr.sum()
    theta = float(np.dot(pv, ppr))
    u0, u1, u2, u3 = uniforms
    if u0 < a_tot / (a_tot + b_tot):
        lo = nv[min(np.searchsorted(np.cumsum(npr / a_tot), u1, side="right"),
                    len(nv) - 1)]
        w = pv * ppr / theta
        hi = pv[min(np.searchsorted(np.cumsum(w), u2, side="right"), len(pv) - 1)]
    else:
        w = -nv * npr / theta
        lo = nv[min(np.searchsorted(np.cumsum(w), u1, side="right"), len(nv) - 1)]
        hi = pv[min(np.searchsorted(np.cumsum(ppr / b_tot), u2, side="right"),
                    len(pv) - 1)]
    side = 1 if u3 < (-lo) / (hi - lo) else -1
    return float(lo), float(hi), side


def partner_for(law: CenteredFiniteLaw, value: float, uniform: float) -> float:
    """Opposite-sign partner of a realized atom, weighted |x| * p(x)."""
    (nv, npr), (pv, ppr) = _signed_parts(law)
    if value > 0.0:
        vals, w = nv, -nv * npr
    elif value < 0.0:
        vals, w = pv, pv * ppr
    else:
        raise EmbeddingError("zero increments stop immediately; no partner")
    if len(vals) == 0:
        raise EmbeddingError("no opposite-sign atoms; law is not centered")
    cum = np.cumsum(w / w.sum())
    return float(vals[min(np.searchsorted(cum, uniform, side="right"), len(vals) - 1)])


def embed_many(law: CenteredFiniteLaw, count: int, seed: int = 0,
               replicate: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """count independent embeddings of one law: (values, taus, dts)."""
    if law.is_zero:
        z = np.zeros(count)
        return z, z.copy(), z.copy()
    key = streams.stream_key(seed, replicate, streams.ROLE_EMBED)
    c = law.zero_mass()
    u = streams.uniform_block(np.uint64(key), 0, 5 * count).reshape(count, 5)
    ctr = 5 * count
    hit_zero = u[:, 0] < c  # immediate stop at the zero atom
    values = np.zeros(count)
    taus = np.zeros(count)
    dts = np.zeros(count)
    idx = np.nonzero(~hit_zero)[0]
    if len(idx):
        stripped = CenteredFiniteLaw.from_atoms(*_strip_zero(law))
        lo = np.empty(len(idx))
        hi = np.empty(len(idx))
        side = np.empty(len(idx), dtype=np.int64)
        for k, i in enumerate(idx):
            lo[k], hi[k], side[k] = sample_pair_and_side(stripped, u[i, 1:5])
        t, dt, _ = _conditioned_taus(lo, hi, side, seed, replicate, ctr0=ctr)
        values[idx] = np.where(side > 0, hi, lo)
        taus[idx] = t
        dts[idx] = dt
    return values, taus, dts


def _strip_zero(law: CenteredFiniteLaw):
    keep = law.values != 0.0
    p = law.probs[keep]
    return law.values[keep], p / p.sum()


def embed_increment(law: CenteredFiniteLaw, seed: int = 0,
                    replicate: int = 0) -> EmbeddingResult:
    """Embed a single draw of the law into a Brownian exit."""
    values, taus, dts = embed_many(law, 1, seed, replicate)
    return EmbeddingResult(float(values[0]), float(taus[0]), float(dts[0]))


def embed_sequence(increments, seed: int = 0, replicate: int = 0
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Embed a martingale increment stream: returns (B(T_k), T_k).

    increments yields (law, realized_value) pairs; realized_value None means
    the stopped value is sampled from the law itself (synthetic streams).
    With realized values from an urn run, B(T_k) equals the urn martingale
    exactly.
    """
    items = list(increments)
    key = streams.stream_key(seed, replicate, streams.ROLE_EMBED)
    ctr = 0
    values = np.zeros(len(items))
    lo_l, hi_l, side_l, pos_l = [], [], [], []
    for i, (law, realized) in enumerate(items):
        if realized is None:
            if law.is_zero:
                continue
            u = streams.uniform_block(np.uint64(key), ctr, 5)
            ctr += 5
            if u[0] < law.zero_mass():
                continue
            stripped = CenteredFiniteLaw.from_atoms(*_strip_zero(law))
            lo, hi, side = sample_pair_and_side(stripped, u[1:5])
            values[i] = hi if side > 0 else lo
        else:
            w = float(realized)
            values[i] = w
            if w == 0.0:
                continue
            u = streams.uniform_block(np.uint64(key), ctr, 1)
            ctr += 1
            partner = partner_for(law, w, float(u[0]))
            lo, hi = (partner, w) if w > 0 else (w, partner)
            side = 1 if w > 0 else -1
        lo_l.append(lo)
        hi_l.append(hi)
        side_l.append(side)
        pos_l.append(i)
    taus = np.zeros(len(items))
    if pos_l:
        t, _, _ = _conditioned_taus(np.array(lo_l), np.array(hi_l),
                                    np.array(side_l), seed, replicate, ctr0=ctr)
        taus[np.array(pos_l, dtype=np.intp)] = t
    return np.cumsum(values), np.cumsum(taus)


# ---------------------------------------------------------------------------
# Urn-coupled embedding at ensemble scale.
# ---------------------------------------------------------------------------

@dataclass
class UrnEmbedding:
    regime: str
    n_embed: int
    n_proxy: int
    t_final: np.ndarray          # (R,) T_n
    m_final: np.ndarray          # (R,) B(T_n) = urn martingale at n
    time_scale: np.ndarray       # (R,) T_n/(n*H_proxy) or T_n*psi_proxy/n^rho
    trace_steps: np.ndarray      # (K,)
    trace_ratio: np.ndarray      # (K, R) running time-scale ratio


def _atom_matrices(regime, laws, y1p, y2p, steps):
    """Per-step conditional increment atoms: values and probs, (n, K)."""
    law1, law2 = laws
    tot = y1p + y2p
    pr1 = (y1p / tot)[:, None]
    if regime == "equal":
        a = (law1.mean * steps)[:, None]
        v = np.concatenate([a * (law1.values[None, :] / law1.mean) / y1p[:, None],
                            -a * (law2.values[None, :] / law2.mean) / y2p[:, None]],
                           axis=1)
        p = np.concatenate([pr1 * law1.probs[None, :],
                            (1.0 - pr1) * law2.probs[None, :]], axis=1)
    else:
        m1, m2 = law1.mean, law2.mean
        rho = m1 / m2
        sigma1 = math.sqrt(law1.sigma2)
        scale = (np.sqrt(rho * m2) * (m2 * steps) ** (rho / 2.0)
                 * steps ** (rho / 2.0) / sigma1)[:, None]
        v = np.concatenate([scale * ((law1.values[None, :] / m1) / y1p[:, None]
                                     - 1.0 / tot[:, None]),
                            -scale / tot[:, None]], axis=1)
        p = np.concatenate([pr1 * law1.probs[None, :], 1.0 - pr1], axis=1)
    return v + 0.0, p


def _embed_one_replicate(regime, laws, y0, y1d, y2d, vd, cd, seed, replicate):
    """Exit pairs for every realized increment of one replicate's prefix."""
    law1, law2 = laws
    n = len(vd)
    steps = np.arange(1, n + 1, dtype=np.float64)
    y1p = np.concatenate([[y0[0]], y1d[:-1]])
    y2p = np.concatenate([[y0[1]], y2d[:-1]])
    tot = y1p + y2p
    c1 = cd == 1
    if regime == "equal":
        a = law1.mean * steps
        w = np.where(c1, a * (vd / law1.mean) / y1p, -a * (vd / law2.mean) / y2p)
    else:
        m1, m2 = law1.mean, law2.mean
        rho = m1 / m2
        sigma1 = math.sqrt(law1.sigma2)
        scale = (math.sqrt(rho * m2) * (m2 * steps) ** (rho / 2.0)
                 * steps ** (rho / 2.0) / sigma1)
        w = np.where(c1, scale * ((vd / m1) / y1p - 1.0 / tot), -scale / tot)
    w = w + 0.0
    vmat, pmat = _atom_matrices(regime, laws, y1p, y2p, steps)
    live = w != 0.0
    # Partner weights |x| p(x) on the opposite sign of the realized atom.
    opp = np.where(w[:, None] > 0.0, vmat < 0.0, vmat > 0.0)
    wt = np.abs(vmat) * pmat * opp
    norm = wt.sum(axis=1)
    if np.any(live & (norm <= 0.0)):
        raise EmbeddingError("realized increment has no opposite-sign atoms")
    key = np.uint64(streams.stream_key(seed, replicate, streams.ROLE_EMBED))
    u = streams.uniform_block(key, 0, n)
    cum = np.cumsum(wt, axis=1)
    pick = (u[:, None] * np.where(norm > 0, norm, 1.0)[:, None] >= cum).sum(axis=1)
    pick = np.minimum(pick, vmat.shape[1] - 1)
    partner = vmat[np.arange(n), pick]
    lo = np.where(w > 0.0, partner, w)
    hi = np.where(w > 0.0, w, partner)
    side = np.where(w > 0.0, 1, -1).astype(np.int64)
    return w, lo[live], hi[live], side[live], live


def embed_urn_martingale(laws, y0, regime: str, n_embed: int, n_proxy: int,
                         seed: int, replicates: int, threads: int = 1,
                         trace_points: int = 9) -> UrnEmbedding:
    """Run urns, embed their first n_embed martingale increments.

    The urn path drives the embedding (the realized increment fixes each
    exit side), so B(T_k) is the urn martingale and T_n can be compared with
    its predicted clock: n*H in the equal regime, n^rho/psi in the unequal
    one, with limits proxied at n_proxy.
    """
    from . import ensemble
    law1, law2 = laws
    if not (law1.finite_support and law2.finite_support):
        raise EmbeddingError("urn embedding supports finite-support reinforcements only")
    if regime not in ("equal", "unequal"):
        raise ValueError(f"unknown regime {regime!r}")
    raw = ensemble.simulate_ensemble(
        laws, y0, n_proxy, sorted({n_embed, n_proxy}), seed, replicates,
        dense_n=n_embed, record_draws=True, chunk_size=max(replicates, 1),
        threads=1)
    y1d, y2d, vd, cd = raw.dense
    proxy = raw.at(n_proxy)
    trace_steps = np.array(sorted(set(
        engine.geometric_schedule(n_embed, ratio=(n_embed) ** (1.0 / trace_points),
                                  start=max(8, n_embed // 2 ** trace_points)))),
        dtype=np.int64)

    args = [(regime, laws, y0, y1d[:, r], y2d[:, r], vd[:, r], cd[:, r],
             seed, r, trace_steps) for r in range(replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_embed_replicate_star, args))
    else:
        rows = [_embed_replicate_star(a) for a in args]

    t_final = np.array([r[0] for r in rows])
    m_final = np.array([r[1] for r in rows])
    trace_t = np.stack([r[2] for r in rows], axis=1)   # (K, R)

    if regime == "equal":
        z_inf = proxy["y1"] / (proxy["y1"] + proxy["y2"])
        h_proxy = law1.sigma2 / z_inf + law2.sigma2 / (1.0 - z_inf)
        ratio = t_final / (n_embed * h_proxy)
        trace_ratio = trace_t / (trace_steps[:, None] * h_proxy[None, :])
    else:
        rho = law1.mean / law2.mean
        psi_inf = proxy["y1"] / proxy["y2"] ** rho
        ratio = t_final * psi_inf / n_embed ** rho
        trace_ratio = trace_t * psi_inf[None, :] / (trace_steps[:, None].astype(float) ** rho)
    return UrnEmbedding(regime, n_embed, n_proxy, t_final, m_final, ratio,
                        trace_steps, trace_ratio)


def _embed_replicate_star(a):
    regime, laws, y0, y1d, y2d, vd, cd, seed, rep, trace_steps = a
    w, lo, hi, side, live = _embed_one_replicate(regime, laws, y0, y1d, y2d,
                                                 vd, cd, seed, rep)
    n = len(w)
    taus = np.zeros(n)
    if len(lo):
        t, _, _ = _conditioned_taus(lo, hi, side, seed, rep, ctr0=n)
        taus[live] = t
    t_path = np.cumsum(taus)
    m_path = np.cumsum(w)
    return t_path[-1], m_path[-1], t_path[trace_steps - 1]


def verify_time_scale(result: UrnEmbedding,
                      band: tuple[float, float] = (0.95, 1.05)) -> dict:
    """Ensemble check that the embedding clock tracks its predicted rate."""
    med = float(np.median(result.time_scale))
    return {
        "regime": result.regime,
        "n_embed": result.n_embed,
        "replicates": len(result.time_scale),
        "median_ratio": med,
        "iqr": [float(np.percentile(result.time_scale, 25)),
                float(np.percentile(result.time_scale, 75))],
        "band": list(band),
        "passed": bool(band[0] <= med <= band[1]),
    }


def increment_law_from_state(state, laws, regime: str) -> CenteredFiniteLaw:
    """Conditional law of the next urn martingale increment."""
    if regime == "equal":
        vals, probs = engine.increment_atoms_equal(state, laws)
    else:
        vals, probs = engine.increment_atoms_unequal(state, laws)
    return CenteredFiniteLaw.from_atoms(vals, probs)
