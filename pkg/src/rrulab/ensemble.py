"""Vectorized multi-replicate urn simulation.

Replicates evolve in lockstep; each owns a counter-based stream keyed by
(seed, replicate), so any chunking / process layout yields bit-identical
results, and any single replicate can be replayed by the scalar engine.

Two step kernels implement the exact arithmetic of ``engine.step``:

* a numba kernel for finite-support laws (the high-throughput path),
* a numpy kernel for any law kind (continuous quantiles need scipy).

The kernel choice depends only on the law kinds, never on the environment.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import streams
from .engine import EngineError
from .laws import ReinforcementLaw

_GAMMA = np.uint64(streams.GAMMA)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

DEFAULT_CHUNK = 2048


@njit(cache=True, inline="always")
def _u01(key, j):
    x = key + np.uint64(j + 1) * _GAMMA
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)) * 1.1102230246251565e-16


@njit(cache=True)
def _advance_finite(y1, y2, c1, c2, n1, su1, su2, keys, step0, step1,
                    vals1, cums1, vals2, cums2, m1, m2,
                    dense_n, y1d, y2d, vd, cd, record_draws):
    nrep = y1.shape[0]
    for r in range(nrep):
        key = keys[r]
        ly1 = y1[r]
        ly2 = y2[r]
        lc1 = c1[r]
        lc2 = c2[r]
        ln1 = n1[r]
        ls1 = su1[r]
        ls2 = su2[r]
        for j in range(step0, step1):
            u = _u01(key, j)
            p1 = ly1 / (ly1 + ly2)
            if u < p1:
                color1 = True
                u2 = u / p1
                k = 0
                while u2 >= cums1[k]:
                    k += 1
                v = vals1[k]
                add1 = v
                add2 = 0.0
            else:
                color1 = False
                u2 = (u - p1) / (1.0 - p1)
                k = 0
                while u2 >= cums2[k]:
                    k += 1
                v = vals2[k]
                add1 = 0.0
                add2 = v
            t = add1 - lc1
            s = ly1 + t
            lc1 = (s - ly1) - t
            ly1 = s
            t = add2 - lc2
            s = ly2 + t
            lc2 = (s - ly2) - t
            ly2 = s
            if color1:
                ln1 += 1
                ls1 += v / m1 - 1.0
            else:
                ls2 += v / m2 - 1.0
            if j < dense_n:
                y1d[j, r] = ly1
                y2d[j, r] = ly2
                if record_draws:
                    vd[j, r] = v
                    cd[j, r] = 1 if color1 else 2
        y1[r] = ly1
        y2[r] = ly2
        c1[r] = lc1
        c2[r] = lc2
        n1[r] = ln1
        su1[r] = ls1
        su2[r] = ls2


def _advance_numpy(st, keys, step0, step1, law1, law2, dense_n, dense):
    """Reference lockstep kernel; handles continuous quantiles via scipy."""
    y1, y2, c1, c2, n1, su1, su2 = st
    m1, m2 = law1.mean, law2.mean
    for j in range(step0, step1):
        u = streams.uniform_across(keys, j)
        p1 = y1 / (y1 + y2)
        d1 = u < p1
        u2 = np.where(d1, u / p1, (u - p1) / (1.0 - p1))
        v = np.where(d1, law1.quantile(u2), law2.quantile(u2))
        add1 = v * d1
        add2 = v - add1
        t = add1 - c1
        s = y1 + t
        c1 = (s - y1) - t
        y1 = s
        t = add2 - c2
        s = y2 + t
        c2 = (s - y2) - t
        y2 = s
        n1 += d1
        su1 = su1 + (v / m1 - 1.0) * d1
        su2 = su2 + (v / m2 - 1.0) * (~d1)
        if j < dense_n:
            dense[0][j] = y1
            dense[1][j] = y2
            if len(dense) > 2:
                dense[2][j] = v
                dense[3][j] = np.where(d1, 1, 2).astype(np.uint8)
    return y1, y2, c1, c2, n1, su1, su2


@dataclass
class EnsembleRaw:
    """Per-replicate state snapshots at each checkpoint step."""
    checkpoint_steps: np.ndarray      # (K,) int64
    y1: np.ndarray                    # (K, R)
    y2: np.ndarray                    # (K, R)
    n1: np.ndarray                    # (K, R) exact counts as float64
    su1: np.ndarray                   # (K, R)
    su2: np.ndarray                   # (K, R)
    bridge_stat: np.ndarray | None = None       # (R,) one-sided
    bridge_stat_two: np.ndarray | None = None   # (R,) two-sided
    dense: tuple | None = None        # (y1d, y2d[, vd, cd]) when record_draws

    @property
    def replicates(self) -> int:
        return self.y1.shape[1]

    def at(self, n: int) -> dict[str, np.ndarray]:
        k = int(np.searchsorted(self.checkpoint_steps, n))
        if k >= len(self.checkpoint_steps) or self.checkpoint_steps[k] != n:
            raise KeyError(f"no checkpoint recorded at n={n}")
        return {"y1": self.y1[k], "y2": self.y2[k], "n1": self.n1[k],
                "su1": self.su1[k], "su2": self.su2[k]}


def _bridge_from_dense(y1d, y2d, law1, law2, snap_n, bridge_kind):
    """One- and two-sided path maxima normalized at the prefix end."""
    from . import stats
    n = y1d.shape[0]
    l = np.arange(1, n + 1, dtype=np.float64)[:, None]
    if bridge_kind == "equal":
        z = y1d / (y1d + y2d)
        zn = snap_n["y1"] / (snap_n["y1"] + snap_n["y2"])
        norm = stats.sigma_tilde(zn, law1.sigma2, law2.sigma2) * math.sqrt(n)
        dev = l * (z - z[-1][None, :])
    else:
        rho = law1.mean / law2.mean
        psi = y1d / y2d ** rho
        norm = math.sqrt(law1.sigma2) * np.sqrt(snap_n["n1"])
        dev = l ** rho * (psi - psi[-1][None, :])
    with np.errstate(invalid="ignore"):
        one = dev.max(axis=0) / norm
        two = np.abs(dev).max(axis=0) / norm
    return one, two


def _run_chunk(laws, y0, n_steps, checkpoints, seed, rep_range, dense_n,
               bridge_kind, record_draws):
    law1, law2 = laws
    nrep = rep_range.stop - rep_range.start
    keys = streams.replicate_keys(seed, rep_range, streams.ROLE_URN)
    y1 = np.full(nrep, y0[0])
    y2 = np.full(nrep, y0[1])
    c1 = np.zeros(nrep)
    c2 = np.zeros(nrep)
    n1 = np.zeros(nrep, dtype=np.int64)
    su1 = np.zeros(nrep)
    su2 = np.zeros(nrep)

    dense_arrays = None
    if dense_n > 0:
        dense_arrays = [np.empty((dense_n, nrep)), np.empty((dense_n, nrep))]
        if record_draws:
            dense_arrays.append(np.empty((dense_n, nrep)))
            dense_arrays.append(np.empty((dense_n, nrep), dtype=np.uint8))

    fast = law1.finite_support and law2.finite_support
    if fast:
        vals1, cums1 = law1.kernel_atoms()
        vals2, cums2 = law2.kernel_atoms()
    dummy2 = np.empty((1, 1))
    dummyc = np.empty((1, 1), dtype=np.uint8)

    snaps = {"y1": [], "y2": [], "n1": [], "su1": [], "su2": []}
    prev = 0
    for ck in checkpoints:
        if fast:
            _advance_finite(
                y1, y2, c1, c2, n1, su1, su2, keys, prev, int(ck),
                vals1, cums1, vals2, cums2, law1.mean, law2.mean,
                dense_n,
                dense_arrays[0] if dense_arrays else dummy2,
                dense_arrays[1] if dense_arrays else dummy2,
                dense_arrays[2] if (dense_arrays and record_draws) else dummy2,
                dense_arrays[3] if (dense_arrays and record_draws) else dummyc,
                record_draws,
            )
        else:
            st = _advance_numpy((y1, y2, c1, c2, n1, su1, su2), keys, prev,
                                int(ck), law1, law2, dense_n, dense_arrays)
            y1, y2, c1, c2, n1, su1, su2 = st
        if not (np.all(np.isfinite(y1)) and np.all(np.isfinite(y2))):
            raise EngineError(f"ball-mass accumulator overflow before n={ck}")
        snaps["y1"].append(y1.copy())
        snaps["y2"].append(y2.copy())
        snaps["n1"].append(n1.astype(np.float64))
        snaps["su1"].append(su1.copy())
        snaps["su2"].append(su2.copy())
        prev = int(ck)

    out = {k: np.stack(v) for k, v in snaps.items()}
    bridge = bridge_two = None
    if dense_n > 0 and bridge_kind is not None:
        k_at = int(np.searchsorted(checkpoints, dense_n))
        snap_n = {k: out[k][k_at] for k in out}
        bridge, bridge_two = _bridge_from_dense(
            dense_arrays[0], dense_arrays[1], law1, law2, snap_n, bridge_kind)
    dense_keep = tuple(dense_arrays) if (dense_n > 0 and record_draws) else None
    return out, bridge, bridge_two, dense_keep


def simulate_ensemble(laws, y0: tuple[float, float], n_steps: int,
                      checkpoints, seed: int, replicates: int,
                      dense_n: int = 0, bridge_kind: str | None = None,
                      record_draws: bool = False,
                      chunk_size: int = DEFAULT_CHUNK,
                      threads: int = 1) -> EnsembleRaw:
    """Simulate `replicates` independent urns, snapshotting at checkpoints.

    checkpoints must be sorted, within [1, n_steps], and include n_steps.
    dense_n > 0 stores the per-step mass path of the first dense_n steps
    (bridge statistics and the embedding need it); dense_n must then be one
    of the checkpoints.
    """
    checkpoints = np.asarray(sorted(set(int(c) for c in checkpoints)), dtype=np.int64)
    if len(checkpoints) == 0 or checkpoints[0] < 1 or checkpoints[-1] != n_steps:
        raise ValueError("checkpoints must lie in [1, n_steps] and include n_steps")
    if dense_n > 0 and dense_n not in checkpoints:
        raise ValueError("dense_n must be one of the checkpoints")
    if bridge_kind not in (None, "equal", "unequal"):
        raise ValueError(f"unknown bridge kind {bridge_kind!r}")
    if bridge_kind is not None and dense_n == 0:
        raise ValueError("bridge statistics require a dense prefix")

    ranges = [range(a, min(a + chunk_size, replicates))
              for a in range(0, replicates, chunk_size)]
    args = [(laws, y0, n_steps, checkpoints, seed, rr, dense_n, bridge_kind,
             record_draws) for rr in ranges]
    if threads > 1 and len(ranges) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_chunk_star, args))
    else:
        parts = [_run_chunk(*a) for a in args]

    out = {k: np.concatenate([p[0][k] for p in parts], axis=1)
           for k in parts[0][0]}
    raw = EnsembleRaw(checkpoint_steps=checkpoints, **out)
    if parts[0][1] is not None:
        raw.bridge_stat = np.concatenate([p[1] for p in parts])
        raw.bridge_stat_two = np.concatenate([p[2] for p in parts])
    if record_draws and parts[0][3] is not None:
        raw.dense = tuple(np.concatenate([p[3][i] for p in parts], axis=1)
                          for i in range(len(parts[0][3])))
    return raw


def _run_chunk_star(a):
    return _run_chunk(*a)
