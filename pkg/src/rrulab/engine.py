"""Two-color randomly reinforced urn: exact scalar simulation and oracles.

The process: the urn holds real-valued masses (y1, y2) of two ball colors.
Each step draws color k with probability y_k / (y1 + y2) and adds a random
nonnegative reinforcement U ~ law_k to the drawn color's mass.

One uniform is consumed per step: it decides the color, and its conditional
remainder (u/p on a draw of color 1, (u-p)/(1-p) otherwise) feeds the
reinforcement quantile.  Ball masses use Kahan-compensated accumulators.
This module is the arithmetic reference; the vectorized ensemble kernels
replicate it exactly and are tested bit-identical against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .laws import ReinforcementLaw
from .streams import ROLE_URN, CounterStream

DEFAULT_SCHEDULE_RATIO = 2.0 ** 0.25
ENUMERATION_MAX_N = 12


class EngineError(RuntimeError):
    """Fatal simulation failure (overflow, exhausted stream, bad state)."""


@dataclass(slots=True)
class UrnState:
    y1: float
    y2: float
    n: int = 0
    n1: int = 0
    n2: int = 0
    # Running sums of X_{l,k} (U_{l,k}/m_k - 1): numerators of the centered
    # reinforcement averages.
    sum_u1_centered: float = 0.0
    sum_u2_centered: float = 0.0
    # Kahan compensation carried with the mass accumulators.
    comp_y1: float = 0.0
    comp_y2: float = 0.0

    @property
    def total(self) -> float:
        return self.y1 + self.y2

    def validate(self) -> None:
        if not (self.y1 > 0.0 and self.y2 > 0.0):
            raise EngineError(f"ball masses must stay positive, got ({self.y1}, {self.y2})")
        if not (math.isfinite(self.y1) and math.isfinite(self.y2)):
            raise EngineError(f"ball-mass accumulator overflow at n={self.n}: "
                              f"({self.y1}, {self.y2})")
        if self.n1 + self.n2 != self.n:
            raise EngineError("draw counters out of sync")


def initial_state(y1: float, y2: float) -> UrnState:
    state = UrnState(float(y1), float(y2))
    state.validate()
    return state


@dataclass(frozen=True, slots=True)
class DrawRecord:
    step: int
    color: int          # 1 or 2
    reinforcement: float


def draw_probability(state: UrnState) -> tuple[float, float]:
    """Per-color draw probabilities (y1/(y1+y2), y2/(y1+y2))."""
    tot = state.y1 + state.y2
    p1 = state.y1 / tot
    return p1, 1.0 - p1


def step(state: UrnState, laws: tuple[ReinforcementLaw, ReinforcementLaw],
         stream: CounterStream) -> tuple[UrnState, DrawRecord]:
    """Advance one draw; returns the new state and the draw record."""
    law1, law2 = laws
    u = stream.next_uniform()
    tot = state.y1 + state.y2
    p1 = state.y1 / tot
    if u < p1:
        color = 1
        v = float(law1.quantile(u / p1))
    else:
        color = 2
        v = float(law2.quantile((u - p1) / (1.0 - p1)))
    add1 = v if color == 1 else 0.0
    add2 = v - add1
    t = add1 - state.comp_y1
    s = state.y1 + t
    c1 = (s - state.y1) - t
    y1 = s
    t = add2 - state.comp_y2
    s = state.y2 + t
    c2 = (s - state.y2) - t
    y2 = s
    new = UrnState(
        y1, y2, state.n + 1,
        state.n1 + (color == 1), state.n2 + (color == 2),
        state.sum_u1_centered + (v / law1.mean - 1.0 if color == 1 else 0.0),
        state.sum_u2_centered + (v / law2.mean - 1.0 if color == 2 else 0.0),
        c1, c2,
    )
    if not (math.isfinite(y1) and math.isfinite(y2)):
        raise EngineError(f"ball-mass accumulator overflow at n={new.n}: ({y1}, {y2})")
    return new, DrawRecord(new.n, color, v)


def geometric_schedule(n_max: int, ratio: float = DEFAULT_SCHEDULE_RATIO,
                       start: int = 1) -> list[int]:
    """Geometric checkpoint grid from start to n_max, horizon always included."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    points = []
    x = float(start)
    while x < n_max:
        n = int(round(x))
        if not points or n > points[-1]:
            points.append(n)
        x *= ratio
    if not points or points[-1] != n_max:
        points.append(n_max)
    return points


@dataclass(frozen=True, slots=True)
class Checkpoint:
    n: int
    z: float
    psi: float
    q: float
    sigma_tilde: float
    h_cap: float        # sigma1^2/Z + sigma2^2/(1-Z)
    n1: int
    n2: int
    a1: float
    a2: float


@dataclass(frozen=True)
class Trajectory:
    checkpoints: list[Checkpoint]
    schedule: list[int]
    final_state: UrnState
    seed: int
    replicate: int


def _checkpoint(state: UrnState, laws) -> Checkpoint:
    # Local import: stats depends on engine types.
    from . import stats
    return stats.checkpoint_stats(state, laws)


def run_trajectory(initial: UrnState, laws, n_max: int,
                   schedule: list[int] | None = None,
                   seed: int = 0, replicate: int = 0) -> Trajectory:
    """Deterministic run to n_max recording statistics on the schedule."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if schedule is None:
        schedule = geometric_schedule(n_max)
    schedule = sorted(set(schedule))
    if not schedule or schedule[0] < 1 or schedule[-1] > n_max:
        raise ValueError(f"schedule must lie within [1, {n_max}]")
    stream = CounterStream.for_replicate(seed, replicate, ROLE_URN)
    state = initial
    checkpoints = []
    want = set(schedule)
    for _ in range(n_max):
        state, _rec = step(state, laws, stream)
        if state.n in want:
            checkpoints.append(_checkpoint(state, laws))
    return Trajectory(checkpoints, schedule, state, seed, replicate)


# ---------------------------------------------------------------------------
# Exact small-n enumeration oracle.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExactOutcome:
    y1: float
    y2: float
    n1: int
    prob: float


@dataclass(frozen=True)
class ExactLaw:
    """Complete joint law of (Y_n1, Y_n2, N_n1) after n draws."""
    n: int
    outcomes: list[ExactOutcome]

    @property
    def total_prob(self) -> float:
        return float(sum(o.prob for o in self.outcomes))

    def z_law(self) -> dict[float, float]:
        table: dict[float, float] = {}
        for o in self.outcomes:
            z = o.y1 / (o.y1 + o.y2)
            table[z] = table.get(z, 0.0) + o.prob
        return table


def enumerate_exact(initial: UrnState, laws, n: int,
                    max_n: int = ENUMERATION_MAX_N,
                    max_states: int = 200_000) -> ExactLaw:
    """Brute-force enumeration over every draw/reinforcement sequence.

    States are keyed by exact per-atom draw counts, so mass arithmetic never
    splits states that are combinatorially identical.
    """
    law1, law2 = laws
    if not (law1.finite_support and law2.finite_support):
        raise ValueError("exact enumeration requires finite-support laws")
    if n > max_n:
        raise ValueError(f"enumeration horizon {n} exceeds configured bound {max_n}")
    v1, p1 = law1.values, law1.probs
    v2, p2 = law2.values, law2.probs
    k1, k2 = len(v1), len(v2)

    def mass(y0, counts, values):
        y = y0
        for c, v in zip(counts, values):
            y += c * v
        return y

    states = {((0,) * k1, (0,) * k2): 1.0}
    for _ in range(n):
        nxt: dict[tuple, float] = {}
        for (c1s, c2s), prob in states.items():
            y1 = mass(initial.y1, c1s, v1)
            y2 = mass(initial.y2, c2s, v2)
            tot = y1 + y2
            pr1 = y1 / tot
            for i in range(k1):
                key = (c1s[:i] + (c1s[i] + 1,) + c1s[i + 1:], c2s)
                nxt[key] = nxt.get(key, 0.0) + prob * pr1 * p1[i]
            pr2 = 1.0 - pr1
            for i in range(k2):
                key = (c1s, c2s[:i] + (c2s[i] + 1,) + c2s[i + 1:])
                nxt[key] = nxt.get(key, 0.0) + prob * pr2 * p2[i]
        if len(nxt) > max_states:
            raise ValueError(
                f"enumeration support too large: {len(nxt)} states at depth "
                f"< {n} (limit {max_states}); expect ~(n^k1 * n^k2) growth")
        states = nxt

    merged: dict[tuple, float] = {}
    for (c1s, c2s), prob in states.items():
        y1 = mass(initial.y1, c1s, v1)
        y2 = mass(initial.y2, c2s, v2)
        key = (y1, y2, sum(c1s))
        merged[key] = merged.get(key, 0.0) + prob
    outcomes = [ExactOutcome(y1, y2, n1, pr)
                for (y1, y2, n1), pr in sorted(merged.items())]
    return ExactLaw(n, outcomes)


# ---------------------------------------------------------------------------
# Conditional martingale increments (consumed by the Brownian embedding).
# ---------------------------------------------------------------------------

def increment_atoms_equal(state: UrnState, laws) -> tuple[np.ndarray, np.ndarray]:
    """Conditional law of the next equal-mean martingale increment.

    Increment of the next draw (index n+1 after n draws): the centered
    reinforcement contrast m1*(n+1) * (X1*(U1/m1)/y1 - X2*(U2/m2)/y2).
    Exact mean zero for untruncated reinforcements.
    """
    law1, law2 = laws
    a = law1.mean * (state.n + 1)
    tot = state.y1 + state.y2
    pr1 = state.y1 / tot
    vals = np.concatenate([
        a * (law1.values / law1.mean) / state.y1,
        -a * (law2.values / law2.mean) / state.y2,
    ])
    probs = np.concatenate([pr1 * law1.probs, (1.0 - pr1) * law2.probs])
    return vals, probs


def increment_atoms_unequal(state: UrnState, laws) -> tuple[np.ndarray, np.ndarray]:
    """Conditional law of the next unequal-mean martingale increment.

    Scale * (X1*(U1/m1)/y1 - 1/(y1+y2)) where
    scale = sqrt(rho*m2) * (m2*(n+1))^(rho/2) * (n+1)^(rho/2) / sigma1.
    Only color-1 reinforcements enter; a color-2 draw contributes the single
    atom -scale/(y1+y2).
    """
    law1, law2 = laws
    m1, m2 = law1.mean, law2.mean
    rho = m1 / m2
    np1 = state.n + 1
    sigma1 = math.sqrt(law1.sigma2)
    scale = math.sqrt(rho * m2) * (m2 * np1) ** (rho / 2.0) * np1 ** (rho / 2.0) / sigma1
    tot = state.y1 + state.y2
    pr1 = state.y1 / tot
    vals = np.concatenate([
        scale * ((law1.values / m1) / state.y1 - 1.0 / tot),
        np.array([-scale / tot]),
    ])
    probs = np.concatenate([pr1 * law1.probs, np.array([1.0 - pr1])])
    return vals, probs


def increment_value(record: DrawRecord, prior: UrnState, laws, regime: str) -> float:
    """Realized martingale increment of a recorded draw."""
    law1, law2 = laws
    if regime == "equal":
        a = law1.mean * record.step
        if record.color == 1:
            return a * (record.reinforcement / law1.mean) / prior.y1
        return -a * (record.reinforcement / law2.mean) / prior.y2
    m1, m2 = law1.mean, law2.mean
    rho = m1 / m2
    sigma1 = math.sqrt(law1.sigma2)
    scale = (math.sqrt(rho * m2) * (m2 * record.step) ** (rho / 2.0)
             * record.step ** (rho / 2.0) / sigma1)
    tot = prior.y1 + prior.y2
    if record.color == 1:
        return scale * ((record.reinforcement / m1) / prior.y1 - 1.0 / tot)
    return -scale / tot


def increment_conditional_variance(state: UrnState, laws, regime: str) -> float:
    """Closed-form conditional second moment of the next increment."""
    law1, law2 = laws
    tot = state.y1 + state.y2
    z = state.y1 / tot
    np1 = state.n + 1
    if regime == "equal":
        return (law1.mean * np1 / tot) ** 2 * (law1.sigma2 / z + law2.sigma2 / (1.0 - z))
    m1, m2 = law1.mean, law2.mean
    rho = m1 / m2
    c = rho * m2 * (m2 * np1) ** rho * np1 ** rho
    return c / (tot * state.y1) - c / (law1.sigma2 * tot * tot)
