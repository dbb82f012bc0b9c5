"""Reference policies and their per-scenario upper envelope.

ABR references: the clairvoyant K-step rolling oracle plus a few classic
heuristics.  LB references: least completion time (LCT), join shortest queue
(JSQ) and choose fastest server (CFS).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._accel import njit
from .abr import AbrConfig, AbrState, abr_features, step_kernel
from .core import Policy, Scenario
from .envs import run_policy

MAX_ORACLE_K = 8


@njit
def oracle_window_kernel(buffer_s, prev_idx, sizes, ladder, bws, chunk_dur, cap, rtt, quantum, alpha, beta, gamma):
    """Exhaustive depth-first search over every bitrate sequence of the window.

    ``sizes`` has one row per window chunk.  Returns the best sequence (ties go
    to the lexicographically smallest), its reward, the best reward reachable
    from each first action, and the number of complete sequences scored.
    """
    K = bws.shape[0]
    n = ladder.shape[0]
    best = -np.inf
    best_seq = np.zeros(K, dtype=np.int64)
    first = np.full(n, -np.inf)
    seq = np.zeros(K, dtype=np.int64)
    bufs = np.empty(K + 1)
    accs = np.empty(K + 1)
    prevs = np.empty(K + 1, dtype=np.int64)
    bufs[0] = buffer_s
    accs[0] = 0.0
    prevs[0] = prev_idx
    leaves = 0
    d = 0
    seq[0] = -1
    while d >= 0:
        seq[d] += 1
        if seq[d] >= n:
            d -= 1
            continue
        a = seq[d]
        buf, rb, dl, sl, r = step_kernel(
            bufs[d], ladder[prevs[d]], sizes[d, a], ladder[a], bws[d], chunk_dur, cap, rtt, quantum, alpha, beta, gamma
        )
        acc = accs[d] + r
        if d == K - 1:
            leaves += 1
            if acc > best:
                best = acc
                for j in range(K):
                    best_seq[j] = seq[j]
            if acc > first[seq[0]]:
                first[seq[0]] = acc
        else:
            bufs[d + 1] = buf
            accs[d + 1] = acc
            prevs[d + 1] = a
            d += 1
            seq[d] = -1
    return best_seq, best, first, leaves


def rolling_oracle(state: AbrState, bandwidths, cfg: AbrConfig, K: int):
    """Best ``K``-chunk bitrate sequence from ``state`` under the realized ``bandwidths``.

    Returns ``(sequence, window_reward, first_action_scores, n_candidates)``.
    The window is truncated at the end of the session.
    """
    if not 1 <= K <= MAX_ORACLE_K:
        raise ValueError(f"K must be in [1, {MAX_ORACLE_K}]")
    k = min(K, state.total_chunks - state.chunk_index, len(bandwidths))
    if k <= 0:
        raise ValueError("no chunks left in the window")
    bws = np.ascontiguousarray(bandwidths[:k], dtype=np.float64)
    if np.any(bws <= 0):
        raise ValueError("infeasible bandwidth")
    sizes = np.ascontiguousarray(state.sizes[state.chunk_index : state.chunk_index + k], dtype=np.float64)
    seq, best, first, leaves = oracle_window_kernel(
        float(state.buffer_s), int(state.prev_index), sizes, cfg.ladder_kbps, bws, *cfg.params()
    )
    return tuple(int(a) for a in seq), float(best), first, int(leaves)


class RollingOracle(Policy):
    """Clairvoyant receding-horizon reference: re-plans a K-chunk window every chunk."""

    kind = "reference"

    def __init__(self, K: int = 5, name: str | None = None):
        if not 1 <= K <= MAX_ORACLE_K:
            raise ValueError(f"K must be in [1, {MAX_ORACLE_K}]")
        self.K = K
        self.name = name or f"oracle-k{K}"
        self._bws = None
        self._cfg = None

    def reset(self, scenario: Scenario, cfg) -> None:
        self._bws = np.ascontiguousarray(scenario.variables[:, 0], dtype=np.float64)
        self._cfg = cfg

    def scores(self, obs, state=None):
        if state is None or self._bws is None:
            raise ValueError("the rolling oracle needs the simulator state")
        window = self._bws[state.chunk_index : state.chunk_index + self.K]
        _, _, first, _ = rolling_oracle(state, window, self._cfg, self.K)
        return first


class BufferBased(Policy):
    """Buffer-based rate selection: lowest rung below the reservoir, top rung above the cushion."""

    kind = "reference"

    def __init__(self, reservoir: float = 5.0, cushion: float = 40.0, name: str = "bba"):
        self.reservoir = reservoir
        self.cushion = cushion
        self.name = name
        self._ladder = None

    def reset(self, scenario, cfg):
        self._ladder = cfg.ladder_kbps

    def scores(self, obs, state=None):
        ladder = self._ladder
        buf = abr_features(obs)[1]
        frac = (buf - self.reservoir) / (self.cushion - self.reservoir)
        target = ladder[0] + min(max(frac, 0.0), 1.0) * (ladder[-1] - ladder[0])
        return np.where(ladder <= target, ladder, -ladder)


class RateBased(Policy):
    """Highest rung below a discounted harmonic mean of recent throughput."""

    kind = "reference"

    def __init__(self, safety: float = 0.9, name: str = "rate"):
        self.safety = safety
        self.name = name
        self._ladder = None

    def reset(self, scenario, cfg):
        self._ladder = cfg.ladder_kbps

    def scores(self, obs, state=None):
        ladder = self._ladder
        tput = np.asarray(obs).reshape(6, -1)[2] * 8.0
        valid = tput[tput > 0][-5:]
        if valid.size == 0:
            target = ladder[0]
        else:
            target = self.safety * 1000.0 * valid.size / np.sum(1.0 / valid)
        return np.where(ladder <= target, ladder, -ladder)


class ConstantBitrate(Policy):
    kind = "reference"

    def __init__(self, index: int = 0, name: str | None = None):
        self.index = index
        self.name = name or f"constant-{index}"
        self._n = 6

    def reset(self, scenario, cfg):
        self._n = cfg.ladder.n

    def scores(self, obs, state=None):
        s = np.zeros(self._n)
        s[self.index] = 1.0
        return s


# --------------------------------------------------------------------------
# Load-balancing heuristics
# --------------------------------------------------------------------------


def lct(obs, rates) -> int:
    """Least completion time: ``argmin_i (L_i + J) / rate_i``."""
    obs = np.asarray(obs, dtype=np.float64)
    loads, job = obs[:-1], obs[-1]
    return int(np.argmin((loads + job) / np.asarray(rates, dtype=np.float64)))


def jsq(obs) -> int:
    """Join the shortest queue by load proxy."""
    return int(np.argmin(np.asarray(obs, dtype=np.float64)[:-1]))


def cfs(rates) -> int:
    """Choose the fastest server."""
    return int(np.argmax(np.asarray(rates, dtype=np.float64)))


class _LbReference(Policy):
    kind = "reference"

    def __init__(self):
        self._rates = None

    def reset(self, scenario, cfg):
        self._rates = np.asarray(cfg.rates, dtype=np.float64)


class LCT(_LbReference):
    name = "lct"

    def scores(self, obs, state=None):
        obs = np.asarray(obs, dtype=np.float64)
        return -(obs[:-1] + obs[-1]) / self._rates


class JSQ(_LbReference):
    name = "jsq"

    def scores(self, obs, state=None):
        return -np.asarray(obs, dtype=np.float64)[:-1]


class CFS(_LbReference):
    name = "cfs"

    def scores(self, obs, state=None):
        return self._rates.copy()


# --------------------------------------------------------------------------
# Portfolio
# --------------------------------------------------------------------------


@dataclass
class Portfolio:
    members: list
    env: str

    def __post_init__(self):
        if not self.members:
            raise ValueError("portfolio must be nonempty")
        names = [m.name for m in self.members]
        if len(set(names)) != len(names):
            raise ValueError("portfolio member names must be unique")

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.members]

    def with_member(self, policy) -> "Portfolio":
        return Portfolio(self.members + [policy], self.env)


def default_portfolio(env: str, K: int = 5) -> Portfolio:
    if env == "abr":
        return Portfolio([RollingOracle(K)], "abr")
    if env == "lb":
        return Portfolio([LCT(), JSQ(), CFS()], "lb")
    raise ValueError(f"unknown env {env!r}")


REFERENCE_FACTORIES = {
    "oracle": lambda **kw: RollingOracle(**kw),
    "bba": lambda **kw: BufferBased(**kw),
    "rate": lambda **kw: RateBased(**kw),
    "constant": lambda **kw: ConstantBitrate(**kw),
    "lct": lambda **kw: LCT(),
    "jsq": lambda **kw: JSQ(),
    "cfs": lambda **kw: CFS(),
}


def best_reference(portfolio: Portfolio, scenario: Scenario, cfg, return_trajectories: bool = False):
    """Run every member on ``scenario`` from a fresh initial state.

    Returns ``(best_name, J_ref, {name: J})``; ties go to the earliest member.
    """
    if scenario.env != portfolio.env:
        raise ValueError("scenario and portfolio env differ")
    rewards = {}
    trajs = {}
    best_name, best = None, -math.inf
    for m in portfolio.members:
        traj = run_policy(m, scenario, cfg, record_obs=return_trajectories)
        rewards[m.name] = traj.total_reward
        trajs[m.name] = traj
        if traj.total_reward > best:
            best_name, best = m.name, traj.total_reward
    if return_trajectories:
        return best_name, best, rewards, trajs
    return best_name, best, rewards
