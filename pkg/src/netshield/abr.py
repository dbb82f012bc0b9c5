"""Chunk-level adaptive-bitrate simulator with Pensieve-style dynamics."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._accel import njit
from .core import ABR_LADDER, ActionSpace, RewardSpec, RngStream, Scenario, StepRecord, Trajectory, total_reward

HISTORY_LEN = 8
OBS_SHAPE = (6, HISTORY_LEN)
REMAINING_CAP = 48.0

ABR_FEATURES = (
    "LastBitrate",
    "Buffer",
    "Throughput",
    "Delay",
    "ThroughputMean",
    "ThroughputMin",
    "ThroughputMax",
    "ChunksRemaining",
)


@dataclass
class AbrConfig:
    chunk_duration_s: float = 4.0
    buffer_cap_s: float = 60.0
    rtt_s: float = 0.08
    sleep_quantum_s: float = 0.5
    ladder: ActionSpace = ABR_LADDER
    manifest: np.ndarray | None = None
    reward: RewardSpec = field(default_factory=lambda: RewardSpec.default("abr"))

    def __post_init__(self):
        for name in ("chunk_duration_s", "buffer_cap_s", "rtt_s", "sleep_quantum_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.manifest is not None:
            m = np.asarray(self.manifest, dtype=np.float64)
            if m.ndim != 2 or m.shape[1] != self.ladder.n:
                raise ValueError(f"manifest must have {self.ladder.n} columns")
            self.manifest = m

    @property
    def ladder_kbps(self) -> np.ndarray:
        return np.asarray(self.ladder.discrete_values, dtype=np.float64)

    def chunk_sizes(self, n_chunks: int) -> np.ndarray:
        """Bytes per (chunk, ladder level)."""
        if self.manifest is not None:
            if self.manifest.shape[0] != n_chunks:
                raise ValueError("manifest row count must equal the chunk count")
            return self.manifest
        row = self.ladder_kbps * 1000.0 * self.chunk_duration_s / 8.0
        return np.tile(row, (n_chunks, 1))

    def params(self) -> tuple:
        r = self.reward
        return (
            self.chunk_duration_s,
            self.buffer_cap_s,
            self.rtt_s,
            self.sleep_quantum_s,
            r.alpha,
            r.beta,
            r.gamma_coef,
        )


@dataclass
class AbrState:
    buffer_s: float
    chunk_index: int
    prev_index: int
    total_chunks: int
    sizes: np.ndarray
    history: list = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.chunk_index >= self.total_chunks

    @property
    def next_chunk_bytes(self) -> np.ndarray:
        if self.done:
            return np.zeros(self.sizes.shape[1])
        return self.sizes[self.chunk_index]

    def copy(self) -> "AbrState":
        # sizes is never mutated, so sharing it is safe
        return replace(self, history=list(self.history))


def abr_initial_state(n_chunks: int, cfg: AbrConfig) -> AbrState:
    return AbrState(0.0, 0, 0, n_chunks, cfg.chunk_sizes(n_chunks))


@njit
def step_kernel(buffer_s, prev_kbps, size_bytes, kbps, bw_mbps, chunk_dur, cap, rtt, quantum, alpha, beta, gamma):
    """One chunk download.  Returns (buffer', rebuffer, download_s, sleep_s, reward)."""
    download = size_bytes * 8.0 / (bw_mbps * 1e6) + rtt
    rebuf = download - buffer_s
    if rebuf < 0.0:
        rebuf = 0.0
    buf = buffer_s - download
    if buf < 0.0:
        buf = 0.0
    buf = buf + chunk_dur
    sleep = 0.0
    if buf > cap:
        sleep = math.ceil((buf - cap) / quantum) * quantum
        buf = buf - sleep
    reward = alpha * kbps - beta * rebuf - gamma * abs(kbps - prev_kbps)
    return buf, rebuf, download, sleep, reward


@njit
def rollout_kernel(buffer_s, prev_idx, actions, sizes, ladder, bws, chunk_dur, cap, rtt, quantum, alpha, beta, gamma):
    """Open-loop rollout of a fixed action sequence; returns per-step rewards and rebuffers."""
    n = actions.shape[0]
    rewards = np.empty(n)
    rebufs = np.empty(n)
    buf = buffer_s
    prev = prev_idx
    for t in range(n):
        a = actions[t]
        buf, rb, dl, sl, r = step_kernel(
            buf, ladder[prev], sizes[t, a], ladder[a], bws[t], chunk_dur, cap, rtt, quantum, alpha, beta, gamma
        )
        rewards[t] = r
        rebufs[t] = rb
        prev = a
    return rewards, rebufs


def _advance(state: AbrState, action: int, bw_mbps: float, cfg: AbrConfig) -> tuple[float, dict]:
    if state.done:
        raise ValueError("episode finished")
    if not bw_mbps > 0:
        raise ValueError("infeasible bandwidth")
    ladder = cfg.ladder_kbps
    if not 0 <= action < ladder.size:
        raise ValueError(f"invalid ladder index {action}")
    size = float(state.sizes[state.chunk_index, action])
    buf, rebuf, download, sleep, reward = step_kernel(
        state.buffer_s, ladder[state.prev_index], size, ladder[action], float(bw_mbps), *cfg.params()
    )
    state.buffer_s = buf
    state.chunk_index += 1
    state.prev_index = int(action)
    remaining = state.total_chunks - state.chunk_index
    state.history.append((ladder[action], buf, size, download * 1000.0, float(remaining)))
    if len(state.history) > HISTORY_LEN:
        del state.history[0]
    info = {"rebuffer": rebuf, "download_s": download, "sleep_s": sleep, "bitrate": ladder[action]}
    return reward, info


def abr_step(state: AbrState, action: int, bw_mbps: float, cfg: AbrConfig) -> tuple[AbrState, float, bool]:
    """Download the next chunk at ladder index ``action``; the input state is left untouched."""
    new = state.copy()
    reward, _ = _advance(new, action, bw_mbps, cfg)
    return new, reward, new.done


def abr_observe(state: AbrState, cfg: AbrConfig) -> np.ndarray:
    """The 6x8 normalized observation; history columns are right-aligned."""
    obs = np.zeros(OBS_SHAPE)
    max_b = cfg.ladder_kbps[-1]
    hist = state.history[-HISTORY_LEN:]
    off = HISTORY_LEN - len(hist)
    for j, (kbps, buf, size, delay_ms, remaining) in enumerate(hist):
        c = off + j
        obs[0, c] = kbps / max_b
        obs[1, c] = buf / 10.0
        obs[2, c] = size / (delay_ms * 1000.0)
        obs[3, c] = delay_ms / (1000.0 * 10.0)
        obs[5, c] = min(remaining, REMAINING_CAP) / REMAINING_CAP
    nxt = state.next_chunk_bytes
    obs[4, : nxt.size] = nxt / 1000.0**2
    return obs


def abr_features(obs: np.ndarray, cfg: AbrConfig | None = None) -> np.ndarray:
    """Raw-unit features recovered from the observation, in ``ABR_FEATURES`` order."""
    max_b = ABR_LADDER.discrete_values[-1] if cfg is None else cfg.ladder_kbps[-1]
    obs = np.asarray(obs).reshape(OBS_SHAPE)
    valid = obs[3] > 0
    tput = obs[2] * 8.0
    if valid.any():
        tv = tput[valid]
        t_mean, t_min, t_max = float(tv.mean()), float(tv.min()), float(tv.max())
    else:
        t_mean = t_min = t_max = 0.0
    return np.array(
        [
            obs[0, -1] * max_b,
            obs[1, -1] * 10.0,
            tput[-1],
            obs[3, -1] * 10.0,
            t_mean,
            t_min,
            t_max,
            obs[5, -1] * REMAINING_CAP,
        ]
    )


def abr_run(policy, scenario: Scenario, cfg: AbrConfig, record_obs: bool = True) -> Trajectory:
    """Closed-loop rollout of ``policy`` over every chunk of ``scenario``."""
    if scenario.env != "abr":
        raise ValueError("abr_run needs an abr scenario")
    bws = scenario.variables[:, 0]
    T = scenario.horizon
    state = abr_initial_state(T, cfg)
    policy.reset(scenario, cfg)
    steps = []
    rebufs, bitrates = [], []
    for t in range(T):
        obs = abr_observe(state, cfg)
        t0 = time.perf_counter_ns()
        a = int(policy.decide(obs, state))
        wall = time.perf_counter_ns() - t0
        reward, info = _advance(state, a, float(bws[t]), cfg)
        steps.append(StepRecord(obs if record_obs else np.empty(0), a, reward, wall, info["download_s"]))
        rebufs.append(info["rebuffer"])
        bitrates.append(info["bitrate"])
    traj = Trajectory(scenario.scenario_id, policy.name, steps)
    traj.total_reward = total_reward(traj.rewards, cfg.reward.discount)
    traj.info = {"rebuffer": rebufs, "bitrate": bitrates}
    return traj


# --------------------------------------------------------------------------
# Scenario sources
# --------------------------------------------------------------------------


def normal_abr_scenario(seed: int, horizon: int = 48) -> Scenario:
    """Benign bandwidth trace: slowly varying log-normal walk around 1.5-6 Mbps."""
    rng = RngStream(seed)
    mean = math.log(rng.uniform(1.5, 6.0))
    x = 0.0
    vals = []
    for _ in range(horizon):
        x = 0.85 * x + 0.12 * rng.normal()
        vals.append(math.exp(mean + x))
    return Scenario("abr", np.array(vals).reshape(-1, 1), seed=seed, family="normal")


def load_manifest(path: str | Path) -> np.ndarray:
    """Manifest CSV: ``chunk_index,size_300,...,size_4300`` in bytes."""
    rows = []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        size_cols = [c for c in r.fieldnames or [] if c.startswith("size_")]
        if "chunk_index" not in (r.fieldnames or []) or not size_cols:
            raise ValueError("manifest needs chunk_index and size_* columns")
        for row in r:
            rows.append((int(row["chunk_index"]), [float(row[c]) for c in size_cols]))
    rows.sort()
    if [i for i, _ in rows] != list(range(len(rows))):
        raise ValueError("manifest chunk_index must be 0..n-1")
    return np.array([s for _, s in rows])


def bandwidth_csv_to_scenario(path: str | Path, seed: int = 0) -> Scenario:
    """Per-chunk bandwidth trace (``bandwidth_mbps`` column, or a bare column) to a scenario."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not _is_number(rows[0][-1]):
        header = rows.pop(0)
        col = header.index("bandwidth_mbps") if "bandwidth_mbps" in header else len(header) - 1
    else:
        col = -1
    vals = [float(r[col]) for r in rows]
    return Scenario("abr", np.array(vals).reshape(-1, 1), seed=seed)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True
