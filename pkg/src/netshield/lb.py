"""Discrete-event load-balancing simulator with active-job-time reward.

Each server runs one job at a time from a FIFO queue; service time is
``size / rate``.  The reward of a step is minus the integral of the number of
active jobs over the advanced interval, scaled by ``1 / reward_time_scale``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RewardSpec, RngStream, Scenario, StepRecord, Trajectory, total_reward


def two_tier_rates(n: int = 10, slow: float = 0.25, fast: float = 1.0) -> tuple[float, ...]:
    half = n // 2
    return tuple([slow] * half + [fast] * (n - half))


@dataclass
class LbConfig:
    num_servers: int = 10
    rates: tuple[float, ...] | None = None
    obs_high: float = 500000.0
    reward_time_scale: float = 1.0e4
    discount: float = 1.0

    def __post_init__(self):
        if self.rates is None:
            self.rates = two_tier_rates(self.num_servers)
        self.rates = tuple(float(r) for r in self.rates)
        if len(self.rates) != self.num_servers:
            raise ValueError("rates must have num_servers entries")
        if self.num_servers < 2:
            raise ValueError("need at least two servers")
        if any(not r > 0 for r in self.rates):
            raise ValueError("server rates must be positive")
        if not self.reward_time_scale > 0:
            raise ValueError("reward_time_scale must be positive")

    @property
    def reward(self) -> RewardSpec:
        return RewardSpec("lb", alpha=1.0 / self.reward_time_scale, discount=self.discount)


@dataclass
class Server:
    rate: float
    queue: list = field(default_factory=list)  # (size_kb, arrival_s)
    running: tuple | None = None  # (size_kb, finish_s, arrival_s)

    def copy(self) -> "Server":
        return Server(self.rate, list(self.queue), self.running)

    @property
    def n_jobs(self) -> int:
        return len(self.queue) + (self.running is not None)


@dataclass
class LbState:
    now_s: float
    servers: list
    pending_job: float | None
    # bookkeeping for conservation checks
    arrived_kb: float = 0.0
    served_kb: float = 0.0
    sojourn_sum: float = 0.0
    active_time: float = 0.0

    @property
    def active_jobs(self) -> int:
        return sum(s.n_jobs for s in self.servers) + (self.pending_job is not None)

    @property
    def in_service(self) -> int:
        return sum(s.n_jobs for s in self.servers)

    @property
    def done(self) -> bool:
        return self.pending_job is None

    def copy(self) -> "LbState":
        return LbState(
            self.now_s,
            [s.copy() for s in self.servers],
            self.pending_job,
            self.arrived_kb,
            self.served_kb,
            self.sojourn_sum,
            self.active_time,
        )


def snapshot(state):
    """Independent copy for counterfactual rollouts; shares nothing mutable."""
    return state.copy()


def lb_initial_state(cfg: LbConfig, first_job: float | None, now: float = 0.0) -> LbState:
    return LbState(now, [Server(r) for r in cfg.rates], first_job)


def load_proxy(server: Server, now: float) -> float:
    """Queued sizes plus the remaining seconds of the running job."""
    load = sum(size for size, _ in server.queue)
    if server.running is not None:
        load += max(0.0, server.running[1] - now)
    return load


def lb_observe(state: LbState, cfg: LbConfig) -> np.ndarray:
    """``[L_0, ..., L_{N-1}, J_t]`` clipped to ``obs_high``."""
    job = 0.0 if state.pending_job is None else state.pending_job
    obs = np.array([load_proxy(s, state.now_s) for s in state.servers] + [job])
    return np.minimum(obs, cfg.obs_high)


def _assign(state: LbState, choice: int) -> None:
    size = state.pending_job
    srv = state.servers[choice]
    state.arrived_kb += size
    if srv.running is None:
        srv.running = (size, state.now_s + size / srv.rate, state.now_s)
    else:
        srv.queue.append((size, state.now_s))
    state.pending_job = None


def _advance_clock(state: LbState, until: float) -> float:
    """Process completions up to ``until`` (inf drains); returns the active-job-time integral."""
    area = 0.0
    while True:
        nxt, idx = math.inf, -1
        for i, s in enumerate(state.servers):
            if s.running is not None and s.running[1] < nxt:
                nxt, idx = s.running[1], i
        if idx < 0 or nxt > until:
            break
        area += state.in_service * (nxt - state.now_s)
        state.now_s = nxt
        srv = state.servers[idx]
        size, finish, arrival = srv.running
        state.served_kb += size
        state.sojourn_sum += finish - arrival
        if srv.queue:
            qsize, qarr = srv.queue.pop(0)
            srv.running = (qsize, state.now_s + qsize / srv.rate, qarr)
        else:
            srv.running = None
    if math.isfinite(until):
        area += state.in_service * (until - state.now_s)
        state.now_s = until
    state.active_time += area
    return area


def _lb_advance(state: LbState, choice: int, next_u, cfg: LbConfig) -> tuple[float, float]:
    if state.pending_job is None:
        raise ValueError("episode finished")
    if not 0 <= choice < len(state.servers):
        raise ValueError(f"invalid server index {choice}")
    _assign(state, choice)
    if next_u is None:
        area = _advance_clock(state, math.inf)
    else:
        gap, size = float(next_u[0]), float(next_u[1])
        area = _advance_clock(state, state.now_s + gap)
        state.pending_job = size
    return -area * cfg.reward.alpha, area


def lb_step(state: LbState, choice: int, next_u, cfg: LbConfig) -> tuple[LbState, float, bool]:
    """Dispatch the pending job to ``choice`` and advance to the next arrival.

    ``next_u`` is ``(inter_arrival_s, size_kb)`` of the next job, or ``None`` to
    drain the system after the last arrival.
    """
    new = state.copy()
    reward, _ = _lb_advance(new, choice, next_u, cfg)
    return new, reward, new.done


def lb_run(policy, scenario: Scenario, cfg: LbConfig, record_obs: bool = True) -> Trajectory:
    """Rollout over every arrival, then drain; the drain penalty lands on the last step.

    The first row's inter-arrival gap only offsets the clock (the system is empty).
    """
    if scenario.env != "lb":
        raise ValueError("lb_run needs an lb scenario")
    v = scenario.variables
    T = scenario.horizon
    policy.reset(scenario, cfg)
    steps = []
    if T == 0:
        traj = Trajectory(scenario.scenario_id, policy.name, steps, 0.0)
        traj.info = {"active_time": 0.0}
        return traj
    state = lb_initial_state(cfg, float(v[0, 1]), now=float(v[0, 0]))
    for t in range(T):
        obs = lb_observe(state, cfg)
        t0 = time.perf_counter_ns()
        a = int(policy.decide(obs, state))
        wall = time.perf_counter_ns() - t0
        nxt = v[t + 1] if t + 1 < T else None
        reward, _ = _lb_advance(state, a, nxt, cfg)
        budget = float(nxt[0]) if nxt is not None else float("nan")
        steps.append(StepRecord(obs if record_obs else np.empty(0), a, reward, wall, budget))
    traj = Trajectory(scenario.scenario_id, policy.name, steps)
    traj.total_reward = total_reward(traj.rewards, cfg.discount)
    traj.info = {
        "active_time": state.active_time,
        "sojourn_sum": state.sojourn_sum,
        "arrived_kb": state.arrived_kb,
        "served_kb": state.served_kb,
    }
    return traj


def lb_run_actions(actions, scenario: Scenario, cfg: LbConfig) -> float:
    """Total reward of a fixed (open-loop) dispatch sequence."""
    v = scenario.variables
    T = scenario.horizon
    if T == 0:
        return 0.0
    state = lb_initial_state(cfg, float(v[0, 1]), now=float(v[0, 0]))
    rewards = []
    for t in range(T):
        nxt = v[t + 1] if t + 1 < T else None
        r, _ = _lb_advance(state, int(actions[t]), nxt, cfg)
        rewards.append(r)
    return total_reward(rewards, cfg.discount)


# --------------------------------------------------------------------------
# Scenario sources
# --------------------------------------------------------------------------


def normal_lb_scenario(seed: int, horizon: int = 50) -> Scenario:
    """Poisson arrivals at moderate load with log-normal job sizes."""
    rng = RngStream(seed)
    rows = []
    for _ in range(horizon):
        gap = -0.4 * math.log(1.0 - rng.random())
        size = math.exp(rng.normal(-0.3, 0.6))
        rows.append((gap, size))
    return Scenario("lb", np.array(rows).reshape(-1, 2), seed=seed, family="normal")


def workload_csv_to_scenario(path: str | Path, seed: int = 0) -> Scenario:
    """Workload CSV rows ``arrival_gap_s,size_kb`` to a scenario."""
    rows = []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if not {"arrival_gap_s", "size_kb"} <= set(r.fieldnames or []):
            raise ValueError("workload CSV needs arrival_gap_s,size_kb columns")
        for row in r:
            rows.append((float(row["arrival_gap_s"]), float(row["size_kb"])))
    return Scenario("lb", np.array(rows).reshape(-1, 2), seed=seed)
