"""Uniform access to the two simulators (rollouts, features, snapshots)."""

from __future__ import annotations

import math

import numpy as np

from . import abr, lb
from .core import Scenario, Trajectory
from .rulekit import derive_lb_features, lb_feature_names


def default_config(env: str):
    if env == "abr":
        return abr.AbrConfig()
    if env == "lb":
        return lb.LbConfig()
    raise ValueError(f"unknown env {env!r}")


def run_policy(policy, scenario: Scenario, cfg=None, record_obs: bool = True) -> Trajectory:
    cfg = default_config(scenario.env) if cfg is None else cfg
    if scenario.env == "abr":
        return abr.abr_run(policy, scenario, cfg, record_obs=record_obs)
    return lb.lb_run(policy, scenario, cfg, record_obs=record_obs)


def features(env: str, obs, cfg=None) -> np.ndarray:
    if env == "abr":
        return abr.abr_features(obs, cfg)
    return derive_lb_features(obs)


def feature_names(env: str, cfg=None) -> list[str]:
    if env == "abr":
        return list(abr.ABR_FEATURES)
    n = (cfg or lb.LbConfig()).num_servers
    return lb_feature_names(n)


def n_actions(env: str, cfg) -> int:
    return cfg.ladder.n if env == "abr" else cfg.num_servers


def action_values(env: str, cfg) -> np.ndarray | None:
    """Ordered action magnitudes, or ``None`` when actions are unordered."""
    return cfg.ladder_kbps if env == "abr" else None


def normal_scenario(env: str, seed: int, horizon: int | None = None) -> Scenario:
    if env == "abr":
        return abr.normal_abr_scenario(seed, 48 if horizon is None else horizon)
    return lb.normal_lb_scenario(seed, 50 if horizon is None else horizon)


def replay(policy, scenario: Scenario, cfg) -> list[tuple]:
    """Closed-loop rollout that keeps a snapshot of the state before every decision.

    Returns ``[(state_before, obs, action, reward), ...]``.
    """
    policy.reset(scenario, cfg)
    out = []
    T = scenario.horizon
    v = scenario.variables
    if T == 0:
        return out
    if scenario.env == "abr":
        state = abr.abr_initial_state(T, cfg)
        for t in range(T):
            obs = abr.abr_observe(state, cfg)
            a = int(policy.decide(obs, state))
            before = state.copy()
            r, _ = abr._advance(state, a, float(v[t, 0]), cfg)
            out.append((before, obs, a, r))
    else:
        state = lb.lb_initial_state(cfg, float(v[0, 1]), now=float(v[0, 0]))
        for t in range(T):
            obs = lb.lb_observe(state, cfg)
            a = int(policy.decide(obs, state))
            before = lb.snapshot(state)
            nxt = v[t + 1] if t + 1 < T else None
            r, _ = lb._lb_advance(state, a, nxt, cfg)
            out.append((before, obs, a, r))
    return out


def one_step_value(scenario: Scenario, t: int, state, action: int, cfg) -> float:
    """Value of taking ``action`` in a snapshot of ``state`` at step ``t``.

    ABR: the step reward.  LB: minus the scaled active-job time until the
    system drains with no further arrivals, so the value captures the full
    delay the dispatch imposes.
    """
    if scenario.env == "abr":
        s = state.copy()
        r, _ = abr._advance(s, int(action), float(scenario.variables[t, 0]), cfg)
        return r
    s = lb.snapshot(state)
    lb._assign(s, int(action))
    area = lb._advance_clock(s, math.inf)
    return -area * cfg.reward.alpha
