"""Built-in flawed controllers standing in for pretrained RL policies."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .abr import abr_features
from .core import ABR_LADDER, Policy


class GreedyOvershoot(Policy):
    """ABR controller that trusts the best throughput seen in its recent history.

    It picks the highest bitrate not above ``overshoot`` times the maximum of
    the last ``window`` throughput samples and ignores the buffer, so after a
    bandwidth drop it keeps requesting chunks sized for the old rate.
    """

    def __init__(self, overshoot: float = 1.0, window: int = 8, name: str = "abr-greedy-overshoot"):
        self.overshoot = overshoot
        self.window = window
        self.name = name
        self._ladder = np.asarray(ABR_LADDER.discrete_values)

    def reset(self, scenario, cfg):
        self._ladder = cfg.ladder_kbps

    def scores(self, obs, state=None):
        obs = np.asarray(obs).reshape(6, -1)
        tput = obs[2, -self.window :] * 8.0
        tput = tput[obs[3, -self.window :] > 0]
        ladder = self._ladder
        target = self.overshoot * 1000.0 * tput.max() if tput.size else ladder[0]
        return np.where(ladder <= target, ladder, -ladder)


class BufferNaive(Policy):
    """ABR controller mapping buffer level linearly onto the ladder with a tiny reservoir."""

    def __init__(self, reservoir: float = 1.0, cushion: float = 8.0, name: str = "abr-buffer-naive"):
        self.reservoir = reservoir
        self.cushion = cushion
        self.name = name
        self._ladder = np.asarray(ABR_LADDER.discrete_values)

    def reset(self, scenario, cfg):
        self._ladder = cfg.ladder_kbps

    def scores(self, obs, state=None):
        ladder = self._ladder
        buf = abr_features(obs)[1]
        frac = (buf - self.reservoir) / (self.cushion - self.reservoir)
        target = ladder[0] + min(max(frac, 0.0), 1.0) * (ladder[-1] - ladder[0])
        return np.where(ladder <= target, ladder, -ladder)


class IndexBiased(Policy):
    """LB controller that treats any load below ``slack`` as idle and prefers low indices.

    Low indices are the slow tier by default, so small-job workloads pile up
    on slow servers while fast ones sit idle.
    """

    def __init__(self, slack: float = 3.0, name: str = "lb-index-biased"):
        self.slack = slack
        self.name = name

    def scores(self, obs, state=None):
        loads = np.asarray(obs, dtype=np.float64)[:-1]
        return -np.maximum(0.0, loads - self.slack) - 1e-3 * np.arange(loads.size)


class ScoreTablePolicy(Policy):
    """Linear score table over the environment's feature vector: ``W @ f + b``."""

    def __init__(self, env: str, weights, bias=None, name: str = "score-table"):
        self.env = env
        self.W = np.asarray(weights, dtype=np.float64)
        self.b = np.zeros(self.W.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
        if self.b.shape != (self.W.shape[0],):
            raise ValueError("bias must have one entry per action")
        self.name = name

    def scores(self, obs, state=None):
        from .envs import features

        return self.W @ features(self.env, obs) + self.b

    @classmethod
    def load(cls, path: str | Path) -> "ScoreTablePolicy":
        d = json.loads(Path(path).read_text())
        return cls(d["env"], d["weights"], d.get("bias"), d.get("name", Path(path).stem))


CONTROLLERS = {
    "abr-greedy-overshoot": GreedyOvershoot,
    "abr-buffer-naive": BufferNaive,
    "lb-index-biased": IndexBiased,
}

CONTROLLER_ENV = {
    "abr-greedy-overshoot": "abr",
    "abr-buffer-naive": "abr",
    "lb-index-biased": "lb",
}


def make_controller(name: str, **params) -> Policy:
    if name in CONTROLLERS:
        return CONTROLLERS[name](**params)
    if Path(name).suffix == ".json" and Path(name).exists():
        return ScoreTablePolicy.load(name)
    raise ValueError(f"unknown controller {name!r}")
