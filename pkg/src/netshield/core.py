"""Shared domain types: action spaces, scenarios, trajectories, policies, RNG."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

ENVS = ("abr", "lb")

MASK64 = (1 << 64) - 1


# --------------------------------------------------------------------------
# Action spaces and reward specs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionSpace:
    kind: str
    discrete_values: tuple[float, ...] = ()
    continuous_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind == "discrete":
            vals = tuple(float(v) for v in self.discrete_values)
            if not vals:
                raise ValueError("discrete action space needs at least one value")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError("discrete values must be strictly ascending")
            object.__setattr__(self, "discrete_values", vals)
        elif self.kind == "continuous":
            if self.continuous_bounds is None:
                raise ValueError("continuous action space needs bounds")
            lo, hi = self.continuous_bounds
            if not lo < hi:
                raise ValueError("a_min must be < a_max")
        else:
            raise ValueError(f"unknown action space kind {self.kind!r}")

    @property
    def n(self) -> int:
        return len(self.discrete_values)

    def value(self, index: int) -> float:
        return self.discrete_values[index]

    @classmethod
    def servers(cls, n: int) -> "ActionSpace":
        return cls("discrete", tuple(float(i) for i in range(n)))


BITRATE_LADDER_KBPS = (300.0, 750.0, 1200.0, 1850.0, 2850.0, 4300.0)
ABR_LADDER = ActionSpace("discrete", BITRATE_LADDER_KBPS)


@dataclass(frozen=True)
class RewardSpec:
    """Reward coefficients.  ``gamma_coef`` is the ABR smoothness weight and
    ``discount`` the per-step discount; they are unrelated."""

    env: str
    alpha: float
    beta: float = 0.0
    gamma_coef: float = 0.0
    discount: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")

    @classmethod
    def default(cls, env: str, reward_time_scale: float = 1.0e4) -> "RewardSpec":
        if env == "abr":
            return cls("abr", alpha=1e-3, beta=4.3, gamma_coef=1e-3)
        if env == "lb":
            return cls("lb", alpha=1.0 / reward_time_scale)
        raise ValueError(f"unknown env {env!r}")


def total_reward(rewards: Iterable[float], discount: float = 1.0) -> float:
    """Discounted sum of step rewards, ``sum_t discount**t * r_t``."""
    if not 0.0 < discount <= 1.0:
        raise ValueError("discount must lie in (0, 1]")
    total = 0.0
    weight = 1.0
    for r in rewards:
        r = float(r)
        if not math.isfinite(r):
            raise ValueError("non-finite reward")
        total += weight * r
        if discount != 1.0:
            weight *= discount
    return total


# --------------------------------------------------------------------------
# Canonical JSON
# --------------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError("non-finite value in canonical JSON")
    s = "%.17g" % x
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def canonical_json(obj: Any) -> str:
    """Compact JSON with sorted keys and 17-significant-digit floats."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        items = sorted(obj.items())
        return "{" + ",".join(json.dumps(str(k)) + ":" + canonical_json(v) for k, v in items) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(canonical_json(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# --------------------------------------------------------------------------
# Scenarios
# --------------------------------------------------------------------------


@dataclass
class Scenario:
    """A finite sequence of exogenous resource vectors driving one episode.

    ABR rows hold one bandwidth (Mbps) per chunk; LB rows hold
    ``(inter_arrival_s, job_size_kb)`` per arrival.
    """

    env: str
    variables: np.ndarray
    seed: int = 0
    family: str = ""

    def __post_init__(self):
        if self.env not in ENVS:
            raise ValueError(f"unknown env {self.env!r}")
        width = 1 if self.env == "abr" else 2
        v = np.asarray(self.variables, dtype=np.float64)
        if v.size == 0:
            v = v.reshape(0, width)
        if v.ndim == 1 and width == 1:
            v = v.reshape(-1, 1)
        if v.ndim != 2 or v.shape[1] != width:
            raise ValueError(f"{self.env} scenario rows must have {width} component(s)")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("scenario variables must be finite and nonnegative")
        v = v.copy()
        v.flags.writeable = False
        self.variables = v
        self.seed = int(self.seed) & MASK64

    @property
    def horizon(self) -> int:
        return int(self.variables.shape[0])

    def to_dict(self) -> dict:
        d = {
            "env": self.env,
            "horizon": self.horizon,
            "seed": self.seed,
            "variables": self.variables.tolist(),
        }
        if self.family:
            d["family"] = self.family
        return d

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        unknown = set(d) - {"env", "horizon", "seed", "variables", "family"}
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        sc = cls(d["env"], d["variables"], seed=d.get("seed", 0), family=d.get("family", ""))
        if "horizon" in d and int(d["horizon"]) != sc.horizon:
            raise ValueError("horizon does not match number of variables")
        return sc

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))

    @property
    def scenario_id(self) -> str:
        body = canonical_json({"env": self.env, "variables": self.variables.tolist()})
        return hashlib.sha1(body.encode()).hexdigest()[:12]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_json(Path(path).read_text())


def load_scenario_dir(path: str | Path) -> list[Scenario]:
    return [Scenario.load(p) for p in sorted(Path(path).glob("*.json"))]


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


@dataclass
class StepRecord:
    obs: np.ndarray
    action: float
    reward: float
    wall_ns: int = 0
    budget_s: float = float("nan")


@dataclass
class Trajectory:
    scenario_id: str
    policy_name: str
    steps: list[StepRecord] = field(default_factory=list)
    total_reward: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps], dtype=np.float64)

    @property
    def actions(self) -> list:
        return [s.action for s in self.steps]

    def write_csv(self, path: str | Path) -> None:
        width = max((np.asarray(s.obs).size for s in self.steps), default=0)
        header = ["step"] + [f"obs_{i}" for i in range(width)] + ["action", "reward", "wall_ns", "budget_s"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, s in enumerate(self.steps):
                flat = np.asarray(s.obs, dtype=np.float64).ravel()
                w.writerow(
                    [t]
                    + [repr(float(x)) for x in flat]
                    + [repr(s.action), repr(float(s.reward)), int(s.wall_ns), repr(float(s.budget_s))]
                )

    @classmethod
    def read_csv(cls, path: str | Path, scenario_id: str = "", policy_name: str = "",
                 discount: float = 1.0) -> "Trajectory":
        steps = []
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            n_obs = sum(1 for h in header if h.startswith("obs_"))
            for row in r:
                obs = np.array([float(x) for x in row[1 : 1 + n_obs]])
                action = float(row[1 + n_obs])
                if action.is_integer():
                    action = int(action)
                steps.append(
                    StepRecord(obs, action, float(row[2 + n_obs]), int(row[3 + n_obs]), float(row[4 + n_obs]))
                )
        traj = cls(scenario_id, policy_name, steps)
        traj.total_reward = total_reward(traj.rewards, discount)
        return traj


# --------------------------------------------------------------------------
# Policies
# --------------------------------------------------------------------------


class Policy:
    """Discrete-action decision maker.

    ``scores`` gives the preference over actions; ``decide`` is its
    lowest-index argmax.  ``state`` carries the simulator state for
    references that need more than the observation (e.g. clairvoyant
    oracles); controllers must ignore it.
    """

    name = "policy"
    kind = "controller"

    def reset(self, scenario: Scenario, cfg: Any) -> None:
        pass

    def scores(self, obs: np.ndarray, state: Any = None) -> np.ndarray:
        raise NotImplementedError

    def decide(self, obs: np.ndarray, state: Any = None) -> int:
        return int(np.argmax(self.scores(obs, state)))

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


# --------------------------------------------------------------------------
# Deterministic RNG: xoshiro256** seeded through splitmix64
# --------------------------------------------------------------------------


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step; returns ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def derive_seed(seed: int, *keys: int | str) -> int:
    """Mix ``keys`` into ``seed`` to obtain an independent child seed."""
    h = int(seed) & MASK64
    for k in keys:
        if isinstance(k, str):
            k = int.from_bytes(hashlib.sha1(k.encode()).digest()[:8], "little")
        h, out = splitmix64(h ^ (int(k) & MASK64))
        h = out
    return h


class RngStream:
    """xoshiro256** generator; identical seeds give identical streams everywhere."""

    algorithm = "xoshiro256**/splitmix64"

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK64
        sm = self.seed
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.state = s
        self._gauss = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.state
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.state = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * self.random()

    def integers(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        if self._gauss is not None:
            z, self._gauss = self._gauss, None
            return mu + sigma * z
        u1 = 1.0 - self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._gauss = r * math.sin(2.0 * math.pi * u2)
        return mu + sigma * r * math.cos(2.0 * math.pi * u2)

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.random() for _ in range(n)])

    def normals(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)])

    def choice(self, seq: Sequence):
        return seq[self.integers(len(seq))]


def rng_new(seed: int) -> RngStream:
    return RngStream(seed)


def rng_next(stream: RngStream) -> int:
    return stream.next_u64()
