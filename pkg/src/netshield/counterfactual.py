"""Turn paired controller/reference rollouts into labeled training states."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .core import ABR_LADDER, Scenario
from .portfolio import Portfolio, best_reference
from .rulekit import ABSTAIN, BACK_OFF, PUSH_HARDER, nearest_rank


@dataclass
class StepPair:
    t: int
    state: object
    obs: np.ndarray
    ctrl_action: int
    ref_action: int
    ref_closed_loop_action: int | None = None


@dataclass
class LabeledState:
    scenario_id: str
    t: int
    features: np.ndarray
    ctrl_action: int
    ref_action: int
    step_regret: float
    risky: bool
    label: str
    allow_mask: tuple | None = None
    round: int = 0

    def __post_init__(self):
        if not self.risky and self.label != ABSTAIN:
            raise ValueError("non-risky states must be labeled ABSTAIN")


def align(ctrl_replay, ref_traj, reference=None) -> list[StepPair]:
    """Pair controller steps with reference actions by step index.

    ``ctrl_replay`` comes from :func:`envs.replay`.  When ``reference`` is
    given (already reset for the scenario) it re-decides on a snapshot of the
    controller's state; otherwise the reference's own closed-loop action is used.
    """
    if ref_traj is not None and len(ref_traj.steps) != len(ctrl_replay):
        raise ValueError("horizon mismatch between controller and reference")
    pairs = []
    for t, (state, obs, a, _) in enumerate(ctrl_replay):
        closed = None if ref_traj is None else int(ref_traj.steps[t].action)
        if reference is not None:
            ref_a = int(reference.decide(obs, state.copy()))
        elif closed is not None:
            ref_a = closed
        else:
            raise ValueError("need a reference trajectory or a reference policy")
        pairs.append(StepPair(t, state, obs, int(a), ref_a, closed))
    return pairs


def direction(ctrl_action: int, ref_action: int, values) -> str:
    if values is None or ctrl_action == ref_action:
        return ABSTAIN
    if values[ctrl_action] > values[ref_action]:
        return BACK_OFF
    if values[ctrl_action] < values[ref_action]:
        return PUSH_HARDER
    return ABSTAIN


def step_regret(pair: StepPair, scenario: Scenario, cfg) -> float:
    """One-step counterfactual advantage of the reference action over the controller's."""
    if pair.ctrl_action == pair.ref_action:
        return 0.0
    v_ref = envs.one_step_value(scenario, pair.t, pair.state, pair.ref_action, cfg)
    v_ctrl = envs.one_step_value(scenario, pair.t, pair.state, pair.ctrl_action, cfg)
    return v_ref - v_ctrl


def label_step(pair: StepPair, regret: float, tau: float, values, scenario_id: str = "",
               features=None, allow_mask=None, round_id: int = 0) -> LabeledState:
    risky = regret > tau
    label = direction(pair.ctrl_action, pair.ref_action, values) if risky else ABSTAIN
    return LabeledState(
        scenario_id,
        pair.t,
        np.asarray(features if features is not None else pair.obs, dtype=np.float64).ravel(),
        pair.ctrl_action,
        pair.ref_action,
        float(regret),
        bool(risky),
        label,
        allow_mask,
        round_id,
    )


REGRET_NOISE = 1e-9


def default_tau(regrets, percentile: float = 75.0) -> float:
    """Nearest-rank percentile of the positive step regrets (0 if none).

    Regrets within ``REGRET_NOISE`` of zero are rounding residue from
    differencing two equal rollouts and do not count as positive.
    """
    pos = np.asarray([r for r in regrets if r > REGRET_NOISE], dtype=np.float64)
    return nearest_rank(pos, percentile) if pos.size else 0.0


@dataclass
class CounterfactualDataset:
    env: str
    feature_names: list
    rows: list = field(default_factory=list)
    action_values: tuple | None = None
    provenance: dict = field(default_factory=dict)  # scenario_id -> round
    normal_stats_ref: str = ""
    taus: dict = field(default_factory=dict)  # round -> risk threshold

    def __post_init__(self):
        if self.action_values is None and self.env == "abr":
            self.action_values = ABR_LADDER.discrete_values
        self._keys = {(r.scenario_id, r.t) for r in self.rows}

    def __len__(self):
        return len(self.rows)

    def add(self, row: LabeledState) -> bool:
        key = (row.scenario_id, row.t)
        if key in self._keys:
            return False
        self._keys.add(key)
        self.rows.append(row)
        self.provenance.setdefault(row.scenario_id, row.round)
        return True

    def extend(self, rows) -> int:
        return sum(self.add(r) for r in rows)

    def merged(self, other: "CounterfactualDataset") -> "CounterfactualDataset":
        out = CounterfactualDataset(self.env, list(self.feature_names), list(self.rows), self.action_values,
                                    dict(self.provenance), self.normal_stats_ref, dict(self.taus))
        out.extend(other.rows)
        return out

    def feature_matrix(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, len(self.feature_names)))
        return np.vstack([r.features for r in self.rows])

    def label_array(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=object)

    def risky_array(self) -> np.ndarray:
        return np.array([r.risky for r in self.rows], dtype=bool)

    def mask_array(self) -> np.ndarray:
        width = max((len(r.allow_mask) for r in self.rows if r.allow_mask is not None), default=0)
        out = np.zeros((len(self.rows), width), dtype=bool)
        for i, r in enumerate(self.rows):
            if r.allow_mask is not None:
                out[i, : len(r.allow_mask)] = r.allow_mask
        return out

    def ref_value_array(self) -> np.ndarray:
        if self.action_values is None:
            return np.array([float(r.ref_action) for r in self.rows])
        return np.array([self.action_values[r.ref_action] for r in self.rows], dtype=np.float64)

    # ---- CSV -------------------------------------------------------------

    def to_csv(self, path: str | Path) -> None:
        header = ["scenario_id", "t"] + list(self.feature_names) + [
            "ctrl_action", "ref_action", "step_regret", "risky", "label", "mask", "round"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self.rows:
                mask = "" if r.allow_mask is None else "".join("1" if b else "0" for b in r.allow_mask)
                w.writerow(
                    [r.scenario_id, r.t]
                    + [repr(float(x)) for x in r.features]
                    + [r.ctrl_action, r.ref_action, repr(float(r.step_regret)), int(r.risky), r.label, mask, r.round]
                )

    @classmethod
    def from_csv(cls, path: str | Path, env: str | None = None) -> "CounterfactualDataset":
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            names = header[2:-7]
            rows = []
            for row in rd:
                feats = np.array([float(x) for x in row[2:-7]])
                ctrl, ref, reg, risky, label, mask, rnd = row[-7:]
                rows.append(
                    LabeledState(
                        row[0], int(row[1]), feats, int(ctrl), int(ref), float(reg), risky == "1", label,
                        tuple(c == "1" for c in mask) if mask else None, int(rnd),
                    )
                )
        if env is None:
            env = "lb" if any(r.allow_mask is not None for r in rows) or "JobSize" in names else "abr"
        ds = cls(env, names)
        ds.extend(rows)
        return ds


def analyze_scenario(scenario: Scenario, controller, portfolio: Portfolio, cfg, base=None):
    """Replay one scenario; returns ``(pairs, regrets, masks, best_name)``.

    With ``base`` the states come from ``controller``'s closed loop but the
    judged action is what ``base`` would have done there (relabeling a
    protected controller's visits with its unprotected core's choices).
    """
    best_name, _, _ = best_reference(portfolio, scenario, cfg)
    best = next(m for m in portfolio.members if m.name == best_name)
    ctrl_replay = envs.replay(controller, scenario, cfg)
    if base is not None:
        base.reset(scenario, cfg)
        ctrl_replay = [(s, o, int(base.decide(o, s.copy())), r) for s, o, _, r in ctrl_replay]
    ref_traj = envs.run_policy(best, scenario, cfg, record_obs=False)
    best.reset(scenario, cfg)
    pairs = align(ctrl_replay, ref_traj, reference=best)
    regrets = [step_regret(p, scenario, cfg) for p in pairs]
    masks = None
    if scenario.env == "lb":
        for m in portfolio.members:
            m.reset(scenario, cfg)
        n = cfg.num_servers
        masks = []
        for p in pairs:
            bits = [False] * n
            for m in portfolio.members:
                bits[int(m.decide(p.obs, p.state.copy()))] = True
            masks.append(tuple(bits))
    return pairs, regrets, masks, best_name


def build_dataset(scenarios, controller, portfolio: Portfolio, cfg, tau: float | None = None,
                  round_id: int = 0, dataset: CounterfactualDataset | None = None,
                  base=None, tau_percentile: float = 75.0, anchors=()) -> CounterfactualDataset:
    """Replay, align and label every step of ``scenarios``; appends to ``dataset`` if given.

    ``anchors`` (typically normal traces) are labeled with the same threshold
    but do not take part in estimating it, so they contribute evidence of
    where not to intervene without diluting the risk cut-off.
    """
    env = portfolio.env
    names = envs.feature_names(env, cfg)
    values = envs.action_values(env, cfg)
    analyzed = [analyze_scenario(sc, controller, portfolio, cfg, base) for sc in scenarios]
    if tau is None:
        tau = default_tau([r for _, regrets, _, _ in analyzed for r in regrets], tau_percentile)
    scenarios = list(scenarios) + list(anchors)
    analyzed += [analyze_scenario(sc, controller, portfolio, cfg, base) for sc in anchors]
    out = CounterfactualDataset(env, names, action_values=None if values is None else tuple(values))
    if dataset is not None:
        out = dataset.merged(out)
    for sc, (pairs, regrets, masks, _) in zip(scenarios, analyzed):
        sid = sc.scenario_id
        for i, (p, reg) in enumerate(zip(pairs, regrets)):
            feats = envs.features(env, p.obs, cfg)
            out.add(label_step(p, reg, tau, values, sid, feats, None if masks is None else masks[i], round_id))
    out.taus[round_id] = tau
    return out
