"""Rule-driven action adjustment at inference time and the search-and-protect loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import envs
from .core import Policy, derive_seed
from .counterfactual import CounterfactualDataset, build_dataset
from .discovery import ScenarioConstraints, SearchConfig, evaluate_regret, search
from .portfolio import Portfolio
from .rulekit import (
    BACK_OFF,
    PUSH_HARDER,
    Adjudication,
    PredicateTrie,
    RuleParams,
    ThresholdTable,
    build_trie,
    build_vocabulary,
    fit_percentiles,
    learn_rules,
    match,
)


def _masked_argmax(scores, mask) -> int:
    s = np.where(mask, np.asarray(scores, dtype=np.float64), -np.inf)
    return int(np.argmax(s))


def protect_discrete_abr(scores, adj: Adjudication, ladder) -> tuple[int, bool]:
    """Pick the best-scored bitrate inside ``[adj.lower, adj.upper]``.

    Returns ``(action, conflict)``; an empty interval leaves the base action
    and reports a conflict.
    """
    scores = np.asarray(scores, dtype=np.float64)
    base = int(np.argmax(scores))
    if adj.abstain:
        return base, False
    ladder = np.asarray(ladder, dtype=np.float64)
    safe = (ladder >= adj.lower) & (ladder <= adj.upper)
    if not safe.any():
        return base, True
    if safe[base]:
        return base, False
    return _masked_argmax(scores, safe), False


def protect_discrete_lb(scores, adj: Adjudication) -> tuple[int, bool]:
    """Restrict a risky dispatch to the allowed servers; ``(action, conflict)``."""
    scores = np.asarray(scores, dtype=np.float64)
    base = int(np.argmax(scores))
    if not adj.risky:
        return base, False
    mask = np.zeros(scores.size, dtype=bool)
    for i in adj.allow:
        if 0 <= i < scores.size:
            mask[i] = True
    if not mask.any():
        return base, True
    if mask[base]:
        return base, False
    return _masked_argmax(scores, mask), False


def nudge_continuous(a: float, label: str, delta: float, bounds) -> float:
    """Shift a scalar action one step of ``delta`` in the label's direction, clipped to ``bounds``."""
    lo, hi = bounds
    if label == BACK_OFF:
        return min(max(a - delta, lo), hi)
    if label == PUSH_HARDER:
        return min(max(a + delta, lo), hi)
    return a


@dataclass
class DecisionLog:
    evals: int
    shield_ns: int
    overridden: bool
    conflict: bool


class ProtectedPolicy(Policy):
    """Base controller whose discrete choice is filtered through matched rules.

    The base stays the decision maker: when no rule fires its action is
    returned untouched, otherwise its top-scored action inside the safe set.
    """

    def __init__(self, base: Policy, trie: PredicateTrie, env: str, cfg=None, delta: float = 0.1,
                 name: str | None = None):
        self.base = base
        self.trie = trie
        self.env = env
        self.cfg = envs.default_config(env) if cfg is None else cfg
        self.delta = delta
        self.name = name or f"{base.name}+shield"
        self.log: list[DecisionLog] = []

    def reset(self, scenario, cfg) -> None:
        self.cfg = cfg
        self.base.reset(scenario, cfg)
        self.log = []

    def adjudicate(self, obs) -> Adjudication:
        return match(self.trie, envs.features(self.env, obs, self.cfg))

    def scores(self, obs, state=None):
        s = np.asarray(self.base.scores(obs, state), dtype=np.float64)
        a = self.decide(obs, state, _scores=s)
        if a == int(np.argmax(s)):
            return s
        out = np.full(s.shape, -np.inf)
        out[a] = s[a]
        return out

    def decide(self, obs, state=None, _scores=None) -> int:
        s = self.base.scores(obs, state) if _scores is None else _scores
        t0 = time.perf_counter_ns()
        adj = self.adjudicate(obs)
        if self.env == "abr":
            a, conflict = protect_discrete_abr(s, adj, envs.action_values("abr", self.cfg))
        else:
            a, conflict = protect_discrete_lb(s, adj)
        base_a = int(np.argmax(s))
        self.log.append(DecisionLog(adj.evals, time.perf_counter_ns() - t0, a != base_a, conflict))
        return a

    @property
    def conflicts(self) -> int:
        return sum(d.conflict for d in self.log)


def protect(base: Policy, rules, env: str, cfg=None, delta: float = 0.1) -> ProtectedPolicy:
    return ProtectedPolicy(base, build_trie(rules), env, cfg, delta)


# --------------------------------------------------------------------------
# Refinement loop
# --------------------------------------------------------------------------


def normal_scenarios(env: str, episodes: int, seed: int = 0, horizon: int | None = None) -> list:
    return [envs.normal_scenario(env, derive_seed(seed, "normal", i), horizon) for i in range(episodes)]


def normal_thresholds(controller, env: str, cfg, episodes: int = 20, seed: int = 0,
                      horizon: int | None = None) -> ThresholdTable:
    """Feature percentiles of the controller's own observations on normal traces."""
    rows = []
    for sc in normal_scenarios(env, episodes, seed, horizon):
        traj = envs.run_policy(controller, sc, cfg, record_obs=True)
        rows.extend(envs.features(env, st.obs, cfg) for st in traj.steps)
    return fit_percentiles(np.array(rows), envs.feature_names(env, cfg))


@dataclass
class RoundResult:
    round: int
    rules: list
    reports: list
    dataset_size: int
    best_R_hat: float
    mean_R_hat: float
    protected_mean_R_hat: float
    n_risky: int

    def gap_row(self) -> dict:
        return {"round": self.round, "mean_R_hat": self.mean_R_hat, "max_R_hat": self.best_R_hat,
                "dataset_size": self.dataset_size}


@dataclass
class RefinementRun:
    rounds: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    thresholds: ThresholdTable | None = None
    dataset: CounterfactualDataset | None = None

    def final_rules(self):
        return self.rounds[-1].rules if self.rounds else []


def refine(controller: Policy, portfolio: Portfolio, cons: ScenarioConstraints, rounds: int,
           scfg: SearchConfig | None = None, seed: int = 0, cfg=None, rule_params: RuleParams | None = None,
           thresholds: ThresholdTable | None = None, normal_episodes: int = 20, delta: float = 0.1,
           tau: float | None = None, tau_percentile: float = 75.0, normal_anchors: bool = True,
           on_round=None) -> RefinementRun:
    """Alternate discovery against the currently protected controller with relabeling and relearning.

    Round ``k`` searches with seed ``seed + k``.  Labels always judge the
    unprotected controller's choice on the visited states, and rules are
    relearned from scratch on the cumulative dataset.  With ``normal_anchors``
    the controller's normal traces are labeled in round 0 as evidence of
    where not to intervene.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    env = portfolio.env
    cfg = envs.default_config(env) if cfg is None else cfg
    scfg = scfg or SearchConfig()
    rule_params = rule_params or RuleParams()
    if thresholds is None:
        thresholds = normal_thresholds(controller, env, cfg, normal_episodes, seed, cons.horizon)
    vocab = build_vocabulary(thresholds)
    run = RefinementRun(config={"rounds": rounds, "seed": seed}, thresholds=thresholds)
    anchors = normal_scenarios(env, normal_episodes, seed, cons.horizon) if normal_anchors else []
    dataset = None
    current: Policy = controller
    for k in range(rounds):
        res = search(current, portfolio, cons, scfg, seed=seed + k, cfg=cfg)
        scenarios = [r.scenario for r in res.reports]
        dataset = build_dataset(scenarios, current, portfolio, cfg, tau=tau, round_id=k, dataset=dataset,
                                base=None if current is controller else controller,
                                tau_percentile=tau_percentile, anchors=anchors if k == 0 else ())
        rules = learn_rules(dataset, vocab, rule_params)
        protected = protect(controller, rules, env, cfg, delta)
        prot_gaps = [evaluate_regret(protected, portfolio, sc, cfg).R_hat for sc in scenarios]
        r_hats = [r.R_hat for r in res.reports]
        rr = RoundResult(
            k, rules, res.reports, len(dataset),
            max(r_hats) if r_hats else -math.inf,
            float(np.mean(r_hats)) if r_hats else 0.0,
            float(np.mean(prot_gaps)) if prot_gaps else 0.0,
            int(dataset.risky_array().sum()),
        )
        run.rounds.append(rr)
        if on_round is not None:
            on_round(rr, dataset)
        current = protected
    run.dataset = dataset
    return run

