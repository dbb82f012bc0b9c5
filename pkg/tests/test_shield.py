import math

import numpy as np
import pytest
from oracles import masked_argmax

from netshield import envs
from netshield.core import ABR_LADDER
from netshield.discovery import ScenarioConstraints, SearchConfig
from netshield.policies import make_controller
from netshield.portfolio import default_portfolio
from netshield.rulekit import (
    ABSTAIN,
    BACK_OFF,
    PUSH_HARDER,
    Adjudication,
    Consequent,
    Predicate,
    Rule,
)
from netshield.shield import (
    normal_thresholds,
    nudge_continuous,
    protect,
    protect_discrete_abr,
    protect_discrete_lb,
    refine,
)

LADDER = ABR_LADDER.discrete_values


def adj(**kw):
    kw.setdefault("fired", (0,))
    return Adjudication(**kw)


# ---- ABR interval -------------------------------------------------------------


def test_abr_no_bounds_keeps_base():
    scores = [1, 2, 3, 4, 5, 6]
    assert protect_discrete_abr(scores, Adjudication(), LADDER) == (5, False)


def test_abr_upper_bound_masks():
    rng = np.random.default_rng(0)
    for _ in range(200):
        scores = rng.normal(size=6)
        scores[5] = scores.max() + 1.0  # base picks 4300
        a, conflict = protect_discrete_abr(scores, adj(upper=750.0, label=BACK_OFF), LADDER)
        assert not conflict
        assert a == masked_argmax(scores, np.array(LADDER) <= 750.0)
        assert a in (0, 1)


def test_abr_inside_interval_unchanged():
    scores = [6, 5, 4, 3, 2, 1]
    assert protect_discrete_abr(scores, adj(lower=300.0, label=PUSH_HARDER), LADDER) == (0, False)


def test_abr_empty_interval_conflict():
    scores = [0, 0, 0, 0, 0, 1]
    assert protect_discrete_abr(scores, adj(lower=2000.0, upper=800.0), LADDER) == (5, True)


# ---- LB mask ------------------------------------------------------------------


def test_lb_single_allowed():
    scores = np.zeros(10)
    scores[1] = 1.0
    assert protect_discrete_lb(scores, adj(risky=True, allow=frozenset({9}))) == (9, False)


def test_lb_not_risky_keeps_base():
    scores = np.arange(10.0)
    assert protect_discrete_lb(scores, adj(risky=False, allow=frozenset({0}))) == (9, False)


def test_lb_masked_argmax():
    scores = np.zeros(10)
    scores[1], scores[5], scores[9] = 3.0, 2.0, 1.0
    mask = np.zeros(10, dtype=bool)
    mask[[5, 9]] = True
    a, _ = protect_discrete_lb(scores, adj(risky=True, allow=frozenset({5, 9})))
    assert a == 5 == masked_argmax(scores, mask)


def test_lb_empty_mask_conflict():
    assert protect_discrete_lb([1.0, 0.0], adj(risky=True)) == (0, True)


# ---- continuous nudge --------------------------------------------------------


def test_nudge_examples():
    assert nudge_continuous(0.5, BACK_OFF, 0.1, (0, 1)) == pytest.approx(0.4)
    assert nudge_continuous(0.05, BACK_OFF, 0.1, (0, 1)) == 0.0
    assert nudge_continuous(0.5, ABSTAIN, 0.1, (0, 1)) == 0.5
    assert nudge_continuous(0.95, PUSH_HARDER, 0.1, (0, 1)) == 1.0


# ---- protected policy --------------------------------------------------------


def test_empty_rules_bit_identical(abr_cfg):
    base = make_controller("abr-greedy-overshoot")
    prot = protect(make_controller("abr-greedy-overshoot"), [], "abr", abr_cfg)
    for s in range(3):
        sc = envs.normal_scenario("abr", s)
        a = envs.run_policy(base, sc, abr_cfg)
        b = envs.run_policy(prot, sc, abr_cfg)
        assert a.actions == b.actions
        assert a.rewards.tobytes() == b.rewards.tobytes()
        assert all(d.evals == 0 and not d.overridden for d in prot.log)


def test_safe_set_and_ranking(abr_cfg):
    names = envs.feature_names("abr", abr_cfg)
    fid = names.index("Throughput")
    rule = Rule(0, (Predicate(fid, "Throughput", "GT", 0.0),), Consequent("upper", 1200.0), 1.0, 10, 1.0)
    base = make_controller("abr-greedy-overshoot")
    prot = protect(make_controller("abr-greedy-overshoot"), [rule], "abr", abr_cfg)
    sc = envs.normal_scenario("abr", 4)
    traj = envs.run_policy(prot, sc, abr_cfg)
    base.reset(sc, abr_cfg)
    for st in traj.steps:
        adjn = prot.adjudicate(st.obs)
        if adjn.abstain:
            continue
        assert LADDER[st.action] <= 1200.0
        s = base.scores(st.obs)
        assert st.action == masked_argmax(s, np.array(LADDER) <= 1200.0)
    assert any(d.overridden for d in prot.log)


def test_lb_protected_respects_mask(lb_cfg):
    names = envs.feature_names("lb", lb_cfg)
    always = (Predicate(names.index("JobSize"), "JobSize", "GT", -1.0),)
    rules = [Rule(0, always, Consequent("risky", True), 1.0, 5, 2.0),
             Rule(1, always, Consequent("allow", 3), 1.0, 5, 1.0)]
    prot = protect(make_controller("lb-index-biased"), rules, "lb", lb_cfg)
    traj = envs.run_policy(prot, envs.normal_scenario("lb", 0, 20), lb_cfg)
    assert set(traj.actions) == {3}


def test_normal_thresholds_shape(abr_cfg):
    t = normal_thresholds(make_controller("abr-greedy-overshoot"), "abr", abr_cfg, episodes=3)
    assert t.names == envs.feature_names("abr", abr_cfg)
    assert t.values.shape == (len(t.names), 5)
    assert np.all(np.diff(t.values, axis=1) >= 0)


# ---- refinement ---------------------------------------------------------------


def _small_refine(rounds, seed=0):
    cons = ScenarioConstraints.default("abr", 16)
    return refine(make_controller("abr-greedy-overshoot"), default_portfolio("abr", K=3), cons, rounds,
                  SearchConfig(budget=40, population=10, elites=3, segments=16, top_k=4), seed=seed,
                  normal_episodes=5, tau_percentile=5.0)


def test_refine_one_round():
    run = _small_refine(1)
    assert len(run.rounds) == 1
    assert run.rounds[0].round == 0
    assert run.final_rules() is run.rounds[0].rules


def test_refine_dataset_grows_and_deterministic():
    a = _small_refine(2, seed=3)
    b = _small_refine(2, seed=3)
    sizes = [r.dataset_size for r in a.rounds]
    assert sizes == sorted(sizes)
    if a.rounds[1].n_risky > a.rounds[0].n_risky:
        assert sizes[1] > sizes[0]
    assert [r.gap_row() for r in a.rounds] == [r.gap_row() for r in b.rounds]
    assert [r.describe() for r in a.final_rules()] == [r.describe() for r in b.final_rules()]
    assert all(math.isfinite(r.best_R_hat) for r in a.rounds)


def test_refine_rejects_zero_rounds():
    with pytest.raises(ValueError):
        _small_refine(0)
