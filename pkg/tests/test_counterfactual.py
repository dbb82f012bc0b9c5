import numpy as np
import pytest

from netshield import envs
from netshield.core import ABR_LADDER, Scenario
from netshield.counterfactual import (
    CounterfactualDataset,
    StepPair,
    align,
    analyze_scenario,
    build_dataset,
    default_tau,
    label_step,
)
from netshield.policies import make_controller
from netshield.portfolio import BufferBased, ConstantBitrate, Portfolio, default_portfolio
from netshield.rulekit import ABSTAIN, BACK_OFF, PUSH_HARDER

LADDER = ABR_LADDER.discrete_values


def pair(ctrl, ref):
    return StepPair(0, None, np.zeros(3), ctrl, ref)


def test_label_directions():
    assert label_step(pair(5, 1), 10.0, 1.0, LADDER).label == BACK_OFF  # 4300 vs 750
    assert label_step(pair(0, 2), 10.0, 1.0, LADDER).label == PUSH_HARDER  # 300 vs 1200
    assert label_step(pair(3, 3), 10.0, 1.0, LADDER).label == ABSTAIN
    row = label_step(pair(5, 1), 0.5, 1.0, LADDER)
    assert not row.risky and row.label == ABSTAIN
    assert label_step(pair(2, 0), 10.0, 1.0, None).label == ABSTAIN  # unordered


def test_default_tau():
    assert default_tau([0.0, -1.0]) == 0.0
    assert default_tau([0, 1, 2, 3, 4]) == 3
    assert default_tau([1, 2, 3, 4], 25) == 1


def test_align_identical_and_empty(abr_cfg):
    sc = envs.normal_scenario("abr", 2, 10)
    pol = ConstantBitrate(2)
    rep = envs.replay(pol, sc, abr_cfg)
    traj = envs.run_policy(ConstantBitrate(2), sc, abr_cfg)
    pairs = align(rep, traj)
    assert all(p.ctrl_action == p.ref_action for p in pairs)
    empty = Scenario("abr", [])
    assert align(envs.replay(pol, empty, abr_cfg), envs.run_policy(pol, empty, abr_cfg)) == []


def test_align_horizon_mismatch(abr_cfg):
    rep = envs.replay(ConstantBitrate(0), envs.normal_scenario("abr", 1, 5), abr_cfg)
    traj = envs.run_policy(ConstantBitrate(0), envs.normal_scenario("abr", 1, 6), abr_cfg)
    with pytest.raises(ValueError, match="horizon"):
        align(rep, traj)


def test_reference_redecides_on_controller_state(abr_cfg):
    # aggressive controller drains the buffer; the buffer-based reference reacts
    # to that buffer rather than its own fuller one
    sc = Scenario("abr", [1.0] * 20)
    ref = BufferBased()
    traj = envs.run_policy(ref, sc, abr_cfg)
    ref.reset(sc, abr_cfg)
    pairs = align(envs.replay(ConstantBitrate(5), sc, abr_cfg), traj, reference=ref)
    diverged = [p for p in pairs if p.ref_action != p.ref_closed_loop_action]
    assert diverged
    check = BufferBased()
    check.reset(sc, abr_cfg)
    for p in pairs:
        assert p.ref_action == check.decide(p.obs, p.state.copy())


def test_zero_regret_all_abstain(abr_cfg):
    pf = Portfolio([ConstantBitrate(1, name="same")], "abr")
    ds = build_dataset([envs.normal_scenario("abr", s, 10) for s in range(3)], ConstantBitrate(1), pf, abr_cfg)
    assert len(ds) == 30
    assert set(ds.label_array()) == {ABSTAIN}


def _abr_dataset(abr_cfg, seeds, round_id=0, dataset=None, **kw):
    scen = [Scenario("abr", np.where(np.arange(12) % 3 == 2, 0.2, 30.0 + s), seed=s, family="t") for s in seeds]
    return build_dataset(scen, make_controller("abr-greedy-overshoot"), default_portfolio("abr", K=3), abr_cfg,
                         round_id=round_id, dataset=dataset, **kw)


def test_invariants_and_rounds(abr_cfg):
    d0 = _abr_dataset(abr_cfg, [0])
    tau = d0.taus[0]
    assert any(r.risky for r in d0.rows)
    for r in d0.rows:
        assert (r.step_regret <= tau) == (not r.risky)
        if not r.risky:
            assert r.label == ABSTAIN
        if r.ctrl_action == r.ref_action:
            assert r.label == ABSTAIN
    d1 = _abr_dataset(abr_cfg, [1], round_id=1, dataset=d0)
    assert {r.round for r in d1.rows} == {0, 1}
    assert len(d1) == 2 * len(d0)


def test_duplicate_scenario_deduplicated(abr_cfg):
    d0 = _abr_dataset(abr_cfg, [0])
    again = _abr_dataset(abr_cfg, [0, 0], dataset=d0)
    assert len(again) == len(d0)


def test_anchors_do_not_move_tau(abr_cfg):
    plain = _abr_dataset(abr_cfg, [0])
    anchors = [envs.normal_scenario("abr", 9, 12)]
    anchored = _abr_dataset(abr_cfg, [0], anchors=anchors)
    assert anchored.taus[0] == plain.taus[0]
    assert len(anchored) == len(plain) + 12


def test_lb_masks_sound(lb_cfg):
    sc = envs.normal_scenario("lb", 4, 30)
    pf = default_portfolio("lb")
    ds = build_dataset([sc], make_controller("lb-index-biased"), pf, lb_cfg)
    assert all(r.allow_mask is not None and any(r.allow_mask) for r in ds.rows)
    assert all(r.label == ABSTAIN for r in ds.rows)
    pairs, _, masks, best = analyze_scenario(sc, make_controller("lb-index-biased"), pf, lb_cfg)
    for p, m in zip(pairs, masks):
        assert m[p.ref_action]


def test_csv_roundtrip(tmp_path, abr_cfg, lb_cfg):
    ds = _abr_dataset(abr_cfg, [0, 1])
    ds.to_csv(tmp_path / "d.csv")
    back = CounterfactualDataset.from_csv(tmp_path / "d.csv")
    assert back.env == "abr" and len(back) == len(ds)
    for a, b in zip(ds.rows, back.rows):
        assert (a.scenario_id, a.t, a.label, a.risky, a.step_regret) == (b.scenario_id, b.t, b.label, b.risky, b.step_regret)
        assert np.array_equal(a.features, b.features)
    lb = build_dataset([envs.normal_scenario("lb", 1, 10)], make_controller("lb-index-biased"),
                       default_portfolio("lb"), lb_cfg)
    lb.to_csv(tmp_path / "l.csv")
    back = CounterfactualDataset.from_csv(tmp_path / "l.csv")
    assert back.env == "lb"
    assert [r.allow_mask for r in back.rows] == [r.allow_mask for r in lb.rows]
