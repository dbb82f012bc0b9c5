import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netshield.abr import (
    AbrConfig,
    abr_features,
    abr_initial_state,
    abr_observe,
    abr_run,
    abr_step,
    bandwidth_csv_to_scenario,
    load_manifest,
    rollout_kernel,
    step_kernel,
)
from netshield.core import Policy, Scenario
from netshield.portfolio import ConstantBitrate

LADDER = [300.0, 750.0, 1200.0, 1850.0, 2850.0, 4300.0]


def hand_step(buf, prev, kbps, bw, dur=4.0, cap=60.0, rtt=0.08, q=0.5):
    """Step equations written out independently of the simulator."""
    size = kbps * 1000 * dur / 8
    dl = size * 8 / (bw * 1e6) + rtt
    r = max(0.0, dl - buf)
    nb = max(buf - dl, 0.0) + dur
    while nb > cap:
        nb -= q
    return nb, r, 1e-3 * kbps - 4.3 * r - 1e-3 * abs(kbps - prev)


def _state(buf, prev_idx=0, n=10, cfg=None):
    cfg = cfg or AbrConfig()
    s = abr_initial_state(n, cfg)
    s.buffer_s = buf
    s.prev_index = prev_idx
    return s


def test_hand_trace_reward_030(abr_cfg):
    s2, r, done = abr_step(_state(10.0), 1, 1.0, abr_cfg)
    assert s2.buffer_s == pytest.approx(10.92, rel=1e-9)
    assert r == pytest.approx(0.30, rel=1e-9)
    assert not done


def test_hand_trace_reward_rebuffer(abr_cfg):
    s2, r, _ = abr_step(_state(1.0), 1, 1.0, abr_cfg)
    assert r == pytest.approx(0.75 - 4.3 * 2.08 - 0.45, rel=1e-9)
    assert r == pytest.approx(-8.644, rel=1e-9)
    assert s2.buffer_s == pytest.approx(4.0, rel=1e-9)


def test_first_chunk_same_bitrate_has_no_smoothness_term(abr_cfg):
    s = abr_initial_state(3, abr_cfg)
    _, r, _ = abr_step(s, 0, 2.0, abr_cfg)
    r0 = 150000 * 8 / 2e6 + 0.08
    assert r == pytest.approx(0.3 - 4.3 * r0, rel=1e-12)


def test_step_is_pure_and_errors(abr_cfg):
    s = _state(5.0, n=1)
    abr_step(s, 2, 3.0, abr_cfg)
    assert s.buffer_s == 5.0 and s.chunk_index == 0
    with pytest.raises(ValueError, match="infeasible bandwidth"):
        abr_step(s, 0, 0.0, abr_cfg)
    s2, _, done = abr_step(s, 0, 3.0, abr_cfg)
    assert done
    with pytest.raises(ValueError, match="episode finished"):
        abr_step(s2, 0, 3.0, abr_cfg)
    with pytest.raises(ValueError):
        abr_step(s, 6, 3.0, abr_cfg)


def test_sleep_caps_buffer(abr_cfg):
    s2, r, _ = abr_step(_state(59.0), 0, 100.0, abr_cfg)
    nb, _, _ = hand_step(59.0, 300.0, 300.0, 100.0)
    assert s2.buffer_s == pytest.approx(nb, rel=1e-12)
    assert s2.buffer_s <= abr_cfg.buffer_cap_s


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0, 70),
    st.integers(0, 5),
    st.integers(0, 5),
    st.floats(0.05, 200),
)
def test_step_matches_hand_equations(buf, prev, a, bw):
    cfg = AbrConfig()
    s2, r, _ = abr_step(_state(buf, prev), a, bw, cfg)
    nb, rb, rr = hand_step(buf, LADDER[prev], LADDER[a], bw)
    assert s2.buffer_s == pytest.approx(nb, rel=1e-9, abs=1e-9)
    assert r == pytest.approx(rr, rel=1e-9, abs=1e-9)
    assert 0 <= s2.buffer_s <= cfg.buffer_cap_s + cfg.chunk_duration_s


def test_kernel_matches_pure_python_fallback(abr_cfg):
    p = abr_cfg.params()
    fn = getattr(step_kernel, "py_func", step_kernel)
    rng = np.random.default_rng(0)
    for _ in range(200):
        args = (rng.uniform(0, 70), LADDER[rng.integers(6)], rng.uniform(1e4, 3e6), LADDER[rng.integers(6)],
                rng.uniform(0.05, 100))
        assert step_kernel(*args, *p) == fn(*args, *p)


def test_observation_normalization(abr_cfg):
    s = abr_initial_state(100, abr_cfg)
    obs = abr_observe(s, abr_cfg)
    assert obs.shape == (6, 8)
    assert np.all(obs[:4] == 0)
    assert obs[4, :6] == pytest.approx(np.array(LADDER) * 500 / 1e6)
    s2, _, _ = abr_step(s, 5, 10.0, abr_cfg)
    obs = abr_observe(s2, abr_cfg)
    assert obs[0, -1] == 1.0  # 4300 chosen
    assert obs[5, -1] == 1.0  # 99 remaining, capped at 48
    assert np.all(obs[:, :7][:4] == 0)  # left zero padding
    dl = 4300 * 500 * 8 / 10e6 + 0.08
    assert obs[3, -1] == pytest.approx(dl * 1000 / 10000)
    assert obs[2, -1] == pytest.approx(4300 * 500 / (dl * 1000 * 1000))
    s3 = _state(10.0, n=5)
    s3, _, _ = abr_step(s3, 0, 1e9, abr_cfg)
    s3.buffer_s = 10.0
    s3.history[-1] = (300.0, 10.0, 150000.0, 80.0, 4.0)
    assert abr_observe(s3, abr_cfg)[1, -1] == 1.0


def test_features_recover_raw_units(abr_cfg):
    s = abr_initial_state(20, abr_cfg)
    for bw, a in [(2.0, 1), (8.0, 3), (1.0, 0)]:
        s, _, _ = abr_step(s, a, bw, abr_cfg)
    f = abr_features(abr_observe(s, abr_cfg), abr_cfg)
    last_dl = 300 * 500 * 8 / 1e6 + 0.08
    assert f[0] == 300.0
    assert f[1] == pytest.approx(s.buffer_s)
    assert f[2] == pytest.approx(300 * 500 * 8 / last_dl / 1e6)
    assert f[3] == pytest.approx(last_dl)
    assert f[7] == 17


def test_constant_lowest_bitrate_on_fast_link(abr_cfg):
    T, bw = 30, 1000.0
    sc = Scenario("abr", np.full((T, 1), bw))
    tr = abr_run(ConstantBitrate(0), sc, abr_cfg)
    r0 = 150000 * 8 / (bw * 1e6) + 0.08
    assert tr.info["rebuffer"][1:] == [0.0] * (T - 1)
    assert tr.total_reward == pytest.approx(T * 0.3 - 4.3 * r0, rel=1e-9)


def test_empty_and_deterministic_runs(abr_cfg):
    tr = abr_run(ConstantBitrate(3), Scenario("abr", np.zeros((0, 1))), abr_cfg)
    assert tr.total_reward == 0 and tr.steps == []
    sc = Scenario("abr", np.linspace(0.3, 5, 20).reshape(-1, 1))
    a = abr_run(ConstantBitrate(2), sc, abr_cfg)
    b = abr_run(ConstantBitrate(2), sc, abr_cfg)
    assert a.rewards.tolist() == b.rewards.tolist()


def test_reward_decomposition_from_log(abr_cfg):
    sc = Scenario("abr", np.random.default_rng(3).uniform(0.2, 6, 25).reshape(-1, 1))

    class Cycle(Policy):
        def reset(self, scenario, cfg):
            self.t = 0

        def scores(self, obs, state=None):
            self.t += 1
            return -np.abs(np.arange(6) - (self.t * 7) % 6)

    tr = abr_run(Cycle(), sc, abr_cfg)
    prev = 300.0
    for b, rb, r in zip(tr.info["bitrate"], tr.info["rebuffer"], tr.rewards):
        assert r == 1e-3 * b - 4.3 * rb - 1e-3 * abs(b - prev)
        prev = b


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=15), st.integers(0, 2**31), st.floats(1.0, 4.0))
def test_more_bandwidth_never_more_rebuffering(actions, seed, factor):
    cfg = AbrConfig()
    T = len(actions)
    bws = np.random.default_rng(seed).uniform(0.1, 8.0, T)
    acts = np.array(actions, dtype=np.int64)
    sizes = cfg.chunk_sizes(T)
    _, rb1 = rollout_kernel(0.0, 0, acts, sizes, cfg.ladder_kbps, bws, *cfg.params())
    _, rb2 = rollout_kernel(0.0, 0, acts, sizes, cfg.ladder_kbps, bws * factor, *cfg.params())
    assert rb2.sum() <= rb1.sum() + 1e-12


def test_manifest_and_trace_import(tmp_path):
    m = tmp_path / "m.csv"
    m.write_text("chunk_index,size_300,size_750,size_1200,size_1850,size_2850,size_4300\n"
                 "1,2,2,2,2,2,2\n0,1,1,1,1,1,1\n")
    arr = load_manifest(m)
    assert arr.shape == (2, 6) and arr[0, 0] == 1
    cfg = AbrConfig(manifest=arr)
    assert cfg.chunk_sizes(2)[1, 5] == 2
    with pytest.raises(ValueError):
        cfg.chunk_sizes(3)
    with pytest.raises(ValueError):
        AbrConfig(manifest=np.ones((2, 5)))
    t = tmp_path / "bw.csv"
    t.write_text("time,bandwidth_mbps\n0,1.5\n4,2.5\n")
    sc = bandwidth_csv_to_scenario(t)
    assert sc.variables[:, 0].tolist() == [1.5, 2.5]
