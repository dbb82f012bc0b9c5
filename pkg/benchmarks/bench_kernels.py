"""Compare the numba-compiled kernels with the pure-Python fallback.

Each path runs in its own interpreter because the choice is fixed at import
time by ``NETSHIELD_DISABLE_NUMBA``.  Both must produce identical numbers;
only the timings should differ.

    python benchmarks/bench_kernels.py [--repeat 3] [--quick]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def _workloads(quick: bool):
    import numpy as np

    from netshield import envs
    from netshield.abr import AbrConfig, abr_initial_state, rollout_kernel
    from netshield.discovery import ScenarioConstraints, SearchConfig, search
    from netshield.policies import make_controller
    from netshield.portfolio import default_portfolio, rolling_oracle

    cfg = AbrConfig()
    rng = np.random.default_rng(0)
    n_oracle = 10 if quick else 40
    states = []
    for _ in range(n_oracle):
        st = abr_initial_state(48, cfg)
        st.buffer_s = float(rng.uniform(0, 30))
        st.prev_index = int(rng.integers(0, 6))
        states.append((st, rng.uniform(0.2, 8.0, size=5)))

    def oracle():
        return [rolling_oracle(st, bws, cfg, 5)[:2] for st, bws in states]

    sizes = cfg.chunk_sizes(48)
    ladder = cfg.ladder_kbps
    p = cfg.params()
    acts = rng.integers(0, 6, size=(200 if quick else 2000, 48))
    bws = rng.uniform(0.1, 10.0, size=48)

    def rollout():
        return [rollout_kernel(0.0, 0, a, sizes, ladder, bws, *p)[0] for a in acts]

    def discover():
        res = search(make_controller("abr-greedy-overshoot"), default_portfolio("abr"),
                     ScenarioConstraints.default("abr", 24),
                     SearchConfig(budget=20 if quick else 60, population=10, elites=3, segments=8), seed=0)
        return [r.R_hat for r in res.reports]

    def episode():
        sc = envs.normal_scenario("abr", 1)
        return envs.run_policy(default_portfolio("abr").members[0], sc, envs.default_config("abr")).total_reward

    return {"oracle_window_K5": oracle, "rollout_48": rollout, "search_eval": discover, "oracle_episode": episode}


def _child(repeat: int, quick: bool) -> None:
    from netshield._accel import NUMBA_ENABLED

    out = {"numba": NUMBA_ENABLED, "results": {}}
    for name, fn in _workloads(quick).items():
        t0 = time.perf_counter()
        value = fn()  # first call includes JIT compilation (or cache load)
        first = time.perf_counter() - t0
        best = float("inf")
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        out["results"][name] = {"first_s": first, "best_s": best, "value": repr(value)}
    print(json.dumps(out))


def _run(disable: bool, repeat: int, quick: bool) -> dict:
    env = dict(os.environ)
    env["NETSHIELD_DISABLE_NUMBA"] = "1" if disable else "0"
    cmd = [sys.executable, __file__, "--child", "--repeat", str(repeat)] + (["--quick"] if quick else [])
    proc = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="smaller workloads")
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.child:
        _child(args.repeat, args.quick)
        return 0

    fast = _run(False, args.repeat, args.quick)
    slow = _run(True, args.repeat, args.quick)
    if not fast["numba"]:
        print("numba is not available; both runs used the fallback path")
    print(f"{'workload':<18} {'numba s':>10} {'python s':>10} {'speedup':>9} {'first-call s':>13}  same")
    ok = True
    for name, r in fast["results"].items():
        s = slow["results"][name]
        same = r["value"] == s["value"]
        ok &= same
        print(f"{name:<18} {r['best_s']:>10.4f} {s['best_s']:>10.4f} {s['best_s'] / r['best_s']:>8.1f}x "
              f"{r['first_s']:>13.3f}  {'yes' if same else 'NO'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
