import json
import os
import subprocess
import sys

import numpy as np

from netshield import envs
from netshield._accel import NUMBA_ENABLED
from netshield.policies import make_controller
from netshield.portfolio import default_portfolio

SNIPPET = """
import json
from netshield import envs
from netshield._accel import NUMBA_ENABLED
from netshield.policies import make_controller
from netshield.portfolio import default_portfolio
sc = envs.normal_scenario("abr", 7, 12)
cfg = envs.default_config("abr")
out = [envs.run_policy(p, sc, cfg).rewards.tolist()
       for p in [make_controller("abr-greedy-overshoot")] + default_portfolio("abr", K=4).members]
print(json.dumps({"numba": NUMBA_ENABLED, "rewards": [[repr(x) for x in r] for r in out]}))
"""


def _in_process():
    sc = envs.normal_scenario("abr", 7, 12)
    cfg = envs.default_config("abr")
    pols = [make_controller("abr-greedy-overshoot")] + default_portfolio("abr", K=4).members
    return [[repr(x) for x in envs.run_policy(p, sc, cfg).rewards.tolist()] for p in pols]


def test_fallback_path_matches_in_process():
    env = dict(os.environ, NETSHIELD_DISABLE_NUMBA="1")
    proc = subprocess.run([sys.executable, "-c", SNIPPET], env=env, capture_output=True, text=True, check=True)
    res = json.loads(proc.stdout)
    assert res["numba"] is False
    assert res["rewards"] == _in_process()


def test_numba_flag_reported():
    assert isinstance(NUMBA_ENABLED, bool)
    assert np.isfinite(envs.run_policy(make_controller("abr-buffer-naive"), envs.normal_scenario("abr", 1, 4),
                                       envs.default_config("abr")).total_reward)
