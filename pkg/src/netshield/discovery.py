"""Regret-maximizing scenario search and the lower-bound certificate it yields."""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .core import RngStream, Scenario, canonical_json, derive_seed
from .portfolio import Portfolio, best_reference

RATIO_TOL = 1e-12


# --------------------------------------------------------------------------
# Feasible set
# --------------------------------------------------------------------------


@dataclass
class ScenarioConstraints:
    """Box bounds per scenario component, a consecutive-step ratio cap and optional mean bounds.

    ``log_scale`` selects a logarithmic map from the search's unit cube, which
    suits quantities spanning orders of magnitude (bandwidths, gaps, sizes).
    """

    env: str
    horizon: int
    bounds: list
    max_step_ratio: float = math.inf
    mean_bounds: list | None = None
    log_scale: list | None = None

    def __post_init__(self):
        width = 1 if self.env == "abr" else 2
        self.bounds = [tuple(float(x) for x in b) for b in self.bounds]
        if len(self.bounds) != width:
            raise ValueError(f"{self.env} constraints need {width} bound pair(s)")
        for lo, hi in self.bounds:
            if lo > hi:
                raise ValueError(f"infeasible bounds: lo {lo} > hi {hi}")
            if lo < 0:
                raise ValueError("bounds must be nonnegative")
        if self.max_step_ratio is None:
            self.max_step_ratio = math.inf
        if not self.max_step_ratio >= 1:
            raise ValueError("max_step_ratio must be >= 1")
        if self.log_scale is None:
            self.log_scale = [lo > 0 for lo, _ in self.bounds]
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")

    @property
    def width(self) -> int:
        return len(self.bounds)

    @classmethod
    def default(cls, env: str, horizon: int | None = None) -> "ScenarioConstraints":
        if env == "abr":
            return cls("abr", 48 if horizon is None else horizon, [(0.1, 100.0)])
        return cls("lb", 50 if horizon is None else horizon, [(0.01, 10.0), (0.01, 100.0)])

    def to_dict(self) -> dict:
        return {
            "env": self.env,
            "horizon": self.horizon,
            "bounds": [list(b) for b in self.bounds],
            "max_step_ratio": None if math.isinf(self.max_step_ratio) else self.max_step_ratio,
            "mean_bounds": self.mean_bounds,
            "log_scale": list(self.log_scale),
        }


@dataclass(frozen=True)
class Violation:
    t: int
    constraint: str
    component: int = 0


def check_feasible(scenario: Scenario, cons: ScenarioConstraints) -> list[Violation]:
    """Every violated constraint as ``(t, name, component)``; empty means feasible."""
    if scenario.env != cons.env:
        raise ValueError("scenario env does not match constraints")
    v = scenario.variables
    out = []
    if v.shape[0] != cons.horizon:
        out.append(Violation(-1, "length"))
    rho = cons.max_step_ratio
    for j, (lo, hi) in enumerate(cons.bounds):
        col = v[:, j]
        for t in range(col.size):
            if col[t] < lo:
                out.append(Violation(t, "lower", j))
            if col[t] > hi:
                out.append(Violation(t, "upper", j))
            if t > 0 and math.isfinite(rho):
                a, b = col[t - 1], col[t]
                if b > rho * a * (1 + RATIO_TOL) or a > rho * b * (1 + RATIO_TOL):
                    out.append(Violation(t, "step_ratio", j))
        if cons.mean_bounds is not None and col.size:
            mlo, mhi = cons.mean_bounds[j]
            if not mlo <= col.mean() <= mhi:
                out.append(Violation(-1, "mean", j))
    return out


def project(values: np.ndarray, cons: ScenarioConstraints) -> np.ndarray:
    """Clamp to the box, then enforce the step ratio by a forward sweep (idempotent)."""
    out = np.array(values, dtype=np.float64, copy=True).reshape(-1, cons.width)
    rho = cons.max_step_ratio
    for j, (lo, hi) in enumerate(cons.bounds):
        col = np.clip(out[:, j], lo, hi)
        if math.isfinite(rho):
            for t in range(1, col.size):
                col[t] = min(max(col[t], col[t - 1] / rho), col[t - 1] * rho)
        out[:, j] = col
    return out


def decode(z, cons: ScenarioConstraints, segments: int) -> np.ndarray:
    """Map a unit-cube point (segments x components) to a projected, piecewise-constant series."""
    z = np.clip(np.asarray(z, dtype=np.float64).reshape(segments, cons.width), 0.0, 1.0)
    T = cons.horizon
    seg_of_t = (np.arange(T) * segments) // max(T, 1)
    vals = np.empty((T, cons.width))
    for j, (lo, hi) in enumerate(cons.bounds):
        if cons.log_scale[j] and lo > 0:
            col = lo * (hi / lo) ** z[:, j]
        else:
            col = lo + z[:, j] * (hi - lo)
        vals[:, j] = col[seg_of_t]
    return project(vals, cons)


# --------------------------------------------------------------------------
# Regret
# --------------------------------------------------------------------------


@dataclass
class RegretReport:
    scenario: Scenario
    J_pi: float
    ref_rewards: dict
    J_ref: float
    R_hat: float
    best_ref_name: str

    @property
    def scenario_id(self) -> str:
        return self.scenario.scenario_id

    def row(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "J_pi": self.J_pi,
            "J_ref": self.J_ref,
            "R_hat": self.R_hat,
            "best_ref": self.best_ref_name,
        }


def evaluate_regret(controller, portfolio: Portfolio, scenario: Scenario, cfg=None) -> RegretReport:
    """``R_hat = max_ref J_ref - J(controller)`` on one shared scenario."""
    cfg = envs.default_config(scenario.env) if cfg is None else cfg
    j_pi = envs.run_policy(controller, scenario, cfg, record_obs=False).total_reward
    name, j_ref, rewards = best_reference(portfolio, scenario, cfg)
    return RegretReport(scenario, j_pi, rewards, j_ref, j_ref - j_pi, name)


REPORT_FIELDS = ("scenario_id", "J_pi", "J_ref", "R_hat", "best_ref")


def write_reports_csv(reports, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in reports:
            d = r.row()
            w.writerow([d["scenario_id"], repr(d["J_pi"]), repr(d["J_ref"]), repr(d["R_hat"]), d["best_ref"]])


def read_reports_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("J_pi", "J_ref", "R_hat"):
            r[k] = float(r[k])
    return rows


# --------------------------------------------------------------------------
# Certificate
# --------------------------------------------------------------------------


@dataclass
class Certificate:
    R_hat_best: float
    search_budget: int = 0
    assumed_epsilon: float | None = None
    assumed_delta: float | None = None
    statement: str = ""

    @property
    def tightness_gap(self) -> float | None:
        if self.assumed_epsilon is None or self.assumed_delta is None:
            return None
        return self.assumed_epsilon + self.assumed_delta

    def to_dict(self) -> dict:
        return {
            "R_hat_best": self.R_hat_best,
            "search_budget": self.search_budget,
            "assumed_epsilon": self.assumed_epsilon,
            "assumed_delta": self.assumed_delta,
            "tightness_gap": self.tightness_gap,
            "statement": self.statement,
        }


def certify(best: RegretReport | float, assumed_epsilon: float | None = None,
            assumed_delta: float | None = None, search_budget: int = 0) -> Certificate:
    """Unconditional lower bound on worst-case exact regret, plus the tightness claim when
    the solver error and reference error bounds are supplied."""
    r = best.R_hat if isinstance(best, RegretReport) else float(best)
    stmt = f"worst-case exact regret ≥ {r:.12g}"
    cert = Certificate(r, search_budget, assumed_epsilon, assumed_delta)
    if cert.tightness_gap is not None:
        stmt += f"; the returned scenario's exact regret is within {cert.tightness_gap:.12g} of the worst case"
    cert.statement = stmt
    return cert


def exact_lb_optimum(scenario: Scenario, cfg) -> tuple[float, tuple]:
    """Best achievable reward by enumerating every dispatch sequence (tiny instances only)."""
    from .lb import lb_run_actions

    best, best_seq = -math.inf, ()
    for seq in itertools.product(range(cfg.num_servers), repeat=scenario.horizon):
        j = lb_run_actions(seq, scenario, cfg)
        if j > best:
            best, best_seq = j, seq
    return best, best_seq


def certificate_chain(R_exact, R_hat, chosen: int) -> dict:
    """Check the lower-bound chain on a fully enumerated scenario set.

    ``R_exact[i]`` and ``R_hat[i]`` are the exact and approximate regrets of
    scenario ``i``; ``chosen`` is the search's returned scenario.  The solver
    error and reference error are measured, not assumed.
    """
    R_exact = np.asarray(R_exact, dtype=np.float64)
    R_hat = np.asarray(R_hat, dtype=np.float64)
    e_star = int(np.argmax(R_exact))
    eps = float(R_hat.max() - R_hat[chosen])
    delta_star = float(R_exact[e_star] - R_hat[e_star])
    return {
        "e_star": e_star,
        "epsilon": eps,
        "delta_star": delta_star,
        "pointwise": bool(np.all(R_exact >= R_hat)),
        "lower_bound": bool(R_exact[chosen] >= R_hat[chosen]),
        "chain2": bool(R_hat[chosen] >= R_hat[e_star] - eps),
        "chain3": bool(R_hat[e_star] >= R_exact[e_star] - delta_star),
        "tight": bool(R_exact.max() - R_exact[chosen] <= eps + delta_star),
    }


# --------------------------------------------------------------------------
# Search
# --------------------------------------------------------------------------


@dataclass
class SearchConfig:
    method: str = "cem"
    budget: int = 400
    population: int = 40
    elites: int = 8
    segments: int = 8
    top_k: int = 10
    smoothing: float = 0.7
    init_sigma: float = 0.3
    min_sigma: float = 0.03
    hc_fraction: float = 0.2
    workers: int = 1

    def __post_init__(self):
        if self.method not in ("cem", "random", "hillclimb"):
            raise ValueError(f"unknown search method {self.method!r}")
        if self.budget < 1 or self.population < 1 or self.elites < 1 or self.segments < 1:
            raise ValueError("budget, population, elites and segments must be positive")


@dataclass
class SearchResult:
    reports: list
    certificate: Certificate
    n_evals: int
    history: list = field(default_factory=list)  # best R_hat after each evaluation


class _Evaluator:
    def __init__(self, controller, portfolio, cons, cfg, segments, seed):
        self.controller = controller
        self.portfolio = portfolio
        self.cons = cons
        self.cfg = cfg
        self.segments = segments
        self.seed = seed

    def __call__(self, z) -> RegretReport | None:
        vals = decode(z, self.cons, self.segments)
        sc = Scenario(self.cons.env, vals, seed=self.seed, family="discovered")
        if self.cons.mean_bounds is not None and check_feasible(sc, self.cons):
            return None
        return evaluate_regret(self.controller, self.portfolio, sc, self.cfg)


def _rank_key(item):
    r, idx = item
    return (-r.R_hat, idx)


def search(controller, portfolio: Portfolio, cons: ScenarioConstraints, scfg: SearchConfig | None = None,
           seed: int = 0, cfg=None) -> SearchResult:
    """Maximize approximate regret over the feasible scenario family.

    ``cem`` refits a diagonal Gaussian to the elite fraction each generation
    (first generation uniform) and spends ``hc_fraction`` of the budget on
    per-coordinate mutation hill climbing from the best points; ``random``
    samples the unit cube uniformly; ``hillclimb`` only climbs.
    """
    scfg = scfg or SearchConfig()
    cfg = envs.default_config(cons.env) if cfg is None else cfg
    if cons.env != portfolio.env:
        raise ValueError("constraints and portfolio env differ")
    dim = scfg.segments * cons.width
    rng = RngStream(derive_seed(seed, "search", scfg.method))
    scenario_seed = derive_seed(seed, "scenario")
    evaluator = _Evaluator(controller, portfolio, cons, cfg, scfg.segments, scenario_seed)
    pool = ProcessPoolExecutor(scfg.workers) if scfg.workers > 1 else None

    evaluated: list[tuple[RegretReport, int]] = []
    points: list[np.ndarray] = []
    history: list[float] = []
    best_val = -math.inf

    def run_batch(Z):
        nonlocal best_val
        results = list(pool.map(evaluator, Z)) if pool else [evaluator(z) for z in Z]
        vals = []
        for z, rep in zip(Z, results):
            idx = len(points)
            points.append(np.asarray(z))
            if rep is None:
                vals.append(-math.inf)
            else:
                evaluated.append((rep, idx))
                vals.append(rep.R_hat)
                best_val = max(best_val, rep.R_hat)
            history.append(best_val)
        return np.array(vals)

    try:
        remaining = scfg.budget
        if scfg.method == "random":
            while remaining > 0:
                n = min(scfg.population, remaining)
                run_batch([rng.uniforms(dim) for _ in range(n)])
                remaining -= n
        else:
            hc_budget = remaining if scfg.method == "hillclimb" else int(round(scfg.hc_fraction * remaining))
            cem_budget = remaining - hc_budget
            if scfg.method == "hillclimb":
                start = rng.uniforms(dim)
                run_batch([start])
                hc_budget -= 1
            else:
                _cem(run_batch, rng, dim, cem_budget, scfg)
            if hc_budget > 0 and evaluated:
                _hill_climb(run_batch, rng, points, evaluated, hc_budget, scfg)
    finally:
        if pool:
            pool.shutdown()

    ranked = sorted(evaluated, key=_rank_key)
    top = []
    for rep, _ in ranked:
        if all(np.max(np.abs(rep.scenario.variables - o.scenario.variables)) > 1e-6 for o in top):
            top.append(rep)
        if len(top) >= scfg.top_k:
            break
    best = top[0] if top else None
    cert = certify(best if best is not None else -math.inf, search_budget=len(points))
    return SearchResult(top, cert, len(points), history)


def _cem(run_batch, rng: RngStream, dim: int, budget: int, scfg: SearchConfig) -> None:
    mu = np.full(dim, 0.5)
    sigma = np.full(dim, scfg.init_sigma)
    first = True
    while budget > 0:
        n = min(scfg.population, budget)
        if first:
            Z = [rng.uniforms(dim) for _ in range(n)]
            first = False
        else:
            Z = [np.clip(mu + sigma * rng.normals(dim), 0.0, 1.0) for _ in range(n)]
        vals = run_batch(Z)
        budget -= n
        m = min(scfg.elites, n)
        order = sorted(range(n), key=lambda i: (-vals[i], i))[:m]
        E = np.array([Z[i] for i in order])
        a = scfg.smoothing
        mu = (1 - a) * mu + a * E.mean(axis=0)
        sigma = np.maximum((1 - a) * sigma + a * E.std(axis=0), scfg.min_sigma)


def _hill_climb(run_batch, rng: RngStream, points, evaluated, budget: int, scfg: SearchConfig) -> None:
    """Per-coordinate mutation climbing, restarting from successive top points."""
    ranked = sorted(evaluated, key=_rank_key)
    starts = [points[idx] for _, idx in ranked[: max(1, scfg.elites)]]
    s = 0
    while budget > 0:
        x = starts[s % len(starts)].copy()
        s += 1
        fx = next(r.R_hat for r, i in evaluated if np.array_equal(points[i], x))
        step = 0.25
        stall = 0
        while budget > 0 and step > 1e-3:
            j = rng.integers(x.size)
            cand = x.copy()
            cand[j] = min(1.0, max(0.0, cand[j] + (step if rng.random() < 0.5 else -step)))
            fc = run_batch([cand])[0]
            budget -= 1
            if fc > fx:
                x, fx, stall = cand, fc, 0
            else:
                stall += 1
                if stall >= 2 * x.size:
                    step /= 2
                    stall = 0


def search_summary(result: SearchResult) -> str:
    return canonical_json({"best": result.certificate.R_hat_best, "evals": result.n_evals})
