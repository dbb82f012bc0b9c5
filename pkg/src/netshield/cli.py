"""Command-line entry point: ``netshield <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, envs
from .config import (
    ConfigError,
    build_constraints,
    build_controller,
    build_portfolio,
    build_rule_params,
    build_search,
    load_config,
    validate,
)
from .core import Scenario, canonical_json, load_scenario_dir
from .counterfactual import CounterfactualDataset, build_dataset
from .discovery import read_reports_csv, search, write_reports_csv
from .metrics import MetricsRow, decision_time_ratio, protection_pct, write_metrics_csv, write_rows
from .policies import make_controller
from .portfolio import best_reference, default_portfolio
from .rulekit import (
    RULE_FORMAT_VERSION,
    ThresholdTable,
    build_vocabulary,
    dump_rules,
    learn_rules,
    load_rules,
    save_rules,
)
from .shield import normal_thresholds, protect, refine


class MissingInput(Exception):
    pass


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"missing input: {p}")
    return p


def _config(path, seed=None, workers=None) -> dict:
    conf = load_config(_need(path))
    if seed is not None:
        conf["seed"] = seed
    if workers is not None:
        conf["workers"] = workers
    return conf


def _sibling_config(explicit, near: Path) -> dict:
    if explicit:
        return _config(explicit)
    for cand in (near / "config.json", near.parent / "config.json"):
        if cand.exists():
            return validate(json.loads(cand.read_text()))
    raise MissingInput(f"missing input: no --config given and no config.json beside {near}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _save_scenarios(reports, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(reports):
        r.scenario.save(directory / f"{i:03d}_{r.scenario_id}.json")


def _scenarios(path) -> list[Scenario]:
    p = _need(path)
    if (p / "scenarios").is_dir():
        p = p / "scenarios"
    out = load_scenario_dir(p)
    if not out:
        raise MissingInput(f"missing input: no scenario files in {p}")
    return out


def _thresholds(conf, controller, cfg) -> ThresholdTable:
    return normal_thresholds(
        controller, conf["env"], cfg, conf["normal"]["episodes"], conf["seed"], conf["normal"].get("horizon")
    )


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_discover(args) -> str:
    conf = _config(args.config, args.seed, args.workers)
    out = Path(args.out or conf["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg = envs.default_config(conf["env"])
    res = search(build_controller(conf), build_portfolio(conf), build_constraints(conf), build_search(conf),
                 seed=conf["seed"], cfg=cfg)
    _save_scenarios(res.reports, out / "scenarios")
    write_reports_csv(res.reports, out / "reports.csv")
    _write_json(out / "certificate.json", res.certificate.to_dict())
    _write_json(out / "config.json", conf)
    return f"discover: {len(res.reports)} scenarios, best R_hat={res.certificate.R_hat_best:.6g}, evals={res.n_evals}"


def _evaluate(policy, scenarios, portfolio, cfg, traj_dir: Path | None = None, unprotected=None):
    rows = []
    for sc in scenarios:
        traj = envs.run_policy(policy, sc, cfg)
        if traj_dir is not None:
            traj_dir.mkdir(parents=True, exist_ok=True)
            traj.write_csv(traj_dir / f"{sc.scenario_id}.csv")
        _, j_ref, _ = best_reference(portfolio, sc, cfg)
        gap_u = None if unprotected is None else unprotected[sc.scenario_id]
        rows.append(MetricsRow.build(sc.family, sc.scenario_id, policy.name, traj.total_reward, j_ref, gap_u,
                                     decision_time_ratio(traj)))
    return rows


def _optional_config(explicit, near: Path) -> dict | None:
    try:
        return _sibling_config(explicit, near)
    except MissingInput:
        if explicit:
            raise
        return None


def cmd_eval(args) -> str:
    scenarios = _scenarios(args.scenarios)
    env = scenarios[0].env
    cfg = envs.default_config(env)
    conf = _optional_config(args.config, Path(args.scenarios))
    portfolio = build_portfolio(conf) if conf is not None and conf["env"] == env else default_portfolio(env)
    policy = make_controller(args.policy)
    if args.rules:
        policy = protect(policy, load_rules(_need(args.rules), envs.feature_names(env, cfg)), env, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = _evaluate(policy, scenarios, portfolio, cfg, out / "trajectories")
    write_metrics_csv(rows, out / "metrics.csv")
    return f"eval: {len(rows)} scenarios, mean gap={np.mean([r.gap for r in rows]):.6g}"


def cmd_analyze(args) -> str:
    rdir = _need(args.reports)
    conf = _sibling_config(args.config, rdir)
    cfg = envs.default_config(conf["env"])
    scenarios = _scenarios(rdir)
    lab = conf["labeling"]
    ds = build_dataset(scenarios, build_controller(conf), build_portfolio(conf), cfg, tau=lab["tau"],
                       tau_percentile=lab["tau_percentile"])
    out = Path(args.out) if args.out else rdir / "dataset.csv"
    ds.to_csv(out)
    return f"analyze: {len(ds)} states, {int(ds.risky_array().sum())} risky, tau={ds.taus[0]:.6g}"


def cmd_learn(args) -> str:
    dpath = _need(args.dataset)
    conf = _sibling_config(args.config, dpath.parent)
    cfg = envs.default_config(conf["env"])
    ds = CounterfactualDataset.from_csv(dpath, conf["env"])
    if args.thresholds:
        table = ThresholdTable.from_dict(json.loads(_need(args.thresholds).read_text()))
    else:
        table = _thresholds(conf, build_controller(conf), cfg)
    rules = learn_rules(ds, build_vocabulary(table), build_rule_params(conf))
    out = Path(args.out) if args.out else dpath.parent
    out.mkdir(parents=True, exist_ok=True)
    save_rules(rules, out / "rules.json")
    (out / "rules.txt").write_text(dump_rules(rules))
    _write_json(out / "thresholds.json", table.to_dict())
    return f"learn: {len(rules)} rules from {len(ds)} states"


def _comparison(base_rows, prot_rows, conflicts):
    fams = sorted({r.family for r in base_rows})
    table = []
    for f in fams:
        gu = float(np.mean([r.gap for r in base_rows if r.family == f]))
        gp = float(np.mean([r.gap for r in prot_rows if r.family == f]))
        n = sum(r.family == f for r in base_rows)
        table.append((f, n, gu, gp, protection_pct(gp, gu), conflicts.get(f, 0)))
    return table


def cmd_shield_eval(args) -> str:
    rpath = _need(args.rules)
    scenarios = _scenarios(args.scenarios)
    conf = _sibling_config(args.config, rpath.parent)
    env = conf["env"]
    cfg = envs.default_config(env)
    portfolio = build_portfolio(conf)
    base = build_controller(conf)
    rules = load_rules(rpath, envs.feature_names(env, cfg))
    prot = protect(build_controller(conf), rules, env, cfg, conf["shield"]["delta"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_rows = _evaluate(base, scenarios, portfolio, cfg)
    gaps = {r.scenario_id: r.gap for r in base_rows}
    prot_rows, conflicts = [], {}
    for sc in scenarios:
        prot_rows.extend(_evaluate(prot, [sc], portfolio, cfg, unprotected=gaps))
        conflicts[sc.family] = conflicts.get(sc.family, 0) + prot.conflicts
    write_metrics_csv(base_rows, out / "metrics_unprotected.csv")
    write_metrics_csv(prot_rows, out / "metrics_protected.csv")
    table = _comparison(base_rows, prot_rows, conflicts)
    write_rows(out / "comparison.csv",
               ["family", "n", "mean_gap_unprotected", "mean_gap_protected", "protection_pct", "conflicts"], table)
    gu = np.mean([r.gap for r in base_rows])
    gp = np.mean([r.gap for r in prot_rows])
    return f"shield-eval: {len(rules)} rules, mean gap {gu:.6g} -> {gp:.6g}"


def _round_writer(out: Path, cfg, env):
    def write(rr, dataset):
        k = rr.round
        save_rules(rr.rules, out / f"rules_round_{k}.json")
        (out / f"rules_round_{k}.txt").write_text(dump_rules(rr.rules))
        write_reports_csv(rr.reports, out / f"reports_round_{k}.csv")
        _save_scenarios(rr.reports, out / f"scenarios_round_{k}")
        print(f"  round {k}: best R_hat={rr.best_R_hat:.6g} dataset={rr.dataset_size} rules={len(rr.rules)}",
              file=sys.stderr)

    return write


GAP_HEADER = ["round", "mean_R_hat", "max_R_hat", "dataset_size"]


def cmd_iterate(args) -> str:
    conf = _config(args.config, args.seed, args.workers)
    if args.rounds is not None:
        conf["rounds"] = args.rounds
    out = Path(args.out or conf["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    env = conf["env"]
    cfg = envs.default_config(env)
    controller = build_controller(conf)
    table = _thresholds(conf, controller, cfg)
    _write_json(out / "config.json", conf)
    _write_json(out / "thresholds.json", table.to_dict())
    run = refine(controller, build_portfolio(conf), build_constraints(conf), conf["rounds"], build_search(conf),
                 seed=conf["seed"], cfg=cfg, rule_params=build_rule_params(conf), thresholds=table,
                 normal_episodes=conf["normal"]["episodes"], delta=conf["shield"]["delta"],
                 tau=conf["labeling"]["tau"], tau_percentile=conf["labeling"]["tau_percentile"],
                 normal_anchors=conf["labeling"]["normal_anchors"], on_round=_round_writer(out, cfg, env))
    run.dataset.to_csv(out / "dataset.csv")
    rows = [[r.round, r.mean_R_hat, r.best_R_hat, r.dataset_size] for r in run.rounds]
    write_rows(out / "gaps.csv", GAP_HEADER, rows)
    last = run.rounds[-1]
    return f"iterate: {len(run.rounds)} rounds, final best R_hat={last.best_R_hat:.6g}, rules={len(last.rules)}"


def cmd_report(args) -> str:
    rdir = _need(args.run)
    conf = _sibling_config(None, rdir)
    env = conf["env"]
    cfg = envs.default_config(env)
    portfolio = build_portfolio(conf)
    out = Path(args.out) if args.out else rdir
    out.mkdir(parents=True, exist_ok=True)
    ds = CounterfactualDataset.from_csv(_need(rdir / "dataset.csv"), env)
    round_ids = np.array([r.round for r in ds.rows])
    gaps, prot, lat = [], [], []
    k = 0
    while (rdir / f"reports_round_{k}.csv").exists():
        scenarios = load_scenario_dir(rdir / f"scenarios_round_{k}")
        rules = load_rules(_need(rdir / f"rules_round_{k}.json"), envs.feature_names(env, cfg))
        r_hats = [float(d["R_hat"]) for d in read_reports_csv(rdir / f"reports_round_{k}.csv")]
        gaps.append([k, float(np.mean(r_hats)) if r_hats else 0.0, max(r_hats) if r_hats else float("-inf"),
                     int((round_ids <= k).sum())])
        base_rows = _evaluate(build_controller(conf), scenarios, portfolio, cfg)
        pol = protect(build_controller(conf), rules, env, cfg, conf["shield"]["delta"])
        gu = {r.scenario_id: r.gap for r in base_rows}
        evals, shield_ns, dtr = [], [], []
        prot_rows = []
        for sc in scenarios:
            prot_rows.extend(_evaluate(pol, [sc], portfolio, cfg, unprotected=gu))
            evals.extend(d.evals for d in pol.log)
            shield_ns.extend(d.shield_ns for d in pol.log)
        dtr = [r.decision_time_ratio for r in prot_rows]
        for row in _comparison(base_rows, prot_rows, {}):
            prot.append([k] + list(row[:5]))
        lat.append([k, float(np.mean(evals)) if evals else 0.0, float(np.mean(shield_ns)) if shield_ns else 0.0,
                    float(np.percentile(shield_ns, 99)) if shield_ns else 0.0, float(np.mean(dtr))])
        k += 1
    if k == 0:
        raise MissingInput(f"missing input: no reports_round_*.csv in {rdir}")
    write_rows(out / "gaps.csv", GAP_HEADER, gaps)
    write_rows(out / "protection.csv",
               ["round", "family", "n", "mean_gap_unprotected", "mean_gap_protected", "protection_pct"], prot)
    write_rows(out / "latency.csv",
               ["round", "mean_predicate_evals", "mean_shield_ns", "p99_shield_ns", "decision_time_ratio"], lat)
    return f"report: {k} rounds -> gaps.csv, protection.csv, latency.csv"


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netshield", description="Discover controller failures and learn runtime guard rules.")
    p.add_argument("--version", action="version", version=f"netshield {__version__} (rule format {RULE_FORMAT_VERSION})")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("discover", help="search for high-regret scenarios")
    d.add_argument("--config", required=True)
    d.add_argument("--seed", type=int)
    d.add_argument("--out")
    d.add_argument("--workers", type=int)
    d.set_defaults(func=cmd_discover)

    e = sub.add_parser("eval", help="roll out a policy on stored scenarios")
    e.add_argument("--scenarios", required=True)
    e.add_argument("--policy", required=True)
    e.add_argument("--rules")
    e.add_argument("--config")
    e.add_argument("--out", default="eval_out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="label discovered scenarios counterfactually")
    a.add_argument("--reports", required=True)
    a.add_argument("--config")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    lr = sub.add_parser("learn", help="induce rules from a labeled dataset")
    lr.add_argument("--dataset", required=True)
    lr.add_argument("--config")
    lr.add_argument("--thresholds")
    lr.add_argument("--out")
    lr.set_defaults(func=cmd_learn)

    s = sub.add_parser("shield-eval", help="compare protected and unprotected controllers")
    s.add_argument("--rules", required=True)
    s.add_argument("--scenarios", required=True)
    s.add_argument("--config")
    s.add_argument("--out", default="shield_out")
    s.set_defaults(func=cmd_shield_eval)

    it = sub.add_parser("iterate", help="run search-and-protect refinement rounds")
    it.add_argument("--config", required=True)
    it.add_argument("--rounds", type=int)
    it.add_argument("--seed", type=int)
    it.add_argument("--out")
    it.add_argument("--workers", type=int)
    it.set_defaults(func=cmd_iterate)

    r = sub.add_parser("report", help="emit plot-ready CSVs for an iterate run")
    r.add_argument("--run", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        print(args.func(args))
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return 2
    except (MissingInput, FileNotFoundError) as exc:
        print(str(exc), file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
