"""Per-scenario gap metrics and CSV emission."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

EPS_NUM = 1e-9


def log_gap(gap: float) -> float:
    return math.log10(1.0 + max(0.0, gap))


def rel_gap(gap: float, j_ref: float) -> float:
    return gap / max(abs(j_ref), EPS_NUM)


def protection_pct(gap_protected: float, gap_unprotected: float) -> float | None:
    """Share of the unprotected gap removed by the shield; undefined unless the unprotected gap is positive."""
    if not gap_unprotected > 0:
        return None
    return 1.0 - gap_protected / gap_unprotected


def decision_time_ratio(traj) -> float:
    """Mean per-decision wall time over the step's available budget (steps with a positive budget)."""
    ratios = [s.wall_ns * 1e-9 / s.budget_s for s in traj.steps if s.budget_s > 0 and math.isfinite(s.budget_s)]
    return float(np.mean(ratios)) if ratios else 0.0


@dataclass
class MetricsRow:
    family: str
    scenario_id: str
    policy: str
    J_pi: float
    J_ref: float
    gap: float
    log_gap: float
    rel_gap: float
    norm_gap: float
    protection_pct: float | None = None
    decision_time_ratio: float = 0.0

    @classmethod
    def build(cls, family, scenario_id, policy, j_pi, j_ref, gap_unprotected=None, dtr=0.0) -> "MetricsRow":
        gap = j_ref - j_pi
        prot = None if gap_unprotected is None else protection_pct(gap, gap_unprotected)
        r = rel_gap(gap, j_ref)
        return cls(family, scenario_id, policy, j_pi, j_ref, gap, log_gap(gap), r, r, prot, dtr)


FIELDS = [f for f in MetricsRow.__dataclass_fields__]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_metrics_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELDS)
        for r in rows:
            d = asdict(r)
            w.writerow([_fmt(d[k]) for k in FIELDS])


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    out = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            out.append(
                MetricsRow(
                    d["family"], d["scenario_id"], d["policy"],
                    *(float(d[k]) for k in ("J_pi", "J_ref", "gap", "log_gap", "rel_gap", "norm_gap")),
                    None if d["protection_pct"] == "" else float(d["protection_pct"]),
                    float(d["decision_time_ratio"]),
                )
            )
    return out


def write_rows(path: str | Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
