"""Percentile predicates, sequential-covering rule induction and prefix-trie matching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PERCENTILES = (10, 25, 75, 90, 95)
CMP_ORDER = {"LE": 0, "GT": 1}
RULE_FORMAT_VERSION = "1"

ABSTAIN, BACK_OFF, PUSH_HARDER = "ABSTAIN", "BACK_OFF", "PUSH_HARDER"
LABELS = (ABSTAIN, BACK_OFF, PUSH_HARDER)

# Consequent kinds: "label" (generic adjustment), "upper"/"lower" (bitrate
# bound in Kbps), "allow" (server index), "risky" (risk flag).
CONSEQUENT_KINDS = ("label", "upper", "lower", "allow", "risky")


# --------------------------------------------------------------------------
# Percentiles
# --------------------------------------------------------------------------


def nearest_rank(values, p: float) -> float:
    """Nearest-rank percentile: element ``ceil(p/100 * n)`` (1-based) of the ascending sort."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("empty feature column")
    k = max(1, math.ceil(p / 100.0 * v.size))
    return float(v[min(k, v.size) - 1])


@dataclass
class ThresholdTable:
    names: list
    percents: tuple
    values: np.ndarray  # (n_features, n_percents)

    def get(self, feature: str, p: int) -> float:
        return float(self.values[self.names.index(feature), self.percents.index(p)])

    def to_dict(self) -> dict:
        return {
            "percents": list(self.percents),
            "thresholds": {n: [float(x) for x in row] for n, row in zip(self.names, self.values)},
            "features": list(self.names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdTable":
        names = list(d["features"])
        return cls(names, tuple(d["percents"]), np.array([d["thresholds"][n] for n in names], dtype=np.float64))


def fit_percentiles(samples, names, percents=PERCENTILES, min_samples: int = 20) -> ThresholdTable:
    """Per-feature nearest-rank percentiles of normal-operation samples (rows x features)."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(names):
        raise ValueError("samples must be a (rows, features) matrix matching names")
    if X.shape[0] == 0:
        raise ValueError("empty feature column")
    if X.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} samples per feature, got {X.shape[0]}")
    vals = np.array([[nearest_rank(X[:, j], p) for p in percents] for j in range(X.shape[1])])
    return ThresholdTable(list(names), tuple(percents), vals)


# --------------------------------------------------------------------------
# Load-balancing rule features
# --------------------------------------------------------------------------


def lb_feature_names(n: int) -> list[str]:
    return (
        [f"LoadProxy{i}" for i in range(n)]
        + ["JobSize", "TotalLoad", "MeanLoad", "StdLoad", "MinLoad", "MaxLoad"]
        + [f"GapToMin{i}" for i in range(n)]
        + [f"PostLoad{i}" for i in range(n)]
        + [f"LoadRank{i}" for i in range(n)]
    )


def derive_lb_features(obs) -> np.ndarray:
    """Append load summaries, per-server gap-to-min, post-dispatch load and load rank."""
    obs = np.asarray(obs, dtype=np.float64)
    loads, job = obs[:-1], obs[-1]
    lo = loads.min()
    ranks = np.empty(loads.size)
    ranks[np.argsort(loads, kind="stable")] = np.arange(loads.size)
    summary = [loads.sum(), loads.mean(), loads.std(), lo, loads.max()]
    return np.concatenate([loads, [job], summary, loads - lo, loads + job, ranks])


# --------------------------------------------------------------------------
# Predicates and rules
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Predicate:
    """``x[feature_id] <= threshold`` (LE) or ``x[feature_id] > threshold`` (GT).

    ``x >= q`` style conditions are written as GT on the same threshold; the
    two differ only on exact ties.
    """

    feature_id: int
    feature: str
    cmp: str
    threshold: float
    percentile: int = -1

    @property
    def key(self) -> tuple:
        return (self.feature_id, CMP_ORDER[self.cmp], self.threshold)

    def __call__(self, x) -> bool:
        v = x[self.feature_id]
        return bool(v <= self.threshold) if self.cmp == "LE" else bool(v > self.threshold)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        col = X[:, self.feature_id]
        return col <= self.threshold if self.cmp == "LE" else col > self.threshold

    def to_dict(self) -> dict:
        return {"feature": self.feature, "cmp": self.cmp, "threshold": self.threshold, "percentile": self.percentile}

    def describe(self) -> str:
        op = "<=" if self.cmp == "LE" else ">"
        tag = f"p{self.percentile}" if self.percentile >= 0 else f"{self.threshold:g}"
        return f"({self.feature} {op} {tag})"


def build_vocabulary(table: ThresholdTable) -> list[Predicate]:
    """Every (feature, LE/GT, percentile) predicate, deduplicated and in canonical order."""
    seen = {}
    for fid, name in enumerate(table.names):
        for j, p in enumerate(table.percents):
            thr = float(table.values[fid, j])
            for cmp in ("LE", "GT"):
                pred = Predicate(fid, name, cmp, thr, int(p))
                if pred.key not in seen:
                    seen[pred.key] = pred
    return [seen[k] for k in sorted(seen)]


@dataclass(frozen=True)
class Consequent:
    kind: str
    value: object = None

    def __post_init__(self):
        if self.kind not in CONSEQUENT_KINDS:
            raise ValueError(f"unknown consequent kind {self.kind!r}")

    def describe(self) -> str:
        if self.kind == "upper":
            return f"Bitrate <= {self.value:g}"
        if self.kind == "lower":
            return f"Bitrate >= {self.value:g}"
        if self.kind == "allow":
            return f"AllowServer{self.value}"
        if self.kind == "risky":
            return "Risky"
        return str(self.value)


@dataclass
class Rule:
    id: int
    predicates: tuple
    consequent: Consequent
    precision: float = 0.0
    coverage: int = 0
    priority: float = 0.0

    def __post_init__(self):
        self.predicates = tuple(sorted(self.predicates, key=lambda p: p.key))

    def __call__(self, x) -> bool:
        return all(p(x) for p in self.predicates)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "predicates": [p.to_dict() for p in self.predicates],
            "consequent": {"kind": self.consequent.kind, "value": self.consequent.value},
            "precision": self.precision,
            "coverage": self.coverage,
            "priority": self.priority,
        }

    def describe(self) -> str:
        body = " & ".join(p.describe() for p in self.predicates) or "(true)"
        return f"r{self.id}: {body} => {self.consequent.describe()}  [precision={self.precision:.3f} coverage={self.coverage}]"


def rules_to_json(rules) -> str:
    return json.dumps([r.to_dict() for r in rules], indent=1, sort_keys=True)


def rules_from_json(text: str, feature_names) -> list[Rule]:
    names = list(feature_names)
    out = []
    for d in json.loads(text):
        preds = []
        for p in d["predicates"]:
            if p["feature"] not in names:
                raise ValueError(f"unknown feature {p['feature']!r}")
            preds.append(
                Predicate(names.index(p["feature"]), p["feature"], p["cmp"], float(p["threshold"]), int(p.get("percentile", -1)))
            )
        c = d["consequent"]
        out.append(
            Rule(
                int(d["id"]),
                tuple(preds),
                Consequent(c["kind"], c.get("value")),
                float(d.get("precision", 0.0)),
                int(d.get("coverage", 0)),
                float(d.get("priority", 0.0)),
            )
        )
    return out


def save_rules(rules, path: str | Path) -> None:
    Path(path).write_text(rules_to_json(rules) + "\n")


def load_rules(path: str | Path, feature_names) -> list[Rule]:
    return rules_from_json(Path(path).read_text(), feature_names)


def dump_rules(rules) -> str:
    return "\n".join(r.describe() for r in rules) + ("\n" if rules else "")


# --------------------------------------------------------------------------
# Learning
# --------------------------------------------------------------------------


@dataclass
class RuleParams:
    max_conjuncts: int = 4
    min_coverage: int = 5
    min_precision: float = 0.9
    bound_percentile: float = 50.0


@dataclass
class _Target:
    kind: str
    value: object
    positive: np.ndarray
    population: np.ndarray


def _targets(dataset) -> list[_Target]:
    n = len(dataset)
    labels = dataset.label_array()
    everyone = np.ones(n, dtype=bool)
    if dataset.env == "lb":
        risky = dataset.risky_array()
        out = [_Target("risky", True, risky, everyone)]
        masks = dataset.mask_array()
        for i in range(masks.shape[1]):
            out.append(_Target("allow", i, risky & masks[:, i], risky))
        return out
    if dataset.env == "abr":
        return [
            _Target("upper", None, labels == BACK_OFF, everyone),
            _Target("lower", None, labels == PUSH_HARDER, everyone),
        ]
    return [
        _Target("label", BACK_OFF, labels == BACK_OFF, everyone),
        _Target("label", PUSH_HARDER, labels == PUSH_HARDER, everyone),
    ]


def _grow(B, work, pos, params):
    """Greedy conjunction growth; returns predicate indices or None."""
    body = []
    cur = work.copy()
    n0 = int(cur.sum())
    tp0 = int((cur & pos).sum())
    cur_prec = tp0 / n0 if n0 else 0.0
    if tp0 >= params.min_coverage and cur_prec >= params.min_precision:
        return body
    P = B.shape[1]
    for _ in range(params.max_conjuncts):
        sub = B[cur]
        tp = sub[pos[cur]].sum(axis=0)
        cov = sub.sum(axis=0)
        best, best_key = -1, None
        for j in range(P):
            if j in body or tp[j] < params.min_coverage or cov[j] == 0:
                continue
            prec = tp[j] / cov[j]
            if prec <= cur_prec:
                continue
            key = (prec, cov[j], -j)
            if best_key is None or key > best_key:
                best, best_key = j, key
        if best < 0:
            return None
        body.append(best)
        cur &= B[:, best]
        cur_prec = best_key[0]
        if cur_prec >= params.min_precision:
            return body
    return None


def learn_rules(dataset, vocab, params: RuleParams | None = None) -> list[Rule]:
    """Sequential covering per consequent class over the whole (cumulative) dataset.

    A pure function of ``dataset``: nothing from earlier rule sets is consulted.
    """
    params = params or RuleParams()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    X = dataset.feature_matrix()
    ref_vals = dataset.ref_value_array()
    B = np.column_stack([p.evaluate(X) for p in vocab]) if vocab else np.zeros((len(X), 0), dtype=bool)
    found = []
    for tgt in _targets(dataset):
        pos_all = tgt.positive & tgt.population
        neg = tgt.population & ~tgt.positive
        remaining = pos_all.copy()
        while remaining.sum() >= params.min_coverage:
            body = _grow(B, remaining | neg, remaining, params)
            if body is None:
                break
            matched = np.all(B[:, body], axis=1) if body else np.ones(len(X), dtype=bool)
            covered = matched & tgt.population
            n_cov = int(covered.sum())
            n_pos = int((covered & tgt.positive).sum())
            value = tgt.value
            if tgt.kind in ("upper", "lower"):
                value = nearest_rank(ref_vals[covered & tgt.positive], params.bound_percentile)
            found.append((tuple(vocab[j] for j in body), Consequent(tgt.kind, value), n_pos / n_cov, n_cov))
            remaining &= ~matched
    order = sorted(range(len(found)), key=lambda i: (-found[i][2], -found[i][3], i))
    rules = []
    for rank, i in enumerate(order):
        preds, cons, prec, cov = found[i]
        rules.append(Rule(rank, preds, cons, prec, cov, float(len(order) - rank)))
    return rules


def rule_stats(rule: Rule, dataset) -> tuple[float, int]:
    """Recompute ``(precision, coverage)`` of ``rule`` on ``dataset``."""
    X = dataset.feature_matrix()
    matched = np.ones(len(X), dtype=bool)
    for p in rule.predicates:
        matched &= p.evaluate(X)
    for tgt in _targets(dataset):
        if tgt.kind != rule.consequent.kind:
            continue
        if tgt.kind in ("allow", "label") and tgt.value != rule.consequent.value:
            continue
        covered = matched & tgt.population
        n = int(covered.sum())
        return (float((covered & tgt.positive).sum()) / n if n else 0.0), n
    raise ValueError("rule consequent does not match the dataset's targets")


# --------------------------------------------------------------------------
# Trie
# --------------------------------------------------------------------------


@dataclass
class TrieNode:
    predicate: Predicate | None = None
    children: dict = field(default_factory=dict)
    terminals: list = field(default_factory=list)


@dataclass
class PredicateTrie:
    root: TrieNode
    n_rules: int
    n_nodes: int
    rules: tuple = ()


def build_trie(rules) -> PredicateTrie:
    """Merge rules sharing a canonical predicate prefix into one tree."""
    ids = [r.id for r in rules]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate rule ids")
    root = TrieNode()
    nodes = 0
    for r in rules:
        node = root
        for p in r.predicates:
            child = node.children.get(p.key)
            if child is None:
                child = TrieNode(p)
                node.children[p.key] = child
                nodes += 1
            node = child
        node.terminals.append(r)
    _sort_children(root)
    return PredicateTrie(root, len(rules), nodes, tuple(rules))


def _sort_children(node):
    node.children = dict(sorted(node.children.items()))
    for c in node.children.values():
        _sort_children(c)


@dataclass(frozen=True)
class Adjudication:
    fired: tuple = ()
    label: str = ABSTAIN
    winners: tuple = ()  # ((kind, rule_id), ...)
    lower: float = -math.inf
    upper: float = math.inf
    allow: frozenset = frozenset()
    risky: bool = False
    evals: int = 0

    @property
    def abstain(self) -> bool:
        return not self.fired


_LABEL_OF = {"upper": BACK_OFF, "lower": PUSH_HARDER}


def combine(fired_rules, evals: int = 0) -> Adjudication:
    """Resolve fired rules: best priority per kind (ties to lowest id), tightest bounds, union of allows."""
    if not fired_rules:
        return Adjudication(evals=evals)
    best = {}
    lower, upper = -math.inf, math.inf
    allow = set()
    risky = False
    for r in fired_rules:
        k = r.consequent.kind
        cur = best.get(k)
        if cur is None or (r.priority, -r.id) > (cur.priority, -cur.id):
            best[k] = r
        if k == "upper":
            upper = min(upper, float(r.consequent.value))
        elif k == "lower":
            lower = max(lower, float(r.consequent.value))
        elif k == "allow":
            allow.add(int(r.consequent.value))
        elif k == "risky":
            risky = True
    label = ABSTAIN
    directional = [best[k] for k in ("label", "upper", "lower") if k in best]
    if directional:
        top = max(directional, key=lambda r: (r.priority, -r.id))
        label = top.consequent.value if top.consequent.kind == "label" else _LABEL_OF[top.consequent.kind]
    return Adjudication(
        tuple(sorted(r.id for r in fired_rules)),
        label,
        tuple(sorted((k, r.id) for k, r in best.items())),
        lower,
        upper,
        frozenset(allow),
        risky,
        evals,
    )


def _check_width(trie_or_rules, x):
    need = -1
    for r in trie_or_rules:
        for p in r.predicates:
            need = max(need, p.feature_id)
    if need >= len(x):
        raise ValueError(f"feature vector too short: needs index {need}")


def match(trie: PredicateTrie, x) -> Adjudication:
    """Depth-first trie evaluation; a false predicate prunes its whole subtree."""
    x = np.asarray(x, dtype=np.float64)
    _check_width(trie.rules, x)
    fired = list(trie.root.terminals)
    evals = 0
    stack = list(reversed(trie.root.children.values()))
    while stack:
        node = stack.pop()
        evals += 1
        if not node.predicate(x):
            continue
        fired.extend(node.terminals)
        stack.extend(reversed(node.children.values()))
    return combine(fired, evals)


def naive_match(rules, x) -> Adjudication:
    """Evaluate every rule independently (short-circuit within a rule)."""
    x = np.asarray(x, dtype=np.float64)
    _check_width(rules, x)
    fired = []
    evals = 0
    for r in rules:
        ok = True
        for p in r.predicates:
            evals += 1
            if not p(x):
                ok = False
                break
        if ok:
            fired.append(r)
    return combine(fired, evals)
