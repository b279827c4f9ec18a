"""Task metrics and the statistical comparison machinery.

ROC AUC is computed from rank statistics (ties get half credit), the
Mann-Whitney U test is exact by enumeration for small samples, and the
method ranking table groups statistically indistinguishable methods under
shared ranks after a Holm-Bonferroni correction.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata, norm, pearsonr, spearmanr

UNDEFINED = float("nan")


# ---------------------------------------------------------------------------
# task metrics

def accuracy(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.ndim == 2:
        preds = preds.argmax(axis=1)
    if len(preds) != len(labels):
        raise ValueError("accuracy: length mismatch")
    return float((preds == labels).mean())


def r2(preds, targets):
    preds = np.asarray(preds, dtype=float).ravel()
    targets = np.asarray(targets, dtype=float).ravel()
    if len(preds) != len(targets):
        raise ValueError("r2: length mismatch")
    ss_tot = float(((targets - targets.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("r2: zero target variance")
    ss_res = float(((targets - preds) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def roc_auc(scores, labels):
    """Probability that a random positive outranks a random negative,
    ties counted half. Rank-statistic form of the pair-counting definition."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if len(scores) != len(labels):
        raise ValueError("roc_auc: length mismatch")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc: both classes must be present")
    ranks = rankdata(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def mean_roc_auc(scores, labels):
    """Unweighted mean of per-label AUCs; single-class labels are skipped.

    Returns (mean_auc, n_skipped)."""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    labels = np.atleast_2d(np.asarray(labels))
    if scores.shape != labels.shape:
        raise ValueError("mean_roc_auc: shape mismatch")
    aucs, skipped = [], 0
    for j in range(scores.shape[1]):
        col = labels[:, j]
        if len(np.unique(col)) < 2:
            skipped += 1
            continue
        aucs.append(roc_auc(scores[:, j], col))
    if not aucs:
        raise ValueError("mean_roc_auc: every label is single-class")
    return float(np.mean(aucs)), skipped


# ---------------------------------------------------------------------------
# hypothesis testing

def _u_statistic(a, b):
    # U for sample a: number of (a_i, b_j) pairs with a_i > b_j, ties = 1/2
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    n = len(a)
    return float(ranks[:n].sum() - n * (n + 1) / 2)


EXACT_LIMIT = 8


def mann_whitney_u(sample_a, sample_b):
    """Two-sided Mann-Whitney U test.

    Exact permutation p-value when both samples have at most 8 elements,
    otherwise the normal approximation with tie and continuity correction.
    Returns (U of sample_a, p)."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("mann_whitney_u: empty sample")
    n, m = len(a), len(b)
    u_obs = _u_statistic(a, b)
    if n <= EXACT_LIMIT and m <= EXACT_LIMIT:
        p = _exact_p(a, b, u_obs)
    else:
        p = _normal_p(a, b, u_obs)
    return u_obs, p


def _exact_p(a, b, u_obs):
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    n, m = len(a), len(b)
    center = n * m / 2.0
    dev = abs(u_obs - center)
    total = math.comb(n + m, n)
    hits = 0
    base = n * (n + 1) / 2
    for combo in itertools.combinations(range(n + m), n):
        u = ranks[list(combo)].sum() - base
        if abs(u - center) >= dev - 1e-12:
            hits += 1
    return hits / total


def _normal_p(a, b, u_obs):
    n, m = len(a), len(b)
    pooled = np.concatenate([a, b])
    big_n = n + m
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = (counts ** 3 - counts).sum()
    var = n * m / 12.0 * (big_n + 1 - tie_term / (big_n * (big_n - 1)))
    if var == 0:
        return 1.0
    mean = n * m / 2.0
    z = (abs(u_obs - mean) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    return float(min(1.0, 2.0 * norm.sf(z)))


def holm_bonferroni(p_values):
    """Step-down Holm adjustment, capped at 1, returned in input order."""
    p = np.asarray(p_values, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("holm_bonferroni: p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 0.0
    for i, idx in enumerate(order):
        running = max(running, (m - i) * p[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted


# ---------------------------------------------------------------------------
# run records

@dataclass
class RunRecord:
    method: str
    dataset: str
    seed: int
    split_metrics: dict            # split name -> metric value
    metric_name: str
    state: str = "completed"       # completed | failed

    def to_json(self):
        return {"method": self.method, "dataset": self.dataset,
                "seed": self.seed, "split_metrics": self.split_metrics,
                "metric_name": self.metric_name, "state": self.state}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["method"], obj["dataset"], int(obj["seed"]),
                   dict(obj["split_metrics"]), obj["metric_name"],
                   obj.get("state", "completed"))


# ---------------------------------------------------------------------------
# comparison reports

@dataclass
class MethodSummary:
    method: str
    mean: float
    std: float
    ranks: set = field(default_factory=set)


@dataclass
class ComparisonReport:
    methods: list                 # MethodSummary, sorted best first
    raw_p: dict                   # (method_a, method_b) -> p
    adjusted_p: dict              # (method_a, method_b) -> Holm-adjusted p
    alpha: float = 0.01
    higher_is_better: bool = True

    def to_csv(self):
        lines = ["method,mean,std,ranks"]
        for s in self.methods:
            ranks = "|".join(str(r) for r in sorted(s.ranks))
            std = "" if math.isnan(s.std) else f"{s.std:.6g}"
            lines.append(f"{s.method},{s.mean:.6g},{std},{ranks}")
        lines.append("")
        lines.append("method_a,method_b,p_raw,p_holm")
        for (a, b), p in sorted(self.raw_p.items()):
            lines.append(f"{a},{b},{p:.6g},{self.adjusted_p[(a, b)]:.6g}")
        return "\n".join(lines) + "\n"

    def to_markdown(self):
        lines = ["| Method | Metric | Rank |", "| --- | --- | --- |"]
        for s in self.methods:
            sup = ",".join(str(r) for r in sorted(s.ranks))
            std = "nan" if math.isnan(s.std) else f"{s.std:.3f}"
            lines.append(f"| {s.method} | {s.mean:.3f} ± {std} ^{sup} |"
                         f" {sup} |")
        return "\n".join(lines) + "\n"


def rank_groups(method_metrics, alpha=0.01, higher_is_better=True):
    """Build a ComparisonReport from a {method: [per-seed metric]} map.

    Methods are sorted by mean (best first). Walking down the sorted list,
    a method joins every earlier group whose best-mean representative it is
    statistically indistinguishable from (Holm-adjusted p > alpha); if it
    joins none it opens a new rank. Methods can therefore carry several
    ranks."""
    if len(method_metrics) < 2:
        raise ValueError("rank_groups: need at least 2 methods")
    for name, vals in method_metrics.items():
        if len(vals) < 2:
            raise ValueError(f"rank_groups: method '{name}' has fewer than 2 seeds")
    names = sorted(method_metrics,
                   key=lambda k: float(np.mean(method_metrics[k])),
                   reverse=higher_is_better)
    pairs = list(itertools.combinations(names, 2))
    raw = {}
    for a, b in pairs:
        _, p = mann_whitney_u(method_metrics[a], method_metrics[b])
        raw[(a, b)] = p
    adj_vals = holm_bonferroni([raw[p] for p in pairs])
    adj = {pair: float(v) for pair, v in zip(pairs, adj_vals)}

    def p_of(a, b):
        return adj[(a, b)] if (a, b) in adj else adj[(b, a)]

    summaries = []
    groups = []  # (rank, representative)
    max_rank = 0
    for name in names:
        vals = np.asarray(method_metrics[name], dtype=float)
        s = MethodSummary(name, float(vals.mean()),
                          float(vals.std(ddof=1)) if len(vals) > 1 else UNDEFINED)
        joined = False
        for rank, rep in groups:
            if p_of(name, rep) > alpha:
                s.ranks.add(rank)
                joined = True
        if not joined:
            max_rank += 1
            groups.append((max_rank, name))
            s.ranks.add(max_rank)
        summaries.append(s)
    return ComparisonReport(summaries, raw, adj, alpha=alpha,
                            higher_is_better=higher_is_better)


# ---------------------------------------------------------------------------
# split-metric correlations

SPLIT_PAIRS = [("train", "train-val"), ("train-val", "hpo-val"),
               ("hpo-val", "test"), ("train-val", "test")]


def subset_correlation(records):
    """Pearson/Spearman correlation between split metrics across runs.

    `records` is a list of RunRecord-like objects with a .split_metrics map.
    Returns {(split_a, split_b): (pearson_r, spearman_rho)}, with NaN markers
    when a column is constant."""
    if len(records) < 3:
        raise ValueError("subset_correlation: need at least 3 records")
    out = {}
    for a, b in SPLIT_PAIRS:
        xs = np.array([r.split_metrics[a] for r in records
                       if a in r.split_metrics and b in r.split_metrics])
        ys = np.array([r.split_metrics[b] for r in records
                       if a in r.split_metrics and b in r.split_metrics])
        if len(xs) < 3:
            continue
        if np.std(xs) == 0 or np.std(ys) == 0:
            out[(a, b)] = (UNDEFINED, UNDEFINED)
            continue
        out[(a, b)] = (float(pearsonr(xs, ys)[0]), float(spearmanr(xs, ys)[0]))
    return out


def correlation_csv(correlations):
    lines = ["split_a,split_b,pearson_r,spearman_rho"]
    for (a, b), (r, rho) in correlations.items():
        fr = "undefined" if math.isnan(r) else f"{r:.6g}"
        frho = "undefined" if math.isnan(rho) else f"{rho:.6g}"
        lines.append(f"{a},{b},{fr},{frho}")
    return "\n".join(lines) + "\n"
