"""Robustness experiments: event-order permutation (test time and
retrain), random timestamps, and top-k ablation over a categorical
hyperparameter such as the time-feature mode.

Relative drops are reported as (stressed - baseline) / |baseline| * 100,
so a degradation is negative. Baselines and stressed scores share the
same seed set; significance uses Mann-Whitney with a Holm correction
across the methods in one report, plus an informational paired sign test
since seeds are shared.
"""

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import binomtest

from . import models as M
from .data import Dataset, preprocess
from .hpo import final_eval, train_with_spec, _score, _trial_seed, summarize
from .stats import holm_bonferroni, mann_whitney_u

PERMUTATION = "permutation"
RANDOM_TIMESTAMPS = "random_timestamps"
STRESS_KINDS = (PERMUTATION, RANDOM_TIMESTAMPS)


# ---------------------------------------------------------------------------
# transforms (pure; per-sequence rng supplied by the caller)

def permute_events(seq, rng):
    """Shuffle events 0..n-2 uniformly, keeping the last event in place.

    The timestamp travels with its event, so the multiset of
    (time, feature) rows is preserved and the output times are generally
    no longer monotone. Length-1 sequences are returned unchanged."""
    n = len(seq)
    if n <= 1:
        return seq
    order = np.concatenate([rng.permutation(n - 1), [n - 1]])
    return replace(seq,
                   times=seq.times[order],
                   numeric=seq.numeric[:, order],
                   categorical=seq.categorical[:, order],
                   mask=seq.mask[:, order])


def randomize_timestamps(seq, rng):
    """Replace times with sorted i.i.d. Uniform(0,1) draws; values untouched."""
    times = np.sort(rng.uniform(0.0, 1.0, len(seq)))
    return replace(seq, times=times)


_TRANSFORMS = {PERMUTATION: permute_events,
               RANDOM_TIMESTAMPS: randomize_timestamps}


def stressed_dataset(ds, indices, kind, master_seed=0):
    """Apply a stress transform to the selected sequences, returning a new
    dataset holding only those sequences (in the given index order). Each
    sequence gets its own rng derived from the master seed, so the result
    is reproducible regardless of evaluation order."""
    if kind not in _TRANSFORMS:
        raise ValueError(f"unknown stress kind '{kind}'")
    if not ds.preprocessed:
        raise ValueError("stress transforms require a preprocessed dataset")
    fn = _TRANSFORMS[kind]
    out = []
    for j, i in enumerate(indices):
        rng = np.random.default_rng(np.random.SeedSequence([master_seed, j]))
        out.append(fn(ds.sequences[i], rng))
    return Dataset(ds.schema, out, time_scale=ds.time_scale,
                   preprocessed=True)


# ---------------------------------------------------------------------------
# test-time stress report

@dataclass
class StressRow:
    method: str
    dataset: str
    kind: str
    baseline_mean: float
    baseline_std: float
    stressed_mean: float
    stressed_std: float
    relative_drop_pct: float
    p_value: float
    p_holm: float
    significant: bool
    sign_test_p: float


@dataclass
class StressReport:
    rows: list
    alpha: float = 0.01

    def to_csv(self):
        lines = ["method,dataset,kind,baseline_mean,baseline_std,"
                 "stressed_mean,stressed_std,relative_drop_pct,p_raw,"
                 "p_holm,significant,sign_test_p"]
        for r in self.rows:
            lines.append(
                f"{r.method},{r.dataset},{r.kind},{r.baseline_mean:.6g},"
                f"{r.baseline_std:.6g},{r.stressed_mean:.6g},"
                f"{r.stressed_std:.6g},{r.relative_drop_pct:.2f},"
                f"{r.p_value:.6g},{r.p_holm:.6g},{int(r.significant)},"
                f"{r.sign_test_p:.6g}")
        return "\n".join(lines) + "\n"

    def to_markdown(self):
        lines = ["| Method | Baseline | Stressed | Drop |",
                 "| --- | --- | --- | --- |"]
        for r in self.rows:
            star = "\\*" if r.significant else ""
            lines.append(
                f"| {r.method} | {r.baseline_mean:.3f} ± "
                f"{r.baseline_std:.3f} | {r.stressed_mean:.3f} ± "
                f"{r.stressed_std:.3f} | {r.relative_drop_pct:.2f} %{star} |")
        return "\n".join(lines) + "\n"


def stress_eval(method_runs, ds, test, kind, master_seed=0, alpha=0.01,
                dataset_name="dataset"):
    """Score already-trained final_eval models on a stressed test set.

    `method_runs` maps method name to a list of (RunRecord, TrainedModel)
    pairs, one per seed. The baseline is the record's clean test metric;
    the stressed metric re-scores the same model on the transformed test
    sequences, so both samples share a seed set."""
    if kind not in _TRANSFORMS:
        raise ValueError(f"unknown stress kind '{kind}'")
    sds = stressed_dataset(ds, test, kind, master_seed)
    s_indices = list(range(len(sds)))
    rows, raw_ps = [], []
    for method, runs in method_runs.items():
        runs = [(rec, tm) for rec, tm in runs if rec.state == "completed"]
        if len(runs) < 10:
            raise ValueError(f"stress_eval: method '{method}' has "
                             f"{len(runs)} seeds, need >= 10")
        base, stressed = [], []
        for rec, tm in runs:
            base.append(rec.split_metrics["test"])
            stressed.append(_score(tm, sds, s_indices, rec.metric_name,
                                   "test-scoring"))
        base = np.array(base)
        stressed = np.array(stressed)
        _, p = mann_whitney_u(stressed, base)
        raw_ps.append(p)
        n_worse = int((stressed < base).sum())
        n_diff = int((stressed != base).sum())
        sign_p = (binomtest(n_worse, n_diff).pvalue if n_diff else 1.0)
        bm = float(base.mean())
        drop = (float(stressed.mean()) - bm) / abs(bm) * 100.0
        rows.append(StressRow(
            method, dataset_name, kind, bm,
            float(base.std(ddof=1)), float(stressed.mean()),
            float(stressed.std(ddof=1)), drop, float(p), math.nan, False,
            float(sign_p)))
    holm = holm_bonferroni(raw_ps)
    for row, ph in zip(rows, holm):
        row.p_holm = float(ph)
        row.significant = bool(ph < alpha)
    return StressReport(rows, alpha)


# ---------------------------------------------------------------------------
# retrain with permuted sequences (order information destroyed end to end)

@dataclass
class RetrainComparison:
    vanilla_mean: float
    vanilla_std: float
    permuted_mean: float
    permuted_std: float
    gap: float                  # vanilla - permuted
    p_value: float
    significant: bool
    records: list


def _fully_permuted(ds, pool, test, master_seed):
    pre = preprocess(ds, list(pool))
    out = []
    for i, seq in enumerate(pre.sequences):
        rng = np.random.default_rng(
            np.random.SeedSequence([master_seed, 60000 + i]))
        out.append(permute_events(seq, rng))
    return Dataset(pre.schema, out, time_scale=pre.time_scale,
                   preprocessed=True)


def retrain_permuted(ds, pool, test, spec, bhp, vanilla_records,
                     n_seeds=20, master_seed=0, metric_name=None, jobs=1,
                     alpha=0.01, dataset_name="dataset"):
    """Drop time from the encoder, permute both training and test
    sequences, retrain from scratch over the usual seed sweep, and compare
    against the vanilla records of the same method."""
    spec_nt = replace(spec, base_encoder=tuple(
        [(k, v) for k, v in spec.base_encoder if k != "time_mode"]
        + [("time_mode", M.TIME_NONE)]))
    bhp = {k: v for k, v in bhp.items() if k != "time_mode"}
    pds = _fully_permuted(ds, pool, test, master_seed)
    records = final_eval(pds, pool, test, spec_nt, bhp, n_seeds=n_seeds,
                         master_seed=master_seed, metric_name=metric_name,
                         jobs=jobs, dataset_name=dataset_name)
    pm, ps = summarize(records)
    vvals = [r.split_metrics["test"] for r in vanilla_records
             if r.state == "completed"]
    pvals = [r.split_metrics["test"] for r in records
             if r.state == "completed"]
    _, p = mann_whitney_u(pvals, vvals)
    vm = float(np.mean(vvals))
    return RetrainComparison(vm, float(np.std(vvals, ddof=1)), pm, ps,
                             vm - pm, float(p), bool(p < alpha), records)


# ---------------------------------------------------------------------------
# top-k categorical ablation (time-feature mode, aggregation, batchnorm, ...)

@dataclass
class AblationGroup:
    label: str
    n_trials: int
    mean: float
    std: float
    metrics: list


@dataclass
class AblationReport:
    param: str
    groups: list                # ordered as passed in
    improvement: float          # last group mean - first group mean
    p_value: float
    significant: bool

    def to_csv(self):
        lines = ["option,n_trials,mean,std"]
        for g in self.groups:
            lines.append(f"{g.label},{g.n_trials},{g.mean:.6g},{g.std:.6g}")
        lines.append(f"# improvement={self.improvement:.6g} "
                     f"p={self.p_value:.6g} "
                     f"significant={int(self.significant)}")
        return "\n".join(lines) + "\n"


def _ablation_retrain_worker(args):
    pre, split, spec, params, seed, metric_name = args
    tm = train_with_spec(pre, split, spec, params, seed, metric_name)
    return float(_score(tm, pre, split.test, metric_name, "test-scoring"))


def option_ablation(ds, split, spec, trials, param, option_groups,
                    top_k=3, n_seeds=3, master_seed=0, metric_name=None,
                    alpha=0.01, jobs=1):
    """Compare values of one categorical hyperparameter: per option group,
    take the top-k completed HPO trials whose `param` falls in the group,
    retrain each over a few seeds on the fixed split, and pool the test
    metrics. Significance is a Mann-Whitney test between the two pooled
    samples (exactly two groups expected)."""
    if len(option_groups) != 2:
        raise ValueError("option_ablation compares exactly two groups")
    if metric_name is None:
        metric_name = M.default_metric(ds.schema)
    pre = preprocess(ds, split.train)
    groups = []
    for label, values in option_groups.items():
        cand = [t for t in trials if t.state == "completed"
                and t.params.get(param) in values]
        if not cand:
            raise ValueError(f"option '{label}': no completed trials")
        cand.sort(key=lambda t: t.hpo_val_metric, reverse=True)
        if len(cand) < top_k:
            warnings.warn(f"option '{label}': only {len(cand)} trials "
                          f"available, wanted {top_k}")
        chosen = cand[:top_k]
        args = [(pre, split, spec, trial.params,
                 _trial_seed(master_seed, 70000 + 100 * j + s), metric_name)
                for j, trial in enumerate(chosen) for s in range(n_seeds)]
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                metrics = list(ex.map(_ablation_retrain_worker, args))
        else:
            metrics = [_ablation_retrain_worker(a) for a in args]
        groups.append(AblationGroup(
            label, len(chosen), float(np.mean(metrics)),
            float(np.std(metrics, ddof=1)) if len(metrics) > 1
            else math.nan, metrics))
    a, b = groups
    if a.metrics == b.metrics:
        p = 1.0
    else:
        _, p = mann_whitney_u(b.metrics, a.metrics)
    improvement = b.mean - a.mean
    return AblationReport(param, groups, improvement, float(p),
                          bool(p < alpha and improvement > 0))


def time_ablation(ds, split, spec, trials, top_k=3, n_seeds=3,
                  master_seed=0, metric_name=None, alpha=0.01, jobs=1):
    """Comparison of encoders without any time feature versus the same
    search space with delta or absolute time."""
    groups = {"w/o time": (M.TIME_NONE,),
              "with time": (M.TIME_DELTA, M.TIME_ABSOLUTE)}
    return option_ablation(ds, split, spec, trials, "time_mode", groups,
                           top_k=top_k, n_seeds=n_seeds,
                           master_seed=master_seed, metric_name=metric_name,
                           alpha=alpha, jobs=jobs)
