"""TPE hyperparameter search and the two-phase evaluation protocol:
an HPO phase on a fixed 70/15/15 split selects the best hyperparameters
(BHP) by hpo-val metric, then a final phase retrains from scratch over
fresh 85/15 resplits with many seeds and scores the untouched test set.
"""

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm, spearmanr

from . import models as M
from .data import preprocess, stratified_split, subsample, Dataset
from .stats import RunRecord


# ---------------------------------------------------------------------------
# search space

@dataclass(frozen=True)
class RealParam:
    name: str
    lo: float
    hi: float
    log: bool = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"{self.name}: degenerate range")
        if self.log and self.lo <= 0:
            raise ValueError(f"{self.name}: log range must be positive")

    def sample(self, rng):
        if self.log:
            return float(np.exp(rng.uniform(np.log(self.lo), np.log(self.hi))))
        return float(rng.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class IntParam:
    name: str
    lo: int
    hi: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"{self.name}: degenerate range")

    def sample(self, rng):
        return int(rng.integers(self.lo, self.hi + 1))


@dataclass(frozen=True)
class CatParam:
    name: str
    choices: tuple

    def __post_init__(self):
        if not self.choices:
            raise ValueError(f"{self.name}: empty choice set")

    def sample(self, rng):
        return self.choices[int(rng.integers(len(self.choices)))]


@dataclass(frozen=True)
class ParamSpace:
    params: tuple

    def sample(self, rng):
        return {p.name: p.sample(rng) for p in self.params}

    def contains(self, assignment):
        for p in self.params:
            v = assignment[p.name]
            if isinstance(p, CatParam):
                if v not in p.choices:
                    return False
            elif not (p.lo <= v <= p.hi):
                return False
        return True


@dataclass(frozen=True)
class TPEConfig:
    gamma: float = 0.25
    n_startup: int = 10
    n_candidates: int = 24
    # Kernel width never shrinks below this fraction of the (transformed)
    # range; a generous floor keeps late iterations exploring instead of
    # collapsing onto the good-set mean.
    bandwidth_floor: float = 0.1

    def __post_init__(self):
        if not (0 < self.gamma < 1) or self.n_startup < 2:
            raise ValueError("require 0 < gamma < 1 and n_startup >= 2")


@dataclass
class Trial:
    params: dict
    hpo_val_metric: float = None
    state: str = "completed"          # completed | failed

    def to_json(self):
        return {"params": self.params, "hpo_val_metric": self.hpo_val_metric,
                "state": self.state}

    @classmethod
    def from_json(cls, obj):
        return cls(dict(obj["params"]), obj.get("hpo_val_metric"),
                   obj.get("state", "completed"))


@dataclass
class HpoResult:
    trials: list
    best_params: dict
    n_hpo: int

    @staticmethod
    def select_best(trials):
        best, best_metric = None, -np.inf
        for t in trials:
            if t.state == "completed" and t.hpo_val_metric > best_metric:
                best, best_metric = t, t.hpo_val_metric
        if best is None:
            raise RuntimeError("no completed trials")
        return dict(best.params)


# ---------------------------------------------------------------------------
# Parzen estimators

class _NumericParzen:
    """1-D mixture of range-truncated Gaussians with a Scott bandwidth."""

    def __init__(self, values, lo, hi, log, floor_frac):
        self.log = log
        self.lo, self.hi = (math.log(lo), math.log(hi)) if log else (lo, hi)
        v = np.log(values) if log else np.asarray(values, dtype=float)
        self.centers = v
        n = len(v)
        spread = v.std() if n > 1 else 0.0
        self.bw = max(spread * n ** (-0.2),
                      floor_frac * (self.hi - self.lo))
        self.trunc = (norm.cdf((self.hi - self.centers) / self.bw)
                      - norm.cdf((self.lo - self.centers) / self.bw))
        self.trunc = np.maximum(self.trunc, 1e-12)

    def sample(self, rng):
        c = self.centers[int(rng.integers(len(self.centers)))]
        for _ in range(16):
            x = rng.normal(c, self.bw)
            if self.lo <= x <= self.hi:
                break
        else:
            x = min(max(x, self.lo), self.hi)
        return math.exp(x) if self.log else x

    def log_density(self, value):
        x = math.log(value) if self.log else value
        z = (x - self.centers) / self.bw
        dens = (np.exp(-0.5 * z * z) / (self.bw * math.sqrt(2 * math.pi))
                / self.trunc).mean()
        return math.log(max(dens, 1e-300))


class _CategoricalParzen:
    def __init__(self, values, choices):
        counts = np.array([sum(v == c for v in values) + 1.0 for c in choices])
        self.choices = list(choices)
        self.probs = counts / counts.sum()

    def sample(self, rng):
        return self.choices[int(rng.choice(len(self.choices), p=self.probs))]

    def log_density(self, value):
        return math.log(self.probs[self.choices.index(value)])


def _fit_parzen(param, values, cfg):
    if isinstance(param, CatParam):
        return _CategoricalParzen(values, param.choices)
    return _NumericParzen(values, param.lo, param.hi,
                          getattr(param, "log", False), cfg.bandwidth_floor)


def tpe_suggest(space, trials, cfg, rng):
    """Suggest the next assignment; returns (assignment, phase) where
    phase is "random" during startup / fallback and "tpe" afterwards.

    Completed trials are split into a good set (top ceil(gamma*n) by
    metric) and a bad set; candidates are drawn from the good-set Parzen
    density l and ranked by sum over dimensions of log l - log g."""
    completed = [t for t in trials if t.state == "completed"]
    if len(completed) < cfg.n_startup:
        return space.sample(rng), "random"
    order = sorted(completed, key=lambda t: t.hpo_val_metric, reverse=True)
    n_good = int(math.ceil(cfg.gamma * len(order)))
    good, bad = order[:n_good], order[n_good:]
    if not bad:
        bad = good
    models = {}
    for p in space.params:
        l = _fit_parzen(p, [t.params[p.name] for t in good], cfg)
        g = _fit_parzen(p, [t.params[p.name] for t in bad], cfg)
        models[p.name] = (l, g)
    best_score, best = -np.inf, None
    for _ in range(cfg.n_candidates):
        cand, score = {}, 0.0
        for p in space.params:
            l, g = models[p.name]
            v = l.sample(rng)
            if isinstance(p, IntParam):
                v = int(round(min(max(v, p.lo), p.hi)))
            cand[p.name] = v
            score += l.log_density(v) - g.log_density(v)
        if score > best_score:
            best_score, best = score, cand
    return best, "tpe"


# ---------------------------------------------------------------------------
# method specifications

ENCODER_KEYS = {"kind", "hidden", "embed_dims", "aggregation", "time_mode",
                "input_batchnorm", "dropout", "n_ref_points", "n_freqs",
                "n_heads"}
TRAIN_KEYS = {"lr", "batch_size", "max_iters", "patience"}


@dataclass(frozen=True)
class MethodSpec:
    """Picklable recipe turning a hyperparameter assignment into configs.

    `pretrain="coles"` runs contrastive pretraining on the train split
    before supervised fine-tuning."""
    name: str
    base_encoder: tuple = ()          # sorted (key, value) pairs
    base_train: tuple = ()
    pretrain: str = None
    freeze_encoder: bool = False

    @classmethod
    def make(cls, name, encoder=None, train=None, pretrain=None,
             freeze_encoder=False):
        def freeze(d):
            return tuple(sorted((k, tuple(v) if isinstance(v, list) else v)
                                for k, v in (d or {}).items()))
        return cls(name, freeze(encoder), freeze(train), pretrain,
                   freeze_encoder)

    def build(self, params, seed):
        enc = dict(self.base_encoder)
        train = dict(self.base_train)
        for k, v in params.items():
            if k in ENCODER_KEYS:
                enc[k] = v
            elif k in TRAIN_KEYS:
                train[k] = v
            else:
                raise KeyError(f"hyperparameter '{k}' maps to no config field")
        if "input_batchnorm" in enc:
            enc["input_batchnorm"] = bool(enc["input_batchnorm"])
        if "batch_size" in train:
            train["batch_size"] = int(train["batch_size"])
        if "hidden" in enc:
            enc["hidden"] = int(enc["hidden"])
        train["seed"] = seed
        return M.EncoderConfig(**enc), M.TrainConfig(**train)


def train_with_spec(ds, split, spec, params, seed, metric_name=None):
    enc_cfg, train_cfg = spec.build(params, seed)
    init = None
    if spec.pretrain == "coles":
        pre_iters = max(1, train_cfg.max_iters // 4)
        pre_cfg = replace(train_cfg, max_iters=pre_iters)
        init = M.coles_pretrain(ds, split.train, enc_cfg, pre_cfg)
    return M.train_supervised(ds, split, enc_cfg, train_cfg,
                              metric_name=metric_name, init_encoder=init,
                              freeze_encoder=spec.freeze_encoder)


# ---------------------------------------------------------------------------
# the protocol

HPO_FRACTIONS = (0.7, 0.15, 0.15)
FINAL_FRACTIONS = (0.85, 0.15)


def _trial_seed(master, i):
    return int(np.random.SeedSequence([master, 1000 + i]).generate_state(1)[0]
               % (2 ** 31))


def hpo_run(ds, split, spec, space, n_hpo, seed, tpe_cfg=None,
            metric_name=None, trial_log=None, resume=False):
    """Algorithm: fixed split for the whole phase; each trial trains with
    early stopping against train-val and is scored on hpo-val. Failed
    (diverged) trials are recorded, not fatal."""
    tpe_cfg = tpe_cfg or TPEConfig()
    if metric_name is None:
        metric_name = M.default_metric(ds.schema)
    ds = preprocess(ds, split.train)
    trials = []
    if resume and trial_log and os.path.exists(trial_log):
        with open(trial_log) as fh:
            trials = [Trial.from_json(json.loads(line)) for line in fh
                      if line.strip()]
    log_fh = open(trial_log, "a") if trial_log else None
    try:
        for i in range(len(trials), n_hpo):
            # fresh per-trial stream keyed by trial index, so a resumed run
            # continues exactly where an uninterrupted one would
            rng = np.random.default_rng(np.random.SeedSequence([seed, 7, i]))
            params, _ = tpe_suggest(space, trials, tpe_cfg, rng)
            try:
                tm = train_with_spec(ds, split, spec, params,
                                     _trial_seed(seed, i), metric_name)
                metric = _score(tm, ds, split.hpo_val, metric_name,
                                "hpo-val-metric")
                trial = Trial(params, float(metric), "completed")
            except M.TrainingDiverged:
                trial = Trial(params, None, "failed")
            trials.append(trial)
            if log_fh:
                log_fh.write(json.dumps(trial.to_json()) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return HpoResult(trials, HpoResult.select_best(trials), n_hpo)


def _score(tm, ds, indices, metric_name, purpose):
    scores = M.predict(tm, ds, indices)
    targets = ds.targets(indices, purpose)
    return M.compute_metric(metric_name, scores, targets)


def _final_eval_worker(args):
    (ds, pool, test, spec, bhp, seed, metric_name, dataset_name) = args
    rng_seed = seed
    sub = stratified_split(ds, (FINAL_FRACTIONS[0], FINAL_FRACTIONS[1], 0.0),
                           seed=rng_seed, pool=pool, test=test)
    pre = preprocess(ds, sub.train)
    try:
        tm = train_with_spec(pre, sub, spec, bhp, rng_seed, metric_name)
    except M.TrainingDiverged:
        return RunRecord(spec.name, dataset_name, seed, {}, metric_name,
                         state="failed"), None
    split_metrics = {
        "train": _score(tm, pre, sub.train, metric_name, "train-metric"),
        "train-val": _score(tm, pre, sub.train_val, metric_name,
                            "train-val-metric"),
        "test": _score(tm, pre, test, metric_name, "test-scoring"),
    }
    return RunRecord(spec.name, dataset_name, seed, split_metrics,
                     metric_name), tm


def final_eval(ds, pool, test, spec, bhp, n_seeds=20, master_seed=0,
               metric_name=None, jobs=1, dataset_name="dataset",
               keep_models=False, min_successes=None):
    """Monte-Carlo evaluation: per seed a fresh stratified 85/15 resplit of
    the non-test pool, training from scratch with BHP, scoring on test."""
    if metric_name is None:
        metric_name = M.default_metric(ds.schema)
    seeds = [_trial_seed(master_seed, 5000 + s) for s in range(n_seeds)]
    args = [(ds, list(pool), tuple(test), spec, dict(bhp), s, metric_name,
             dataset_name) for s in seeds]
    if jobs > 1 and n_seeds > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_final_eval_worker, args))
    else:
        outs = [_final_eval_worker(a) for a in args]
    records = [r for r, _ in outs]
    trained = [tm for _, tm in outs if tm is not None]
    ok = [r for r in records if r.state == "completed"]
    need = min_successes if min_successes is not None else max(
        1, int(math.ceil(0.75 * n_seeds)))
    if len(ok) < need:
        raise RuntimeError(
            f"final_eval: only {len(ok)}/{n_seeds} seeds succeeded "
            f"(need {need})")
    if keep_models:
        return records, trained
    return records


def summarize(records):
    vals = [r.split_metrics["test"] for r in records if r.state == "completed"]
    mean = float(np.mean(vals))
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")
    return mean, std


def scaling_study(ds, pool, test, specs_with_bhp, sizes, n_seeds=3,
                  master_seed=0, metric_name=None, jobs=1,
                  dataset_name="dataset"):
    """Per (method, size): stratified subsample of the training pool, then
    a short Monte-Carlo final_eval. Returns
    {(method, size): (mean, std, records)}."""
    if sorted(sizes) != list(sizes):
        raise ValueError("sizes must be ascending")
    if sizes[-1] > len(pool):
        raise ValueError("largest size exceeds pool size")
    results = {}
    for spec, bhp in specs_with_bhp:
        for size in sizes:
            pool_ds = Dataset(ds.schema, [ds.sequences[i] for i in pool])
            sub = subsample(pool_ds, size,
                            seed=_trial_seed(master_seed, size))
            cell = Dataset(ds.schema,
                           list(sub.sequences) +
                           [ds.sequences[i] for i in test])
            cell_pool = list(range(size))
            cell_test = list(range(size, len(cell)))
            records = final_eval(cell, cell_pool, cell_test, spec, bhp,
                                 n_seeds=n_seeds,
                                 master_seed=master_seed + size,
                                 metric_name=metric_name, jobs=jobs,
                                 dataset_name=dataset_name,
                                 min_successes=n_seeds)
            mean, std = summarize(records)
            results[(spec.name, size)] = (mean, std, records)
    return results


def scaling_csv(results):
    lines = ["method,size,mean,std"]
    for (method, size), (mean, std, _) in sorted(results.items()):
        lines.append(f"{method},{size},{mean:.6g},{std:.6g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# hyperparameter importance (simple heuristic)

def param_importance(trials):
    """Absolute Spearman correlation between each parameter and the metric,
    normalized to sum 1. Categorical levels are encoded by their level-mean
    metric before correlating."""
    done = [t for t in trials if t.state == "completed"]
    if len(done) < 20:
        raise ValueError("param_importance needs >= 20 completed trials")
    metrics = np.array([t.hpo_val_metric for t in done])
    names = sorted(done[0].params)
    raw = {}
    for name in names:
        vals = [t.params[name] for t in done]
        if isinstance(vals[0], str) or isinstance(vals[0], bool):
            level_mean = {}
            for v, m in zip(vals, metrics):
                level_mean.setdefault(v, []).append(m)
            level_mean = {k: np.mean(v) for k, v in level_mean.items()}
            x = np.array([level_mean[v] for v in vals])
        else:
            x = np.array(vals, dtype=float)
        if np.std(x) == 0 or np.std(metrics) == 0:
            raw[name] = 0.0
            continue
        rho = spearmanr(x, metrics)[0]
        raw[name] = abs(float(rho)) if np.isfinite(rho) else 0.0
    total = sum(raw.values())
    if total > 0:
        raw = {k: v / total for k, v in raw.items()}
    return raw
