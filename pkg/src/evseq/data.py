"""Canonical event-sequence data model: ingestion, splits, preprocessing.

File format: one JSON object per line,
``{"id": str, "t": [...], "num": {name: [num|null ...]},
   "cat": {name: [int ...]}, "target": ...}``
with a sidecar JSON file describing the schema. Missing numeric values are
nulls and become mask=0; categorical code 0 is reserved for "missing".
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger("evseq")

CLASSIFICATION = "classification"
REGRESSION = "regression"
MULTILABEL = "multilabel"

FORWARD_FILL = "forward_fill"
CONSTANT = "constant"


class SchemaError(ValueError):
    pass


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class NumericFeature:
    name: str
    imputation: str = CONSTANT         # forward_fill | constant
    log_transform: bool = False


@dataclass(frozen=True)
class CategoricalFeature:
    name: str
    cardinality: int                   # includes the reserved missing code 0


@dataclass(frozen=True)
class FeatureSchema:
    numeric_features: tuple
    categorical_features: tuple = ()
    time_field: str = "t"
    target_kind: str = REGRESSION      # classification | regression | multilabel
    n_classes: int = 1

    def __post_init__(self):
        names = ([f.name for f in self.numeric_features]
                 + [f.name for f in self.categorical_features])
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique across both lists")
        for f in self.numeric_features:
            if f.imputation not in (FORWARD_FILL, CONSTANT):
                raise SchemaError(f"unknown imputation '{f.imputation}'")
        for f in self.categorical_features:
            if f.cardinality < 2:
                raise SchemaError(
                    f"categorical '{f.name}': cardinality must be >= 2")
        if self.target_kind not in (CLASSIFICATION, REGRESSION, MULTILABEL):
            raise SchemaError(f"unknown target kind '{self.target_kind}'")
        if self.n_classes < 1:
            raise SchemaError("n_classes must be >= 1")

    def to_json(self):
        return {
            "numeric_features": [
                {"name": f.name, "imputation": f.imputation,
                 "log_transform": f.log_transform}
                for f in self.numeric_features],
            "categorical_features": [
                {"name": f.name, "cardinality": f.cardinality}
                for f in self.categorical_features],
            "time_field": self.time_field,
            "target_kind": self.target_kind,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            numeric_features=tuple(
                NumericFeature(f["name"], f.get("imputation", CONSTANT),
                               bool(f.get("log_transform", False)))
                for f in obj.get("numeric_features", [])),
            categorical_features=tuple(
                CategoricalFeature(f["name"], int(f["cardinality"]))
                for f in obj.get("categorical_features", [])),
            time_field=obj.get("time_field", "t"),
            target_kind=obj.get("target_kind", REGRESSION),
            n_classes=int(obj.get("n_classes", 1)),
        )


@dataclass
class EventSequence:
    id: str
    times: np.ndarray        # (T,) float
    numeric: np.ndarray      # (n_num, T) float, NaN before imputation
    categorical: np.ndarray  # (n_cat, T) int, 0 = missing
    mask: np.ndarray         # (n_num, T) {0,1}
    target: object           # int | float | (k,) {0,1} array

    def __len__(self):
        return len(self.times)

    def validate(self, schema, require_sorted=True):
        t = len(self.times)
        if t < 1:
            raise IngestError(f"sequence '{self.id}': empty")
        if self.numeric.shape != (len(schema.numeric_features), t):
            raise IngestError(f"sequence '{self.id}': numeric shape mismatch")
        if self.categorical.shape != (len(schema.categorical_features), t):
            raise IngestError(f"sequence '{self.id}': categorical shape mismatch")
        if self.mask.shape != self.numeric.shape:
            raise IngestError(f"sequence '{self.id}': mask shape mismatch")
        if require_sorted and np.any(np.diff(self.times) < 0):
            raise IngestError(f"sequence '{self.id}': times not sorted")


def _target_equal(a, b):
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(np.asarray(a), np.asarray(b))
    return a == b


@dataclass
class TargetAudit:
    """Records every target read that touches the held-out test set."""
    test_indices: frozenset
    entries: list = field(default_factory=list)

    def record(self, indices, purpose):
        n = sum(1 for i in indices if i in self.test_indices)
        if n:
            self.entries.append((purpose, n))

    def reads_before_scoring(self):
        return [e for e in self.entries if e[0] != "test-scoring"]


@dataclass
class Dataset:
    schema: FeatureSchema
    sequences: list
    time_scale: tuple = None           # (t_min, t_max) fitted on train
    preprocessed: bool = False
    n_resorted: int = 0
    audit: TargetAudit = None

    def __len__(self):
        return len(self.sequences)

    def with_audit(self, test_indices):
        ds = replace(self, audit=TargetAudit(frozenset(test_indices)))
        return ds

    def targets(self, indices, purpose):
        """Audited target accessor; all protocol code reads targets here."""
        if self.audit is not None:
            self.audit.record(indices, purpose)
        vals = [self.sequences[i].target for i in indices]
        if self.schema.target_kind == CLASSIFICATION:
            return np.array(vals, dtype=np.int64)
        if self.schema.target_kind == MULTILABEL:
            return np.array(vals, dtype=np.int64)
        return np.array(vals, dtype=np.float64)

    def equal(self, other):
        if self.schema != other.schema or len(self) != len(other):
            return False
        for a, b in zip(self.sequences, other.sequences):
            if a.id != b.id:
                return False
            if not np.allclose(a.times, b.times, rtol=0, atol=0):
                return False
            if not np.array_equal(a.numeric, b.numeric, equal_nan=True):
                return False
            if not np.array_equal(a.categorical, b.categorical):
                return False
            if not np.array_equal(a.mask, b.mask):
                return False
            if not _target_equal(a.target, b.target):
                return False
        return True


@dataclass(frozen=True)
class SplitAssignment:
    train: tuple
    train_val: tuple
    hpo_val: tuple
    test: tuple
    seed: int

    def __post_init__(self):
        parts = [set(self.train), set(self.train_val),
                 set(self.hpo_val), set(self.test)]
        total = sum(len(p) for p in parts)
        if len(set().union(*parts)) != total:
            raise ValueError("split parts must be pairwise disjoint")


# ---------------------------------------------------------------------------
# ingestion / emission

def _parse_record(obj, schema, lineno):
    try:
        sid = str(obj["id"])
        times = np.asarray(obj[schema.time_field], dtype=np.float64)
        t = len(times)
        num_obj = obj.get("num", {})
        cat_obj = obj.get("cat", {})
        for name in num_obj:
            if name not in {f.name for f in schema.numeric_features}:
                raise SchemaError(f"unknown numeric feature '{name}'")
        for name in cat_obj:
            if name not in {f.name for f in schema.categorical_features}:
                raise SchemaError(f"unknown categorical feature '{name}'")
        numeric = np.full((len(schema.numeric_features), t), np.nan)
        for i, f in enumerate(schema.numeric_features):
            vals = num_obj.get(f.name)
            if vals is None:
                continue
            if len(vals) != t:
                raise IngestError(f"feature '{f.name}': length mismatch")
            numeric[i] = [np.nan if v is None else float(v) for v in vals]
        categorical = np.zeros((len(schema.categorical_features), t),
                               dtype=np.int64)
        for i, f in enumerate(schema.categorical_features):
            vals = cat_obj.get(f.name)
            if vals is None:
                continue
            if len(vals) != t:
                raise IngestError(f"feature '{f.name}': length mismatch")
            categorical[i] = np.asarray(vals, dtype=np.int64)
        raw_target = obj["target"]
        if schema.target_kind == CLASSIFICATION:
            target = int(raw_target)
        elif schema.target_kind == MULTILABEL:
            target = np.asarray(raw_target, dtype=np.int64)
        else:
            target = float(raw_target)
        mask = (~np.isnan(numeric)).astype(np.int8)
        return EventSequence(sid, times, numeric, categorical, mask, target)
    except SchemaError:
        raise
    except IngestError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(f"line {lineno}: malformed record: {exc}") from exc


def ingest_jsonl(path, schema):
    """Read a canonical JSONL file into a Dataset.

    Unsorted sequences are stably re-sorted by time (payload reordered with
    the times) and counted; malformed lines and empty sequences are errors."""
    sequences = []
    n_resorted = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"line {lineno}: invalid JSON: {exc}") from exc
            try:
                seq = _parse_record(obj, schema, lineno)
            except SchemaError:
                raise
            except IngestError as exc:
                raise IngestError(f"line {lineno}: {exc}") from exc
            if len(seq) == 0:
                raise IngestError(f"line {lineno}: sequence '{obj.get('id')}'"
                                  " is empty")
            if np.any(np.diff(seq.times) < 0):
                order = np.argsort(seq.times, kind="stable")
                seq = EventSequence(seq.id, seq.times[order],
                                    seq.numeric[:, order],
                                    seq.categorical[:, order],
                                    seq.mask[:, order], seq.target)
                n_resorted += 1
            seq.validate(schema)
            sequences.append(seq)
    if n_resorted:
        log.warning("ingest: re-sorted %d sequences with unsorted times",
                    n_resorted)
    return Dataset(schema, sequences, n_resorted=n_resorted)


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "null"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def _seq_to_line(seq, schema):
    parts = [f'"id": {json.dumps(seq.id)}']
    parts.append(f'"{schema.time_field}": [' +
                 ", ".join(_fmt(v) for v in seq.times) + "]")
    num = ", ".join(
        f'{json.dumps(f.name)}: ['
        + ", ".join(_fmt(v) if m else "null"
                    for v, m in zip(seq.numeric[i], seq.mask[i]))
        + "]"
        for i, f in enumerate(schema.numeric_features))
    parts.append("\"num\": {" + num + "}")
    cat = ", ".join(
        f'{json.dumps(f.name)}: [' + ", ".join(str(int(v)) for v in
                                               seq.categorical[i]) + "]"
        for i, f in enumerate(schema.categorical_features))
    parts.append("\"cat\": {" + cat + "}")
    if isinstance(seq.target, np.ndarray):
        tgt = "[" + ", ".join(str(int(v)) for v in seq.target) + "]"
    else:
        tgt = _fmt(seq.target)
    parts.append(f'"target": {tgt}')
    return "{" + ", ".join(parts) + "}"


def emit_jsonl(ds, path, schema_path=None):
    """Write a Dataset to the canonical JSONL + schema sidecar.

    Numeric values carry 17 significant digits so ingest(emit(ds)) == ds.
    Positions with mask=0 are written as null."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in ds.sequences:
            fh.write(_seq_to_line(seq, ds.schema) + "\n")
    if schema_path is None:
        schema_path = str(path) + ".schema.json"
    with open(schema_path, "w", encoding="utf-8") as fh:
        json.dump(ds.schema.to_json(), fh, indent=2)
        fh.write("\n")


def read_schema(path):
    with open(path, "r", encoding="utf-8") as fh:
        return FeatureSchema.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# stratification

def _stratum_keys(ds, indices):
    kind = ds.schema.target_kind
    if kind == CLASSIFICATION:
        return [int(ds.sequences[i].target) for i in indices]
    if kind == MULTILABEL:
        # bucket by number of positive labels; exact label-tuple strata are
        # usually singletons on real data
        return [int(np.sum(ds.sequences[i].target)) for i in indices]
    vals = np.array([float(ds.sequences[i].target) for i in indices])
    qs = np.quantile(vals, [0.25, 0.5, 0.75])
    return list(np.searchsorted(qs, vals, side="left"))


def _largest_remainder(n, fractions):
    raw = [n * f for f in fractions]
    base = [int(math.floor(r)) for r in raw]
    rem = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: raw[i] - base[i],
                   reverse=True)
    for i in order[:rem]:
        base[i] += 1
    return base


def _stratified_parts(ds, pool, fractions, rng, what):
    strata = {}
    keys = _stratum_keys(ds, pool)
    for idx, key in zip(pool, keys):
        strata.setdefault(key, []).append(idx)
    n_parts = len(fractions)
    parts = [[] for _ in range(n_parts)]
    for key in sorted(strata):
        members = strata[key]
        if len(members) < n_parts:
            raise ValueError(
                f"{what}: stratum {key!r} has {len(members)} member(s), "
                f"fewer than the {n_parts} requested parts")
        members = list(members)
        rng.shuffle(members)
        sizes = _largest_remainder(len(members), fractions)
        lo = 0
        for p, size in zip(parts, sizes):
            p.extend(members[lo:lo + size])
            lo += size
    return [tuple(sorted(p)) for p in parts]


def stratified_split(ds, fractions, seed, pool=None, test=()):
    """Split `pool` (default: everything not in `test`) into
    train / train-val / hpo-val with on-target stratification."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    if pool is None:
        pool = [i for i in range(len(ds)) if i not in set(test)]
    rng = np.random.default_rng(seed)
    train, train_val, hpo_val = _stratified_parts(
        ds, list(pool), list(fractions), rng, "stratified_split")
    return SplitAssignment(train, train_val, hpo_val, tuple(sorted(test)), seed)


def holdout_test(ds, frac=0.2, seed=0):
    """Cut a stratified fixed test set; returns (test_indices, pool_indices)."""
    rng = np.random.default_rng(seed)
    rest, test = _stratified_parts(ds, list(range(len(ds))),
                                   [1.0 - frac, frac], rng, "holdout_test")
    return test, rest


def subsample(ds, n, seed):
    """Target-stratified uniform subsample of `n` sequences (no replacement)."""
    if n == 0:
        raise ValueError("subsample: n must be positive")
    if n > len(ds):
        raise ValueError(f"subsample: n={n} exceeds dataset size {len(ds)}")
    if n == len(ds):
        return replace(ds, sequences=list(ds.sequences), audit=None)
    frac = n / len(ds)
    rng = np.random.default_rng(seed)
    keep, _ = _stratified_parts(ds, list(range(len(ds))), [frac, 1.0 - frac],
                                rng, "subsample")
    # largest-remainder can be off target size by stratum rounding; fix up
    keep = list(keep)
    if len(keep) > n:
        rng.shuffle(keep)
        keep = keep[:n]
    elif len(keep) < n:
        rest = [i for i in range(len(ds)) if i not in set(keep)]
        rng.shuffle(rest)
        keep.extend(rest[:n - len(keep)])
    keep = sorted(keep)
    return replace(ds, sequences=[ds.sequences[i] for i in keep], audit=None)


# ---------------------------------------------------------------------------
# preprocessing

def _signed_log1p(x):
    return np.sign(x) * np.log1p(np.abs(x))


def preprocess(ds, fit_on):
    """Apply the canonical preprocessing pipeline, fitted on `fit_on`.

    Steps: sign-preserving log1p on configured numerics, global affine time
    rescale so fit-split times span [0, 1], forward-fill or constant-impute
    missing numerics (masks retained; leading gaps become 0 with mask 0).
    Idempotent: an already-preprocessed dataset is returned as-is."""
    if ds.preprocessed:
        return ds
    fit_on = list(fit_on)
    if not fit_on:
        raise ValueError("preprocess: fit split is empty")
    if ds.time_scale is not None:
        t_min, t_max = ds.time_scale
    else:
        t_min = min(float(ds.sequences[i].times.min()) for i in fit_on)
        t_max = max(float(ds.sequences[i].times.max()) for i in fit_on)
    if t_max <= t_min:
        raise ValueError("preprocess: zero time range on fit split")
    span = t_max - t_min
    schema = ds.schema
    out = []
    for seq in ds.sequences:
        numeric = seq.numeric.copy()
        mask = seq.mask.copy()
        times = (seq.times - t_min) / span
        for i, f in enumerate(schema.numeric_features):
            row = numeric[i]
            if f.log_transform:
                row = np.where(np.isnan(row), row, _signed_log1p(row))
            if f.imputation == FORWARD_FILL:
                filled = row.copy()
                last = np.nan
                for j in range(len(filled)):
                    if np.isnan(filled[j]):
                        filled[j] = last
                    else:
                        last = filled[j]
                row = filled
            row = np.where(np.isnan(row), 0.0, row)
            numeric[i] = row
        out.append(EventSequence(seq.id, times, numeric, seq.categorical.copy(),
                                 mask, seq.target))
    return replace(ds, sequences=out, time_scale=(t_min, t_max),
                   preprocessed=True)
