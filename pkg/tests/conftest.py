import numpy as np
import pytest

from evseq import autodiff as ad
from evseq.data import (CategoricalFeature, Dataset, EventSequence,
                        FeatureSchema, NumericFeature)


def relative_grad_error(f, arrays, h=1e-5):
    """Worst relative error between backward() gradients and central finite
    differences of sum(f(*arrays)) over every input entry."""
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    ad.tsum(f(*tensors)).backward()

    def value(arrs):
        return float(np.asarray(f(*[ad.Tensor(a) for a in arrs]).data).sum())

    worst = 0.0
    for i, a in enumerate(arrays):
        num = np.zeros_like(a, dtype=float)
        for j in range(a.size):
            perturbed = [x.copy() for x in arrays]
            perturbed[i].ravel()[j] += h
            up = value(perturbed)
            perturbed[i].ravel()[j] -= 2 * h
            down = value(perturbed)
            num.ravel()[j] = (up - down) / (2 * h)
        ana = tensors[i].grad
        denom = max(np.abs(num).max(), np.abs(ana).max())
        if denom < 1e-8:
            continue
        worst = max(worst, float(np.abs(num - ana).max()) / denom)
    return worst


def random_shape(rng, ndim=2, lo=1, hi=5):
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(ndim))


def toy_schema(n_num=1, n_cat=0, target_kind="regression", n_classes=1):
    return FeatureSchema(
        numeric_features=tuple(NumericFeature(f"x{i}")
                               for i in range(n_num)),
        categorical_features=tuple(
            CategoricalFeature(f"c{i}", cardinality=4)
            for i in range(n_cat)),
        time_field="t",
        target_kind=target_kind,
        n_classes=n_classes)


def toy_sequence(rng, schema, sid, length=None, target=None):
    t = length or int(rng.integers(2, 9))
    times = np.sort(rng.uniform(0, 10, t))
    n_num = len(schema.numeric_features)
    n_cat = len(schema.categorical_features)
    numeric = rng.standard_normal((n_num, t))
    mask = (rng.uniform(size=(n_num, t)) > 0.2).astype(float)
    numeric[mask == 0] = np.nan
    categorical = rng.integers(0, 4, size=(n_cat, t))
    if target is None:
        if schema.target_kind == "classification":
            target = int(rng.integers(schema.n_classes))
        elif schema.target_kind == "multilabel":
            target = rng.integers(0, 2, schema.n_classes)
        else:
            target = float(rng.normal())
    return EventSequence(sid, times, numeric, categorical, mask, target)


def toy_dataset(rng, n=40, schema=None, **kw):
    schema = schema or toy_schema(**kw)
    return Dataset(schema, [toy_sequence(rng, schema, f"s{i:04d}")
                            for i in range(n)])


@pytest.fixture
def rng():
    return np.random.default_rng(0)
