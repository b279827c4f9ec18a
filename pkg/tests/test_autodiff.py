import numpy as np
import pytest
from scipy.special import expit, softmax as sp_softmax

from evseq import autodiff as ad
from conftest import relative_grad_error, random_shape

TOL = 1e-6


def _std(rng, shape):
    return rng.standard_normal(shape)


# one entry per registered differentiable op: (name, builder) where builder
# returns (fn, list-of-input-arrays) for a fresh random case
def _op_cases(rng):
    m, n, k = (int(rng.integers(1, 5)) for _ in range(3))
    shape = random_shape(rng)
    cases = {
        "add": (lambda a, b: ad.add(a, b), [_std(rng, shape), _std(rng, shape)]),
        "add_broadcast": (lambda a, b: ad.add(a, b),
                          [_std(rng, shape), _std(rng, shape[-1:])]),
        "mul": (lambda a, b: ad.mul(a, b), [_std(rng, shape), _std(rng, shape)]),
        "matmul": (lambda a, b: ad.matmul(a, b),
                   [_std(rng, (m, n)), _std(rng, (n, k))]),
        "matmul_batched": (lambda a, b: ad.matmul(a, b),
                           [_std(rng, (2, m, n)), _std(rng, (2, n, k))]),
        "reshape": (lambda a: ad.reshape(a, (shape[0] * shape[1],)),
                    [_std(rng, shape)]),
        "swapaxes": (lambda a: ad.swapaxes(a, 0, 1), [_std(rng, shape)]),
        "slice": (lambda a: ad.tslice(a, (slice(None), slice(0, shape[1]))),
                  [_std(rng, shape)]),
        "slice_fancy": (lambda a: ad.tslice(a, ([0, 0], slice(None))),
                        [_std(rng, shape)]),
        "concat": (lambda a, b: ad.concat([a, b], axis=0),
                   [_std(rng, shape), _std(rng, shape)]),
        "stack": (lambda a, b: ad.stack([a, b], axis=1),
                  [_std(rng, shape), _std(rng, shape)]),
        "sum": (lambda a: ad.tsum(a, axis=0, keepdims=True),
                [_std(rng, shape)]),
        "mean": (lambda a: ad.tmean(a, axis=1), [_std(rng, shape)]),
        "sigmoid": (ad.sigmoid, [_std(rng, shape)]),
        "tanh": (ad.tanh, [_std(rng, shape)]),
        "relu": (ad.relu, [_std(rng, shape) + 0.05]),
        "sin": (ad.sin, [_std(rng, shape)]),
        "exp": (ad.exp, [_std(rng, shape)]),
        "log": (ad.log, [np.abs(_std(rng, shape)) + 0.5]),
        "sqrt": (lambda a: ad.sqrt(a), [np.abs(_std(rng, shape)) + 0.5]),
        "square": (ad.square, [_std(rng, shape)]),
        "softmax": (lambda a, _w=_std(rng, shape):
                    ad.mul(ad.softmax(a, axis=-1), ad.Tensor(_w)),
                    [_std(rng, shape)]),
        "softmax_xent": (
            lambda a, _l=np.arange(shape[0]) % shape[1]:
            ad.softmax_cross_entropy(a, _l),
            [_std(rng, shape)]),
        "bce_logits": (
            lambda a, _y=(rng.uniform(size=shape) > 0.5).astype(float):
            ad.binary_cross_entropy_with_logits(a, _y),
            [_std(rng, shape)]),
        "mse": (lambda a, _t=_std(rng, shape): ad.mse(a, _t),
                [_std(rng, shape)]),
        "embedding": (
            lambda w, _i=rng.integers(0, 3, size=(2, 4)):
            ad.embedding(w, _i),
            [_std(rng, (3, k))]),
    }
    return cases


OP_NAMES = sorted(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OP_NAMES)
def test_gradcheck_random_cases(op):
    rng = np.random.default_rng(hash(op) % 2 ** 31)
    for _ in range(100):
        fn, arrays = _op_cases(rng)[op]
        assert relative_grad_error(fn, arrays) < TOL


def test_batchnorm_gradcheck():
    rng = np.random.default_rng(3)
    for _ in range(25):
        b, f = int(rng.integers(3, 8)), int(rng.integers(1, 4))

        def fn(x, g, be):
            state = ad.BatchNormState(f)
            return ad.batchnorm(x, g, be, state, training=True)

        arrays = [rng.standard_normal((b, f)),
                  rng.uniform(0.5, 1.5, f), rng.standard_normal(f)]
        assert relative_grad_error(fn, arrays) < 1e-5


def test_softmax_uniform_on_zeros():
    out = ad.softmax(ad.Tensor(np.zeros((1, 3))), axis=-1)
    assert np.allclose(out.data, 1 / 3)


def test_softmax_matches_scipy(rng):
    x = rng.standard_normal((4, 6))
    assert np.allclose(ad.softmax(ad.Tensor(x), axis=-1).data,
                       sp_softmax(x, axis=-1))


def test_softmax_mask_zeroes_invalid(rng):
    x = rng.standard_normal((2, 5))
    mask = np.array([[1, 1, 0, 0, 0], [1, 1, 1, 1, 1]], dtype=float)
    out = ad.softmax(ad.Tensor(x), axis=-1, mask=mask).data
    assert np.allclose(out[mask == 0], 0)
    assert np.allclose(out.sum(axis=-1), 1)


def test_matmul_identity(rng):
    a = rng.standard_normal((4, 4))
    assert np.allclose(ad.matmul(ad.Tensor(np.eye(4)), ad.Tensor(a)).data, a)


def test_shape_mismatch_names_op():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))


def test_sigmoid_matches_expit(rng):
    x = rng.standard_normal(20) * 5
    assert np.allclose(ad.sigmoid(ad.Tensor(x)).data, expit(x))


def test_bce_matches_naive(rng):
    z = rng.standard_normal((3, 4)) * 3
    y = (rng.uniform(size=(3, 4)) > 0.5).astype(float)
    got = ad.binary_cross_entropy_with_logits(ad.Tensor(z), y).data
    p = expit(z)
    want = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert np.allclose(got, want)


def test_softmax_xent_matches_naive(rng):
    z = rng.standard_normal((5, 3))
    labels = np.array([0, 1, 2, 0, 1])
    got = ad.softmax_cross_entropy(ad.Tensor(z), labels).data
    p = sp_softmax(z, axis=-1)
    want = -np.log(p[np.arange(5), labels]).mean()
    assert np.allclose(got, want)


def test_backward_deterministic(rng):
    x = rng.standard_normal((6, 6))

    def run():
        t = ad.Tensor(x.copy(), requires_grad=True)
        loss = ad.tsum(ad.square(ad.tanh(ad.matmul(t, t))))
        loss.backward()
        return t.grad.copy()

    assert np.array_equal(run(), run())


def test_gradient_accumulates_over_reuse(rng):
    x = ad.Tensor(rng.standard_normal(5), requires_grad=True)
    ad.tsum(ad.add(x, x)).backward()
    assert np.allclose(x.grad, 2.0)


# -- dropout ----------------------------------------------------------------

def test_dropout_eval_is_identity(rng):
    x = ad.Tensor(rng.standard_normal((3, 4)))
    out = ad.dropout(x, 0.5, rng, training=False)
    assert np.array_equal(out.data, x.data)


def test_dropout_inverted_scaling():
    rng = np.random.default_rng(0)
    x = ad.Tensor(np.ones((200, 200)))
    out = ad.dropout(x, 0.25, rng, training=True).data
    kept = out[out != 0]
    assert np.allclose(kept, 1 / 0.75)
    assert abs((out == 0).mean() - 0.25) < 0.02


# -- batchnorm --------------------------------------------------------------

def test_batchnorm_train_standardizes(rng):
    x = ad.Tensor(rng.standard_normal((64, 3)) * 4 + 7)
    state = ad.BatchNormState(3)
    out = ad.batchnorm(x, ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3)),
                       state, training=True).data
    assert np.abs(out.mean(axis=0)).max() < 1e-6
    assert np.abs(out.var(axis=0) - 1).max() < 1e-6


def test_batchnorm_eval_uses_running_stats(rng):
    state = ad.BatchNormState(2)
    gamma, beta = ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2))
    for _ in range(200):
        x = ad.Tensor(rng.standard_normal((32, 2)) * 3 + 5)
        ad.batchnorm(x, gamma, beta, state, training=True)
    y = ad.batchnorm(ad.Tensor(np.full((4, 2), 5.0)), gamma, beta, state,
                     training=False).data
    assert np.abs(y).max() < 0.2     # running mean ~5, running var ~9


def test_batchnorm_weighted_ignores_masked_rows(rng):
    x = rng.standard_normal((10, 2))
    w = np.ones(10)
    w[7:] = 0.0
    x[7:] = 1e6                       # garbage rows must not affect stats
    state = ad.BatchNormState(2)
    out = ad.batchnorm(ad.Tensor(x), ad.Tensor(np.ones(2)),
                       ad.Tensor(np.zeros(2)), state, training=True,
                       weights=w).data
    valid = out[:7]
    assert np.abs(valid.mean(axis=0)).max() < 1e-6


# -- adam -------------------------------------------------------------------

def test_adam_zero_grad_no_move():
    p = {"w": ad.Tensor(np.ones(4), requires_grad=True)}
    p["w"].grad = np.zeros(4)
    state = ad.AdamState()
    before = p["w"].data.copy()
    ad.adam_step(p, None, state, lr=0.1)
    assert np.array_equal(p["w"].data, before)


def test_adam_first_step_magnitude():
    p = {"w": ad.Tensor(np.zeros(4), requires_grad=True)}
    p["w"].grad = np.full(4, 3.7)
    ad.adam_step(p, None, ad.AdamState(), lr=0.05)
    # bias-corrected first step is ~lr regardless of gradient scale
    assert np.allclose(np.abs(p["w"].data), 0.05, rtol=1e-6)


def test_adam_quadratic_bowl():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal(8)
    x0 /= np.linalg.norm(x0)
    p = {"x": ad.Tensor(x0, requires_grad=True)}
    state = ad.AdamState()
    for _ in range(500):
        p["x"].grad = 2 * p["x"].data
        ad.adam_step(p, None, state, lr=0.05)
    assert np.linalg.norm(p["x"].data) < 1e-2


def test_adam_nonfinite_grad_names_param():
    p = {"bad.w": ad.Tensor(np.ones(2), requires_grad=True)}
    p["bad.w"].grad = np.array([1.0, np.nan])
    with pytest.raises(FloatingPointError, match="bad.w"):
        ad.adam_step(p, None, ad.AdamState(), lr=0.1)


def test_embedding_out_of_range_errors(rng):
    w = ad.Tensor(rng.standard_normal((3, 2)))
    with pytest.raises(Exception, match="embedding"):
        ad.embedding(w, np.array([0, 5]))
