import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfdl import gradcore as gc
from cfdl.gradcore import Matrix

from conftest import grad_check

SEEDS = range(20)


def rnd(rng, *shape, grad=True):
    return Matrix(rng.normal(size=shape), requires_grad=grad)


# one builder per differentiable op: rng -> (loss closure, params)
def _matmul(rng):
    a, b = rnd(rng, 3, 4), rnd(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    return lambda: gc.sum_all(gc.mul(gc.matmul(a, b), Matrix(w))), [a, b]


def _add_broadcast(rng):
    a, b = rnd(rng, 4, 3), rnd(rng, 1, 3)
    w = rng.normal(size=(4, 3))
    return lambda: gc.sum_all(gc.mul(gc.add(a, b), Matrix(w))), [a, b]


def _add_n(rng):
    xs = [rnd(rng, 2, 3) for _ in range(3)]
    w = rng.normal(size=(2, 3))
    return lambda: gc.sum_all(gc.mul(gc.add_n(xs), Matrix(w))), xs


def _mul(rng):
    a, b = rnd(rng, 3, 3), rnd(rng, 3, 3)
    return lambda: gc.sum_all(gc.mul(a, b)), [a, b]


def _scale(rng):
    a = rnd(rng, 2, 5)
    w = rng.normal(size=(2, 5))
    return lambda: gc.sum_all(gc.mul(gc.scale(a, -1.7), Matrix(w))), [a]


def _scale_rows(rng):
    x, w = rnd(rng, 4, 3), rnd(rng, 4, 1)
    v = rng.normal(size=(4, 3))
    return lambda: gc.sum_all(gc.mul(gc.scale_rows(x, w), Matrix(v))), [x, w]


def _linear(rng):
    x, W, b = rnd(rng, 3, 4), rnd(rng, 4, 2), rnd(rng, 1, 2)
    v = rng.normal(size=(3, 2))
    return lambda: gc.sum_all(gc.mul(gc.linear(x, W, b), Matrix(v))), [x, W, b]


def _relu(rng):
    # keep entries away from the kink
    d = rng.normal(size=(3, 4))
    d[np.abs(d) < 1e-3] = 0.5
    x = Matrix(d, requires_grad=True)
    v = rng.normal(size=(3, 4))
    return lambda: gc.sum_all(gc.mul(gc.relu(x), Matrix(v))), [x]


def _mean_rows(rng):
    xs = [rnd(rng, 2, 3) for _ in range(4)]
    v = rng.normal(size=(2, 3))
    return lambda: gc.sum_all(gc.mul(gc.mean_rows(xs), Matrix(v))), xs


def _concat_cols(rng):
    xs = [rnd(rng, 2, k) for k in (1, 3, 2)]
    v = rng.normal(size=(2, 6))
    return lambda: gc.sum_all(gc.mul(gc.concat_cols(xs), Matrix(v))), xs


def _stack_rows(rng):
    xs = [rnd(rng, 1, 3) for _ in range(3)]
    v = rng.normal(size=(3, 3))
    return lambda: gc.sum_all(gc.mul(gc.stack_rows(xs), Matrix(v))), xs


def _column(rng):
    x = rnd(rng, 3, 4)
    v = rng.normal(size=(3, 1))
    return lambda: gc.sum_all(gc.mul(gc.column(x, 2), Matrix(v))), [x]


def _row_dot(rng):
    a, b = rnd(rng, 4, 3), rnd(rng, 4, 3)
    v = rng.normal(size=(4, 1))
    return lambda: gc.sum_all(gc.mul(gc.row_dot(a, b), Matrix(v))), [a, b]


def _softmax(rng):
    x = rnd(rng, 5, 1)
    v = rng.normal(size=(5, 1))
    return lambda: gc.sum_all(gc.mul(gc.softmax(x), Matrix(v))), [x]


def _softmax_rows(rng):
    x = rnd(rng, 3, 4)
    v = rng.normal(size=(3, 4))
    return lambda: gc.sum_all(gc.mul(gc.softmax_rows(x), Matrix(v))), [x]


def _mse(rng):
    a, b = rnd(rng, 3, 4), rnd(rng, 3, 4)
    return lambda: gc.mse(a, b), [a, b]


def _cosine(rng):
    a, b = rnd(rng, 4, 3), rnd(rng, 4, 3)
    return lambda: gc.cosine_similarity(a, b), [a, b]


def _cross_entropy(rng):
    z = rnd(rng, 5, 3)
    y = rng.integers(0, 3, size=5)
    return lambda: gc.cross_entropy(z, y), [z]


def _dropout(rng):
    x = rnd(rng, 4, 5)
    v = rng.normal(size=(4, 5))
    seed = int(rng.integers(1 << 30))
    return lambda: gc.sum_all(gc.mul(gc.dropout(x, 0.3, True, np.random.default_rng(seed)), Matrix(v))), [x]


OPS = {f.__name__[1:]: f for f in (_matmul, _add_broadcast, _add_n, _mul, _scale, _scale_rows, _linear, _relu,
                                   _mean_rows, _concat_cols, _stack_rows, _column, _row_dot, _softmax,
                                   _softmax_rows, _mse, _cosine, _cross_entropy, _dropout)}


@pytest.mark.parametrize("name", sorted(OPS))
def test_finite_difference_20_instances(name):
    worst = 0.0
    for seed in SEEDS:
        f, params = OPS[name](np.random.default_rng(seed))
        worst = max(worst, grad_check(f, params))
    assert worst < 1e-4, f"{name}: worst relative error {worst:.2e}"


@pytest.mark.parametrize("name", ["matmul", "linear", "softmax", "mse"])
def test_tight_gradients(name):
    f, params = OPS[name](np.random.default_rng(99))
    assert grad_check(f, params) < 1e-6


def test_matmul_examples():
    assert np.array_equal(gc.matmul(Matrix(np.eye(2)), Matrix([[1, 2], [3, 4]])).data, [[1, 2], [3, 4]])
    assert gc.matmul(Matrix([[1, 2]]), Matrix([[3], [4]])).data.tolist() == [[11.0]]
    with pytest.raises(gc.ShapeError):
        gc.matmul(Matrix(np.ones((2, 3))), Matrix(np.ones((2, 3))))


def test_linear_examples():
    out = gc.linear(Matrix(np.ones((3, 4))), Matrix(np.zeros((4, 2))), Matrix([[1, 2]]))
    assert np.array_equal(out.data, np.tile([1.0, 2.0], (3, 1)))
    out = gc.linear(Matrix([[1, 1]]), Matrix(np.eye(2)), Matrix([[0, 0]]))
    assert out.data.tolist() == [[1.0, 1.0]]


def test_elementwise_examples():
    assert gc.relu(Matrix([[-1, 0, 2]])).data.tolist() == [[0, 0, 2]]
    a = Matrix(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(gc.mean_rows([a, a, a]).data, a.data)
    blocks = [Matrix(np.ones((5, 32))) for _ in range(7)]
    assert gc.concat_cols(blocks).shape == (5, 224)


def test_softmax_examples():
    assert np.allclose(gc.softmax(Matrix([[0], [0], [0]])).data.ravel(), 1 / 3)
    p = gc.softmax(Matrix([[1000], [0], [0]])).data.ravel()
    assert np.all(np.isfinite(p)) and np.allclose(p, [1, 0, 0])
    with pytest.raises(gc.ShapeError):
        gc.softmax(Matrix([[1, 2]]))


def test_mse_and_cosine_examples():
    a = Matrix(np.random.default_rng(0).normal(size=(3, 4)))
    assert gc.mse(a, a).item() == 0.0
    assert gc.mse(Matrix([[0, 0]]), Matrix([[1, 1]])).item() == 1.0
    v = Matrix([[3.0, -1.0, 2.0]])
    assert gc.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-7)
    assert gc.cosine_similarity(Matrix([[1, 0]]), Matrix([[0, 1]])).item() == 0.0
    assert gc.cosine_similarity(Matrix([[1, 1]]), Matrix([[-1, -1]])).item() == pytest.approx(-1.0, abs=1e-7)
    # zero row is guarded and gives 0
    assert gc.cosine_similarity(Matrix([[0, 0]]), Matrix([[1, 1]])).item() == 0.0


def test_cross_entropy_examples():
    assert gc.cross_entropy(Matrix(np.zeros((4, 3))), [0, 1, 2, 0]).item() == pytest.approx(np.log(3))
    z = np.zeros((2, 3))
    z[0, 1] = z[1, 2] = 100.0
    assert gc.cross_entropy(Matrix(z), [1, 2]).item() < 1e-40
    logits = Matrix(np.random.default_rng(3).normal(size=(4, 3)), requires_grad=True)
    y = np.array([0, 2, 1, 1])
    gc.backward(gc.cross_entropy(logits, y))
    p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    assert np.allclose(logits.grad, (p - np.eye(3)[y]) / 4, atol=1e-14)
    with pytest.raises(ValueError):
        gc.cross_entropy(Matrix(np.zeros((1, 2))), [2])


def test_dropout_modes():
    x = Matrix(np.random.default_rng(0).normal(size=(10, 10)))
    assert gc.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert gc.dropout(x, 0.9, False, None) is x
    p, n = 0.3, 100_000
    out = gc.dropout(Matrix(np.ones((100, n // 100))), p, True, np.random.default_rng(7)).data
    frac = np.mean(out == 0)
    assert abs(frac - p) < 3 * np.sqrt(p * (1 - p) / n)
    assert np.allclose(out[out != 0], 1 / (1 - p))


def test_backward_examples():
    W = Matrix(np.random.default_rng(0).normal(size=(2, 2)), requires_grad=True)
    other = Matrix(np.ones((2, 2)), requires_grad=True)
    gc.zero_grads([W, other])
    gc.backward(gc.sum_all(W))
    assert np.array_equal(W.grad, np.ones((2, 2)))
    assert np.array_equal(other.grad, np.zeros((2, 2)))


def test_backward_misuse():
    W = Matrix(np.ones((2, 2)), requires_grad=True)
    loss = gc.sum_all(W)
    gc.backward(loss)
    with pytest.raises(gc.GradError):
        gc.backward(loss)
    with pytest.raises(gc.GradError):
        gc.backward(W)
    with pytest.raises(gc.GradError):
        gc.backward(gc.sum_all(Matrix(np.ones((2, 2)))))


def test_gradients_accumulate_until_zeroed():
    W = Matrix(np.ones((1, 3)), requires_grad=True)
    gc.backward(gc.sum_all(W))
    gc.backward(gc.sum_all(W))
    assert np.array_equal(W.grad, 2 * np.ones((1, 3)))
    gc.zero_grads([W])
    assert np.array_equal(W.grad, np.zeros((1, 3)))


def test_shared_subexpression_gradient():
    x = Matrix([[2.0, -3.0]], requires_grad=True)
    y = gc.mul(x, x)
    gc.backward(gc.sum_all(gc.add(y, y)))
    assert np.allclose(x.grad, 4 * x.data)


def test_non_finite_is_rejected():
    with pytest.raises(gc.NonFiniteError):
        Matrix([[np.nan]])
    with pytest.raises(gc.NonFiniteError), np.errstate(over="ignore"):
        gc.matmul(Matrix([[1e200]]), Matrix([[1e200]]))


def test_tape_replay_deterministic():
    def run():
        rng = np.random.default_rng(5)
        W = Matrix(rng.normal(size=(4, 3)), requires_grad=True)
        x = Matrix(rng.normal(size=(6, 4)))
        h = gc.dropout(gc.relu(gc.matmul(x, W)), 0.5, True, rng)
        loss = gc.cross_entropy(h, rng.integers(0, 3, 6))
        gc.backward(loss)
        return loss.data.copy(), W.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_simplex(z):
    p = gc.softmax_rows(Matrix(z)).data
    assert np.all(p >= 0)
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4).flatmap(lambda r: st.tuples(
    arrays(np.float64, (r, 3), elements=finite), arrays(np.float64, (r, 3), elements=finite))))
def test_mse_symmetry_and_cosine_bounds(pair):
    a, b = Matrix(pair[0]), Matrix(pair[1])
    assert gc.mse(a, b).item() == gc.mse(b, a).item()
    assert gc.mse(a, a).item() == 0.0
    cs = gc.cosine_similarity(a, b).item()
    assert -1.0 - 1e-12 <= cs <= 1.0 + 1e-12
