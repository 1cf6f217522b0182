import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gridcast import autodiff as ad
from gridcast.autodiff import AutodiffError, MeanAggregator, Tape, Tensor

from conftest import fd_grad, rel_err

SEEDS = range(100)


def check_op(build, shapes, seed, tol=1e-5, positive_margin=False):
    """Compare tape gradients of sum(op(*xs) * R) with central differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal(s) for s in shapes]
    if positive_margin:  # keep relu inputs away from the kink
        xs = [np.where(np.abs(x) < 1e-2, 0.5, x) for x in xs]
    out_shape = build(*[Tensor(x) for x in xs]).shape
    R = rng.standard_normal(out_shape)

    def f(*arrs):
        return float(np.sum(build(*[Tensor(a) for a in arrs]).data * R))

    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(build(*ts), R))
    tape.backward(loss)
    for t, g in zip(ts, fd_grad(f, [x.copy() for x in xs])):
        assert rel_err(t.grad, g) < tol


# --- forward semantics -----------------------------------------------------------------

def test_matmul_values():
    a = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(a, [[5.0], [6.0]]).data, [[17.0], [39.0]])
    A = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(ad.matmul(A, np.eye(4)).data, A)
    with pytest.raises(ValueError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_elementwise_values():
    np.testing.assert_array_equal(ad.relu([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])
    assert ad.sigmoid([0.0]).data[0] == 0.5
    assert ad.tanh([0.0]).data[0] == 0.0
    # saturates without overflow warnings
    with np.errstate(all="raise"):
        s = ad.sigmoid([-800.0, 800.0]).data
    np.testing.assert_allclose(s, [0.0, 1.0])
    assert ad.elementwise("add", [1.0], [2.0]).data[0] == 3.0
    with pytest.raises(ValueError):
        ad.elementwise("exp", [1.0])


def test_relu_gradient_at_zero_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 1.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.relu(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_broadcast_only_row_bias():
    x = np.ones((3, 4))
    assert ad.add(x, np.ones(4)).shape == (3, 4)
    assert ad.add(x, np.ones((1, 4))).shape == (3, 4)
    with pytest.raises(ValueError):
        ad.add(x, np.ones((3, 1)))
    with pytest.raises(ValueError):
        ad.mul(x, np.ones(3))


def test_concat_cols():
    np.testing.assert_array_equal(ad.concat_cols([[1.0]], [[2.0]]).data, [[1.0, 2.0]])
    a = np.random.default_rng(0).standard_normal((3, 2))
    np.testing.assert_array_equal(ad.concat_cols(a, np.zeros((3, 0))).data, a)
    with pytest.raises(ValueError):
        ad.concat_cols(np.ones((2, 1)), np.ones((3, 1)))


def test_neighbor_mean_values():
    edges = [(0, 1), (1, 0), (1, 2), (2, 1)]
    out = ad.neighbor_mean(np.array([[1.0], [3.0], [5.0]]), edges, 3)
    np.testing.assert_array_equal(out.data, [[3.0], [3.0], [3.0]])
    assert not ad.neighbor_mean(np.ones((4, 2)), np.zeros((0, 2), dtype=int), 4).data.any()
    with pytest.raises(IndexError):
        MeanAggregator([(0, 7)], 3)


def test_neighbor_mean_regular_graph_constant():
    n = 6
    ring = [(i, (i + 1) % n) for i in range(n)] + [((i + 1) % n, i) for i in range(n)]
    h = np.full((n, 3), 2.5)
    np.testing.assert_allclose(ad.neighbor_mean(h, ring, n).data, h)


def test_neighbor_mean_batched_matches_loop():
    rng = np.random.default_rng(1)
    edges = [(0, 1), (2, 1), (1, 3), (3, 0)]
    h = rng.standard_normal((5, 4, 3))
    out = ad.neighbor_mean(h, edges, 4).data
    for t in range(5):
        np.testing.assert_allclose(out[t], ad.neighbor_mean(h[t], edges, 4).data, rtol=1e-15)


def test_dropout_modes():
    h = np.random.default_rng(0).standard_normal((10, 10))
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(ad.dropout(h, 0.0, True, rng).data, h)
    np.testing.assert_array_equal(ad.dropout(h, 0.5, False).data, h)
    with pytest.raises(ValueError):
        ad.dropout(h, 1.0, True, rng)


def test_dropout_keep_fraction():
    out = ad.dropout(np.ones(100_000), 0.1, True, np.random.default_rng(7)).data
    kept = np.count_nonzero(out) / out.size
    assert abs(kept - 0.9) < 0.01
    np.testing.assert_allclose(out[out != 0], 1 / 0.9)


def _bn(h, gamma=None, beta=None, training=True):
    d = h.shape[-1]
    rm, rv = np.zeros(d), np.ones(d)
    g = np.ones(d) if gamma is None else gamma
    b = np.zeros(d) if beta is None else beta
    return ad.batch_norm(h, g, b, rm, rv, training), rm, rv


def test_batch_norm_constant_column_gives_beta():
    h = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
    out, _, _ = _bn(h, np.array([2.0, 1.0]), np.array([0.7, 0.0]))
    np.testing.assert_allclose(out.data[:, 0], 0.7)


def test_batch_norm_standardised_input():
    x = np.random.default_rng(0).standard_normal((50, 3))
    x = (x - x.mean(0)) / x.std(0)
    out, _, _ = _bn(x)
    # an already standardised column is only rescaled by 1/sqrt(1 + eps)
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), atol=1e-12)
    np.testing.assert_allclose(out.data, x, rtol=1e-5)


def test_batch_norm_running_stats_sequential():
    rng = np.random.default_rng(2)
    h = rng.standard_normal((4, 6, 3))
    _, rm, rv = _bn(h)
    em, ev = np.zeros(3), np.ones(3)
    for t in range(4):
        em = 0.9 * em + 0.1 * h[t].mean(0)
        ev = 0.9 * ev + 0.1 * h[t].var(0, ddof=1)
    np.testing.assert_allclose(rm, em, rtol=1e-13)
    np.testing.assert_allclose(rv, ev, rtol=1e-13)


def test_batch_norm_eval_uses_running_stats():
    h = np.random.default_rng(3).standard_normal((5, 2))
    rm, rv = np.array([0.5, -1.0]), np.array([4.0, 0.25])
    out = ad.batch_norm(h, np.ones(2), np.zeros(2), rm, rv, training=False)
    np.testing.assert_allclose(out.data, (h - rm) / np.sqrt(rv + 1e-5))
    with pytest.raises(ValueError):
        _bn(np.ones((1, 3)))


# --- tape contract ------------------------------------------------------------------------

def test_backward_sum_and_square():
    w = Tensor(np.random.default_rng(0).standard_normal((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(w)
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, np.ones((3, 2)))
    w.zero_grad()
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(w, w))
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, 2 * w.data)


def test_backward_twice_rejected():
    w = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(w)
    tape.backward(loss)
    with pytest.raises(AutodiffError):
        tape.backward(loss)


def test_backward_detached_rejected():
    with pytest.raises(AutodiffError):
        ad.backward(Tensor(np.array(1.0)))
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.scale(w, 2.0)
    with pytest.raises(AutodiffError, match="scalar"):
        tape.backward(y)


def test_shared_input_accumulates():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.add(ad.mul(w, w), ad.scale(w, 3.0)))
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, 2 * w.data + 3.0)


def test_forward_determinism():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((20, 8))
    a = ad.dropout(h, 0.1, True, np.random.default_rng(5)).data
    b = ad.dropout(h, 0.1, True, np.random.default_rng(5)).data
    assert a.tobytes() == b.tobytes()


# --- finite-difference checks, 100 seeds per op -----------------------------------------------

OPS = {
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 2)]),
    "linear": (lambda x, w, b: ad.linear(x, w, b), [(2, 3, 4), (5, 4), (5,)]),
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (1, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    "sigmoid": (lambda a: ad.sigmoid(a), [(3, 4)]),
    "tanh": (lambda a: ad.tanh(a), [(3, 4)]),
    "concat_cols": (lambda a, b: ad.concat_cols(a, b), [(2, 3, 2), (2, 3, 3)]),
    "neighbor_mean": (lambda h: ad.neighbor_mean(h, [(0, 1), (2, 1), (1, 3), (3, 0), (1, 0)], 4), [(2, 4, 3)]),
    "mean_all": (lambda a: ad.mean_all(a), [(3, 4)]),
    "gru_cell": (lambda h, x, wi, wh, bi, bh: ad.gru_cell(h, x, wi, wh, bi, bh),
                 [(4, 3), (4, 2), (9, 2), (9, 3), (9,), (9,)]),
    "gru_sequence": (lambda xs, h, wi, wh, bi, bh: ad.gru_sequence(xs, h, wi, wh, bi, bh),
                     [(3, 4, 2), (4, 3), (9, 2), (9, 3), (9,), (9,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_finite_difference(name):
    build, shapes = OPS[name]
    for seed in SEEDS:
        check_op(build, shapes, seed)


def test_finite_difference_relu():
    for seed in SEEDS:
        check_op(lambda a: ad.relu(a), [(3, 4)], seed, positive_margin=True)


def test_finite_difference_batch_norm():
    def build(h, g, b):
        return ad.batch_norm(h, g, b, np.zeros(3), np.ones(3), True)

    for seed in SEEDS:
        check_op(build, [(2, 5, 3), (3,), (3,)], seed)

    def build_eval(h, g, b):
        return ad.batch_norm(h, g, b, np.full(3, 0.3), np.full(3, 2.0), False)

    for seed in range(10):
        check_op(build_eval, [(5, 3), (3,), (3,)], seed)


def test_finite_difference_dropout_fixed_mask():
    def build(h):
        return ad.dropout(h, 0.3, True, np.random.default_rng(99))

    for seed in range(10):
        check_op(build, [(4, 5)], seed)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (4, 2), elements=st.floats(-5, 5)))
def test_matmul_matches_loops(a, b):
    out = ad.matmul(a, b).data
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            ref[i, j] = sum(a[i, k] * b[k, j] for k in range(4))
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
