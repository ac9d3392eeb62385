"""Tensor-core tests: forward kernels against loop oracles, tape
autodiff against finite differences, and the fused loss."""

import numpy as np
import pytest

import iternet.engine as eng
from iternet.optim import ParamStore

from oracles import (conv2d_loops, fd_gradient, max_pool_2x2_loops, rel_err,
                     upsample2x_loops)


# ---------------------------------------------------------------------------
# conv2d

def test_conv2d_identity_kernel():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    w = np.ones((1, 1, 1, 1), dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    out = eng.conv2d_forward(x, w, b, "same")
    assert np.array_equal(out, x)


def test_conv2d_sum_kernel_hand_case():
    # all-ones 3x3 kernel over a delta image: same-padded response is a
    # 3x3 block of ones around the delta
    x = np.zeros((1, 1, 5, 5), dtype=np.float32)
    x[0, 0, 2, 2] = 1.0
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    out = eng.conv2d_forward(x, w, b, "same")
    want = np.zeros((5, 5), dtype=np.float32)
    want[1:4, 1:4] = 1.0
    assert np.array_equal(out[0, 0], want)


def test_conv2d_bias_broadcast():
    x = np.zeros((2, 3, 4, 4), dtype=np.float32)
    w = np.zeros((5, 3, 3, 3), dtype=np.float32)
    b = np.arange(5, dtype=np.float32)
    out = eng.conv2d_forward(x, w, b, "same")
    for o in range(5):
        assert np.all(out[:, o] == b[o])


def test_conv2d_valid_shape():
    x = np.zeros((1, 2, 9, 7), dtype=np.float32)
    w = np.zeros((4, 2, 3, 3), dtype=np.float32)
    b = np.zeros(4, dtype=np.float32)
    assert eng.conv2d_forward(x, w, b, "valid").shape == (1, 4, 7, 5)
    assert eng.conv2d_forward(x, w, b, "same").shape == (1, 4, 9, 7)


@pytest.mark.parametrize("seed", range(6))
def test_conv2d_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 3))
    cin = int(rng.integers(1, 4))
    cout = int(rng.integers(1, 5))
    k = int(rng.choice([1, 3, 5]))
    h = int(rng.integers(k, 10))
    w = int(rng.integers(k, 10))
    x = rng.standard_normal((n, cin, h, w)).astype(np.float32)
    wt = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
    b = rng.standard_normal(cout).astype(np.float32)
    for padding in ("same", "valid"):
        got = eng.conv2d_forward(x, wt, b, padding)
        want = conv2d_loops(x, wt, b, padding)
        assert got.shape == want.shape
        assert np.allclose(got, want, rtol=1e-4, atol=1e-5)


def test_conv2d_rejects_bad_shapes():
    x = np.zeros((1, 2, 4, 4), dtype=np.float32)
    w = np.zeros((3, 9, 3, 3), dtype=np.float32)
    b = np.zeros(3, dtype=np.float32)
    with pytest.raises(ValueError, match="channel mismatch"):
        eng.conv2d_forward(x, w, b, "same")
    with pytest.raises(ValueError, match="bias"):
        eng.conv2d_forward(x, np.zeros((3, 2, 3, 3), np.float32),
                           np.zeros(4, np.float32), "same")
    with pytest.raises(ValueError, match="smaller than kernel"):
        eng.conv2d_forward(np.zeros((1, 1, 2, 2), np.float32),
                           np.zeros((1, 1, 5, 5), np.float32),
                           np.zeros(1, np.float32), "valid")


# ---------------------------------------------------------------------------
# pooling / upsampling

def test_max_pool_hand_case():
    x = np.array([[1, 2, 5, 6],
                  [3, 4, 7, 8],
                  [4, 3, 2, 1],
                  [2, 1, 0, 0]], dtype=np.float32).reshape(1, 1, 4, 4)
    out = eng.max_pool_2x2_forward(x)
    assert np.array_equal(out[0, 0], [[4, 8], [4, 2]])


def test_max_pool_tie_goes_to_first_in_scan_order():
    x = np.full((1, 1, 2, 2), 7.0, dtype=np.float32)
    out, idx = eng.max_pool_2x2_forward(x, want_argmax=True)
    assert out[0, 0, 0, 0] == 7.0
    assert idx[0, 0, 0, 0] == 0  # top-left wins the tie
    g = np.ones((1, 1, 1, 1), dtype=np.float32)
    dx = eng.max_pool_2x2_backward(g, idx, x.shape)
    assert np.array_equal(dx[0, 0], [[1, 0], [0, 0]])


def test_max_pool_rejects_odd_dims():
    with pytest.raises(ValueError, match="even"):
        eng.max_pool_2x2_forward(np.zeros((1, 1, 3, 4), np.float32))


@pytest.mark.parametrize("seed", range(4))
def test_max_pool_matches_loop_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((2, 3, 6, 8)).astype(np.float32)
    assert np.array_equal(eng.max_pool_2x2_forward(x), max_pool_2x2_loops(x))


def test_upsample_hand_case():
    x = np.array([[1, 2], [3, 4]], dtype=np.float32).reshape(1, 1, 2, 2)
    out = eng.upsample2x_forward(x)
    want = np.array([[1, 1, 2, 2],
                     [1, 1, 2, 2],
                     [3, 3, 4, 4],
                     [3, 3, 4, 4]], dtype=np.float32)
    assert np.array_equal(out[0, 0], want)


@pytest.mark.parametrize("seed", range(4))
def test_upsample_matches_loop_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    x = rng.standard_normal((2, 2, 3, 5)).astype(np.float32)
    assert np.array_equal(eng.upsample2x_forward(x), upsample2x_loops(x))


def test_upsample_backward_sums_blocks():
    g = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    dx = eng.upsample2x_backward(g)
    assert np.array_equal(dx[0, 0], [[0 + 1 + 4 + 5, 2 + 3 + 6 + 7],
                                     [8 + 9 + 12 + 13, 10 + 11 + 14 + 15]])


# ---------------------------------------------------------------------------
# pointwise ops and the fused loss

def test_sigmoid_values_and_stability():
    x = np.array([0.0, 50.0, -50.0, 700.0, -700.0])
    y = eng.sigmoid_forward(x)
    assert y[0] == 0.5
    assert 0.0 <= y.min() and y.max() <= 1.0
    assert np.isfinite(y).all()
    assert y[3] == 1.0 and y[4] < 1e-300


def test_bce_logit_zero_is_ln2():
    z = np.zeros((3, 3))
    y = np.ones((3, 3))
    assert abs(float(eng.bce_with_logits(z, y)) - np.log(2.0)) < 1e-15


def test_bce_saturated_logits_near_zero_loss():
    z = np.full((2, 2), 40.0)
    assert float(eng.bce_with_logits(z, np.ones((2, 2)))) < 1e-9
    assert float(eng.bce_with_logits(-z, np.zeros((2, 2)))) < 1e-9


def test_bce_matches_direct_formula():
    rng = np.random.default_rng(0)
    z = rng.uniform(-10, 10, size=(5, 7))
    y = (rng.random((5, 7)) < 0.5).astype(np.float64)
    p = 1.0 / (1.0 + np.exp(-z))
    direct = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert abs(float(eng.bce_with_logits(z, y)) - direct) < 1e-6


def test_bce_mask_means_over_unmasked_only():
    z = np.array([[0.0, 3.0], [-2.0, 1.0]])
    y = np.array([[1.0, 1.0], [0.0, 1.0]])
    m = np.array([[1, 0], [0, 1]])
    per00 = np.log(2.0)
    per11 = np.log1p(np.exp(-1.0))
    got = float(eng.bce_with_logits(z, y, m))
    assert abs(got - (per00 + per11) / 2) < 1e-12


def test_bce_rejects_bad_inputs():
    z = np.zeros((2, 2))
    with pytest.raises(ValueError, match="labels"):
        eng.bce_with_logits(z, np.full((2, 2), 0.5))
    with pytest.raises(ValueError, match="shape"):
        eng.bce_with_logits(z, np.zeros((2, 3)))
    with pytest.raises(ValueError, match="zero pixels"):
        eng.bce_with_logits(z, np.zeros((2, 2)), np.zeros((2, 2)))


def test_loss_reduction_is_float64():
    z = np.zeros((2, 2), dtype=np.float32)
    out = eng.bce_with_logits(z, np.ones((2, 2), dtype=np.float32))
    assert out.dtype == np.float64


# ---------------------------------------------------------------------------
# tape mechanics

def test_tape_param_binding_is_cached():
    store = ParamStore()
    store.add("w", np.ones(3, dtype=np.float32))
    tape = eng.Tape()
    v1 = tape.param(store, "w")
    v2 = tape.param(store, "w")
    assert v1 is v2


def test_tape_rejects_mixed_tapes():
    t1, t2 = eng.Tape(), eng.Tape()
    a = t1.leaf(np.zeros((1, 1, 2, 2)))
    b = t2.leaf(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError, match="different tapes"):
        eng.add(a, b)


def test_backward_rejects_foreign_and_nonscalar_loss():
    tape = eng.Tape()
    x = tape.leaf(np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        eng.backward(tape, x)
    other = eng.Tape()
    y = other.leaf(np.ones(()))
    with pytest.raises(ValueError, match="belong"):
        eng.backward(tape, y)


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    store = ParamStore()
    store.add("w", eng.he_uniform((4, 2, 3, 3), 18, rng))
    store.add("b", np.zeros(4, dtype=np.float32))
    tape = eng.Tape()
    x = tape.leaf(rng.standard_normal((1, 2, 8, 8)).astype(np.float32))
    h = eng.relu(eng.conv2d(x, tape.param(store, "w"), tape.param(store, "b")))
    p = eng.max_pool_2x2(h)
    out = eng.sigmoid(eng.sum_all(p))
    values = tape.replay()
    for node in tape.nodes:
        recorded = tape._vars[node.output_id].value
        assert np.array_equal(values[node.output_id], recorded)
    assert np.array_equal(values[out.vid], out.value)


def test_elementwise_product_gradient():
    # d(sum(w*x))/dw == x
    store = ParamStore(np.float64)
    w0 = np.array([2.0, -1.0, 0.5])
    x0 = np.array([3.0, 4.0, -2.0])
    store.add("w", w0)
    tape = eng.Tape()
    loss = eng.sum_all(eng.mul(tape.param(store, "w"), tape.leaf(x0)))
    eng.backward(tape, loss)
    assert np.allclose(store.grad("w"), x0)


def test_shared_param_gradient_sums_over_sites():
    # loss = sum(w*a) + sum(w*b) -> dloss/dw = a + b
    store = ParamStore(np.float64)
    store.add("w", np.array([1.0, 1.0]))
    a = np.array([2.0, 5.0])
    b = np.array([-3.0, 7.0])
    tape = eng.Tape()
    w = tape.param(store, "w")
    loss = eng.add(eng.sum_all(eng.mul(w, tape.leaf(a))),
                   eng.sum_all(eng.mul(w, tape.leaf(b))))
    eng.backward(tape, loss)
    assert np.allclose(store.grad("w"), a + b)


@pytest.mark.parametrize("copies", [1, 2, 4])
def test_shared_subgraph_gradient_scales_linearly(copies):
    # k tape uses of the same conv subgraph must give exactly k times the
    # single-use parameter gradient
    rng = np.random.default_rng(11)
    base = ParamStore(np.float64)
    base.add("w", rng.standard_normal((2, 1, 3, 3)))
    base.add("b", rng.standard_normal(2))
    x0 = rng.standard_normal((1, 1, 6, 6))

    def run(k):
        store = base.clone()
        tape = eng.Tape()
        total = None
        for _ in range(k):
            h = eng.conv2d(tape.leaf(x0), tape.param(store, "w"),
                           tape.param(store, "b"))
            s = eng.sum_all(eng.sigmoid(h))
            total = s if total is None else eng.add(total, s)
        eng.backward(tape, total)
        return store.grad("w").copy(), store.grad("b").copy()

    gw1, gb1 = run(1)
    gwk, gbk = run(copies)
    assert rel_err(gwk, copies * gw1) < 1e-12
    assert rel_err(gbk, copies * gb1) < 1e-12


# ---------------------------------------------------------------------------
# finite-difference gradient checks (64-bit stores, central differences)

def _fd_check(build, store, eps=1e-3, tol=1e-3):
    """build(tape, store) -> scalar loss var; checks every param grad."""
    tape = eng.Tape()
    loss = eng.backward(tape, build(tape, store))
    del loss
    for name in store.names():
        got = store.grad(name)

        def f(v, name=name):
            probe = store.clone()
            probe.set_value(name, v)
            t = eng.Tape()
            return float(build(t, probe).value)

        want = fd_gradient(f, store.value(name), eps)
        assert rel_err(got, want) < tol, f"{name}: {rel_err(got, want)}"


@pytest.mark.parametrize("seed", range(10))
def test_conv_relu_pool_loss_gradients_match_fd(seed):
    rng = np.random.default_rng(1000 + seed)
    store = ParamStore(np.float64)
    store.add("w1", 0.5 * rng.standard_normal((3, 2, 3, 3)))
    store.add("b1", 0.1 * rng.standard_normal(3))
    store.add("w2", 0.5 * rng.standard_normal((1, 3, 1, 1)))
    store.add("b2", 0.1 * rng.standard_normal(1))
    x0 = rng.standard_normal((2, 2, 4, 4))
    y0 = (rng.random((2, 1, 2, 2)) < 0.5).astype(np.float64)

    def build(tape, ps):
        h = eng.conv2d(tape.leaf(x0), tape.param(ps, "w1"),
                       tape.param(ps, "b1"))
        h = eng.relu(h)
        h = eng.max_pool_2x2(h)
        z = eng.conv2d(h, tape.param(ps, "w2"), tape.param(ps, "b2"))
        return eng.sigmoid_cross_entropy(z, y0)

    _fd_check(build, store)


@pytest.mark.parametrize("seed", range(4))
def test_upsample_concat_path_gradients_match_fd(seed):
    rng = np.random.default_rng(2000 + seed)
    store = ParamStore(np.float64)
    store.add("wu", 0.5 * rng.standard_normal((2, 2, 3, 3)))
    store.add("bu", 0.1 * rng.standard_normal(2))
    store.add("wm", 0.5 * rng.standard_normal((1, 4, 3, 3)))
    store.add("bm", 0.1 * rng.standard_normal(1))
    lo = rng.standard_normal((1, 2, 3, 3))
    hi = rng.standard_normal((1, 2, 6, 6))

    def build(tape, ps):
        up = eng.upsample2x_conv(tape.leaf(lo), tape.param(ps, "wu"),
                                 tape.param(ps, "bu"))
        cat = eng.concat_channels(up, tape.leaf(hi))
        z = eng.conv2d(cat, tape.param(ps, "wm"), tape.param(ps, "bm"))
        return eng.scale(eng.sum_all(eng.sigmoid(z)), 0.25)

    _fd_check(build, store)


def test_masked_loss_gradients_match_fd():
    rng = np.random.default_rng(5)
    store = ParamStore(np.float64)
    store.add("w", 0.5 * rng.standard_normal((1, 1, 3, 3)))
    store.add("b", np.zeros(1))
    x0 = rng.standard_normal((1, 1, 6, 6))
    y0 = (rng.random((1, 1, 6, 6)) < 0.4).astype(np.float64)
    m0 = (rng.random((1, 1, 6, 6)) < 0.7).astype(np.float64)

    def build(tape, ps):
        z = eng.conv2d(tape.leaf(x0), tape.param(ps, "w"), tape.param(ps, "b"))
        return eng.sigmoid_cross_entropy(z, y0, m0)

    _fd_check(build, store)


def test_sigmoid_gradient_quarter_at_zero():
    store = ParamStore(np.float64)
    store.add("z", np.zeros(()))
    tape = eng.Tape()
    out = eng.sigmoid(tape.param(store, "z"))
    eng.backward(tape, out)
    assert abs(store.grad("z") - 0.25) < 1e-12


def test_relu_subgradient_at_zero_is_zero():
    store = ParamStore(np.float64)
    store.add("x", np.array([0.0, -1.0, 2.0]))
    tape = eng.Tape()
    out = eng.sum_all(eng.relu(tape.param(store, "x")))
    eng.backward(tape, out)
    assert np.array_equal(store.grad("x"), [0.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# init

def test_he_uniform_bound_and_determinism():
    a = eng.he_uniform((64, 3, 3, 3), fan_in=27, rng=np.random.default_rng(9))
    b = eng.he_uniform((64, 3, 3, 3), fan_in=27, rng=np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert a.dtype == np.float32
    bound = np.sqrt(6.0 / 27)
    assert a.min() >= -bound and a.max() <= bound
    # spread should actually fill the interval
    assert a.max() > 0.8 * bound and a.min() < -0.8 * bound
