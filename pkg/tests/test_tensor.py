import numpy as np
import pytest

from firecastnet import tensor as tn
from firecastnet import model
from firecastnet.tensor import Tensor, TensorError

from conftest import toy_setup

TOL = 1e-4


def gradcheck(fn, inputs, max_entries=60, eps=1e-6, seed=0):
    """Max relative error between backward() and central differences.

    ``fn(*inputs)`` returns a tensor; it is reduced with fixed random weights
    so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    with tn.precision(np.float64):
        tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
        out = fn(*tensors)
        w = Tensor(rng.standard_normal(out.shape))

        def loss():
            return tn.sum_(fn(*tensors) * w)

        value = loss()
        value.backward()
        worst = 0.0
        for t in tensors:
            analytic = np.zeros(t.shape) if t.grad is None else t.grad.reshape(-1)
            idx = np.arange(t.size)
            if t.size > max_entries:
                idx = rng.choice(t.size, max_entries, replace=False)
            numeric = tn.numerical_grad(loss, t, idx, eps)
            err = tn.relative_error(np.asarray(analytic).reshape(-1)[idx], numeric)
            worst = max(worst, float(err.max()))
    return worst


R = np.random.default_rng(42)


def rand(*shape, low=None):
    a = R.standard_normal(shape)
    if low is not None:
        # keep away from kinks
        a = np.sign(a) * (np.abs(a) + low)
    return a


CASES = {
    "add": (lambda a, b: a + b, [rand(3, 4), rand(3, 4)]),
    "add_bias": (lambda a, b: a + b, [rand(5, 3), rand(3)]),
    "sub": (lambda a, b: a - b, [rand(3, 4), rand(4)]),
    "mul": (lambda a, b: a * b, [rand(3, 4), rand(3, 4)]),
    "mul_column": (lambda a, b: a * b, [rand(3, 4), rand(3, 1)]),
    "neg": (lambda a: -a, [rand(4)]),
    "scale": (lambda a: tn.scale(a, 2.5), [rand(4, 2)]),
    "sigmoid": (tn.sigmoid, [rand(3, 5)]),
    "tanh": (tn.tanh, [rand(3, 5)]),
    "relu": (tn.relu, [rand(3, 5, low=0.1)]),
    "silu": (tn.silu, [rand(3, 5)]),
    "reshape": (lambda a: tn.reshape(a, (6, 2)), [rand(3, 4)]),
    "transpose": (lambda a: tn.transpose(a, (2, 0, 1)), [rand(2, 3, 4)]),
    "concat": (lambda a, b: tn.concat([a, b], axis=1), [rand(3, 2), rand(3, 4)]),
    "sum_all": (lambda a: tn.sum_(a), [rand(3, 4)]),
    "sum_axis": (lambda a: tn.sum_(a, axis=0), [rand(3, 4)]),
    "mean": (lambda a: tn.mean(a, axis=1), [rand(3, 4)]),
    "matmul": (tn.matmul, [rand(4, 3), rand(3, 5)]),
    "linear": (tn.linear, [rand(6, 3), rand(3, 2), rand(2)]),
    "layer_norm": (tn.layer_norm, [rand(5, 6), rand(6), rand(6)]),
    "scatter_sum": (lambda m: tn.scatter_sum(m, np.array([0, 2, 2, 1, 0, 3]), 5), [rand(6, 3)]),
    "gather": (lambda x: tn.gather(x, np.array([1, 1, 3, 0])), [rand(4, 3)]),
    "take_rows": (lambda x: tn.take_rows(x, 1, 3), [rand(4, 3)]),
    "conv3d": (lambda x, w, b: tn.conv3d(x, w, b, (2, 2, 2)), [rand(2, 3, 4, 6), rand(4, 3, 2, 2, 2), rand(4)]),
    "conv3d_time": (lambda x, w, b: tn.conv3d(x, w, b, (1, 2, 2)), [rand(2, 3, 4, 4), rand(2, 3, 1, 2, 2), rand(2)]),
    "conv2d": (tn.conv2d, [rand(2, 3, 5, 5), rand(4, 3, 3, 3), rand(4)]),
    "conv2d_k5": (tn.conv2d, [rand(1, 2, 5, 5), rand(2, 2, 5, 5), rand(2)]),
    "pixel_shuffle": (lambda x: tn.pixel_shuffle(x, 2), [rand(8, 3, 2)]),
    "pixel_unshuffle": (lambda x: tn.pixel_unshuffle(x, 2), [rand(2, 4, 6)]),
}
_Y, _M = R.random((4, 5)) > 0.5, R.random((4, 5)) > 0.3
CASES["bce"] = (lambda z: tn.bce_with_logits(z, _Y, _M), [rand(4, 5)])


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients(name):
    fn, inputs = CASES[name]
    assert gradcheck(fn, inputs) < TOL


def test_dropout_gradient_uses_same_mask():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((50,)), requires_grad=True, dtype=np.float64)
    y = tn.dropout(x, 0.5, np.random.default_rng(1))
    y.backward(np.ones(50))
    kept = y.data != 0
    assert np.allclose(x.grad[kept], 2.0) and np.all(x.grad[~kept] == 0)
    assert tn.dropout(x, 0.5, None, training=False) is x


def test_toy_firecastnet_end_to_end_gradients():
    cfg, graphs, state, x = toy_setup(np.float64)
    rng = np.random.default_rng(7)
    with tn.precision(np.float64):
        xt = Tensor(x, requires_grad=True)
        target = rng.random((16, 32)) > 0.7

        def loss():
            return tn.bce_with_logits(model.firecastnet_forward(xt, graphs, state), target)

        state.zero_grad()
        loss().backward()
        worst = 0.0
        for t in [xt] + list(state.params.values()):
            idx = rng.choice(t.size, min(t.size, 4), replace=False)
            numeric = tn.numerical_grad(loss, t, idx, 1e-6)
            analytic = t.grad.reshape(-1)[idx]
            worst = max(worst, float(tn.relative_error(analytic, numeric).max()))
    assert worst < TOL


def test_broadcast_is_restricted():
    with pytest.raises(TensorError):
        tn.add(Tensor(np.ones((3, 1))), Tensor(np.ones((1, 4))))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(TensorError):
        (x * 2.0).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with tn.no_grad():
        y = tn.sigmoid(x)
    assert not y.requires_grad


def test_gradient_accumulates_over_shared_use():
    x = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    (x * x + x).sum().backward()
    assert np.allclose(x.grad, [5.0])


def test_sigmoid_extremes_are_finite():
    y = tn.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]), dtype=np.float64))
    assert np.array_equal(y.data, [0.0, 0.5, 1.0])


def test_pixel_shuffle_index_rule():
    r, c, h, w = 2, 3, 2, 4
    x = np.arange(c * r * r * h * w, dtype=np.float64).reshape(c * r * r, h, w)
    y = tn.pixel_shuffle(Tensor(x, dtype=np.float64), r).data
    for ch in range(c):
        for yy in range(h):
            for xx in range(w):
                for dy in range(r):
                    for dx in range(r):
                        assert y[ch, r * yy + dy, r * xx + dx] == x[ch * r * r + dy * r + dx, yy, xx]
    back = tn.pixel_unshuffle(Tensor(y, dtype=np.float64), r).data
    assert np.array_equal(back, x)


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    out = tn.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                ref[0, o, i, j] = np.sum(xp[0, :, i : i + 3, j : j + 3] * w[o])
    assert np.allclose(out, ref, atol=1e-12)


def test_scatter_sum_matches_add_at():
    rng = np.random.default_rng(2)
    m = rng.standard_normal((40, 3))
    idx = rng.integers(0, 7, 40)
    ref = np.zeros((7, 3))
    np.add.at(ref, idx, m)
    got = tn.scatter_sum(Tensor(m, dtype=np.float64), idx, 7).data
    assert np.allclose(got, ref, atol=1e-12)


def test_bce_worked_values():
    with tn.precision(np.float64):
        z = Tensor(np.array([[0.0, 2.0], [-2.0, 0.0]]))
        loss = tn.bce_with_logits(z, np.array([[1, 1], [0, 0]]))
    assert abs(float(loss.data) - 0.410038) < 1e-6


def test_dump_roundtrip(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    tn.dump_tensor(a, tmp_path / "t.bin")
    assert np.array_equal(tn.load_tensor(tmp_path / "t.bin"), a)
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:4] == (3).to_bytes(4, "little")
    assert len(raw) == 4 + 12 + 24 * 4
