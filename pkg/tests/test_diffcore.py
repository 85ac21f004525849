import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nina import diffcore as dc
from gradcheck import max_rel_error, numeric_grad, tape_grads, tensor_rel_error


def test_matmul_identity():
    a = dc.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = dc.matmul(a, dc.Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_fixed_points():
    assert dc.tanh(dc.Tensor(0.0)).data == 0.0
    assert dc.exp(dc.Tensor(0.0)).data == 1.0
    np.testing.assert_allclose(dc.softmax(dc.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_sum_of_squares_gradient():
    x = dc.parameter([1.0, 2.0, 3.0])
    with dc.Tape() as tape:
        tape.backward(dc.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_tanh_matvec_matches_finite_differences():
    rng = np.random.default_rng(0)
    w = dc.parameter(rng.standard_normal((4, 3)))
    x = dc.Tensor(rng.standard_normal((5, 4)))

    def loss():
        return dc.sum(dc.tanh(x @ w))

    (g,) = tape_grads(loss, [w])
    num = numeric_grad(lambda: float(dc.sum(dc.tanh(x @ w)).data), w.data, 1e-5)
    assert max_rel_error(g, num) < 1e-6


def test_constant_loss_leaves_zero_grads():
    w = dc.parameter(np.ones(3))
    with dc.Tape() as tape:
        loss = dc.sum(dc.Tensor(np.arange(3.0)))
        tape.backward(loss)
    np.testing.assert_array_equal(w.grad, 0.0)


def test_backward_errors():
    x = dc.parameter(np.ones(3))
    with dc.Tape() as tape:
        y = x * 2.0
        with pytest.raises(dc.TapeError, match="scalar"):
            tape.backward(y)
        loss = dc.sum(y)
        tape.backward(loss)
        with pytest.raises(dc.TapeError, match="already"):
            tape.backward(loss)
        tape.reset()
    detached = dc.sum(x * 2.0)
    with pytest.raises(dc.TapeError, match="detached"):
        dc.backward(detached)


def test_shape_and_finiteness_errors():
    with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))
    with pytest.raises(dc.ShapeError):
        dc.add(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 1))))
    with pytest.raises(dc.NonFiniteError, match="exp"):
        dc.exp(dc.Tensor([1000.0]))
    with pytest.raises(dc.NonFiniteError, match="log"):
        dc.log(dc.Tensor([0.0]))


def test_leading_dim_broadcast_only():
    x = dc.parameter(np.ones((3, 4)))
    b = dc.parameter(np.arange(4.0))
    with dc.Tape() as tape:
        tape.backward(dc.sum((x + b) * (x + b)))
    np.testing.assert_allclose(b.grad, 2 * 3 * (1 + np.arange(4.0)))


# every op kind against the finite-difference oracle on random shapes up to 8x8

def _op_cases():
    def unary(fn):
        return lambda ts: fn(ts[0])

    return {
        "matmul": ([(3, 4), (4, 2)], lambda ts: ts[0] @ ts[1]),
        "batched_matmul": ([(2, 3, 4), (4, 5)], lambda ts: ts[0] @ ts[1]),
        "matmul_4d": ([(2, 2, 3, 4), (2, 2, 4, 3)], lambda ts: ts[0] @ ts[1]),
        "add": ([(3, 4), (4,)], lambda ts: ts[0] + ts[1]),
        "sub": ([(3, 4), (3, 4)], lambda ts: ts[0] - ts[1]),
        "mul": ([(2, 3, 4), (3, 4)], lambda ts: ts[0] * ts[1]),
        "exp": ([(3, 4)], unary(dc.exp)),
        "tanh": ([(3, 4)], unary(dc.tanh)),
        "log": ([(3, 4)], lambda ts: dc.log(ts[0] * ts[0] + 0.5)),
        "sigmoid": ([(5,)], unary(dc.sigmoid)),
        "silu": ([(4, 3)], unary(dc.silu)),
        "sum": ([(3, 4, 2)], lambda ts: dc.sum(ts[0], axis=(0, 2))),
        "mean": ([(3, 4)], lambda ts: dc.mean(ts[0], axis=1)),
        "slice": ([(5, 6)], lambda ts: ts[0][1:4, ::2]),
        "gather": ([(3, 6)], lambda ts: dc.gather(ts[0], [5, 0, 2, 2], 1)),
        "concat": ([(2, 3), (2, 5)], lambda ts: dc.concat(ts, axis=1)),
        "softmax": ([(3, 5)], unary(dc.softmax)),
        "transpose": ([(2, 3, 4)], lambda ts: dc.transpose(ts[0], (2, 0, 1))),
        "reshape": ([(2, 6)], lambda ts: dc.reshape(ts[0], (3, 4))),
        "layer_norm": ([(3, 6), (6,), (6,)], lambda ts: dc.layer_norm(*ts)),
    }


@pytest.mark.parametrize("kind", sorted(_op_cases()))
def test_op_gradients(kind):
    shapes, fn = _op_cases()[kind]
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    params = [dc.parameter(rng.standard_normal(s)) for s in shapes]
    probe = None

    def loss():
        nonlocal probe
        out = fn(params)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return dc.sum(out * dc.Tensor(probe))

    grads = tape_grads(loss, params)
    for p, g in zip(params, grads):
        num = numeric_grad(lambda: float(loss().data), p.data, 1e-5)
        assert max_rel_error(g, num, floor=1e-6) < 1e-5, kind


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 8), cols=st.integers(1, 8), inner=st.integers(1, 8),
       seed=st.integers(0, 2**31))
def test_matmul_tanh_gradients_random_shapes(rows, cols, inner, seed):
    rng = np.random.default_rng(seed)
    a = dc.parameter(rng.standard_normal((rows, inner)))
    b = dc.parameter(rng.standard_normal((inner, cols)))

    def loss():
        return dc.sum(dc.tanh(a @ b))

    ga, gb = tape_grads(loss, [a, b])
    value = lambda: float(loss().data)  # noqa: E731
    assert tensor_rel_error(ga, numeric_grad(value, a.data)) < 1e-5
    assert tensor_rel_error(gb, numeric_grad(value, b.data)) < 1e-5


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    w = dc.parameter(rng.standard_normal((4, 4)))
    x = dc.Tensor(rng.standard_normal((6, 4)))

    def l1():
        return dc.sum(dc.tanh(x @ w))

    def l2():
        return dc.sum(dc.exp(dc.mul(x @ w, 0.1)))

    (g1,) = tape_grads(l1, [w])
    (g2,) = tape_grads(l2, [w])
    (g12,) = tape_grads(lambda: l1() * 2.5 + l2() * -0.75, [w])
    np.testing.assert_allclose(g12, 2.5 * g1 - 0.75 * g2, rtol=0, atol=1e-12)


def test_determinism():
    def run():
        rng = np.random.default_rng(11)
        w = dc.parameter(rng.standard_normal((5, 5)))
        x = dc.Tensor(rng.standard_normal((7, 5)))
        with dc.Tape() as tape:
            loss = dc.sum(dc.softmax(dc.tanh(x @ w)) * x)
            tape.backward(loss)
        return loss.data.copy(), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_backward_visits_nodes_in_reverse_order():
    seen = []
    x = dc.parameter([1.0, 2.0])
    with dc.Tape() as tape:
        y = dc.tanh(x)
        z = dc.exp(y)
        loss = dc.sum(z)
        for i, (out, inputs, rule) in enumerate(tape.nodes):
            def wrapped(g, rule=rule, i=i):
                seen.append(i)
                return rule(g)
            tape.nodes[i] = (out, inputs, wrapped)
        tape.backward(loss)
    assert seen == [2, 1, 0]


def test_no_tape_records_nothing():
    x = dc.parameter([1.0])
    with dc.Tape() as tape:
        with dc.no_tape():
            y = dc.exp(x)
        assert tape.nodes == [] and not y.requires_grad
