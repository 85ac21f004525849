import numpy as np
import pytest

from nina import diffcore as dc
from nina.conditioners import AttnConditioner, MlpConditioner, pool_context, sinusoidal

from gradcheck import check_module_grads
from helpers import randomize


def _inputs(rng, b=3, t=4, d=2, m=3, c=5):
    return dc.Tensor(rng.standard_normal((b, t, d))), dc.Tensor(rng.standard_normal((b, m, c)))


def test_mlp_zero_head_outputs_zero():
    rng = np.random.default_rng(0)
    cond = MlpConditioner(3, 5, 4, 16, 3, rng)
    s, b = cond(dc.Tensor(rng.standard_normal((7, 3))), dc.Tensor(rng.standard_normal((7, 2, 5))))
    assert s.shape == b.shape == (7, 4)
    np.testing.assert_array_equal(s.data, 0.0)
    np.testing.assert_array_equal(b.data, 0.0)


def test_attn_zero_head_outputs_zero():
    rng = np.random.default_rng(1)
    cond = AttnConditioner(2, 5, 8, 2, rng)
    s, b = cond(*_inputs(rng))
    assert s.shape == (3, 4, 2)
    np.testing.assert_array_equal(s.data, 0.0)
    np.testing.assert_array_equal(b.data, 0.0)


def test_scale_stays_inside_tanh_range():
    rng = np.random.default_rng(2)
    cond = MlpConditioner(3, 5, 4, 16, 3, rng)
    randomize(cond, rng, 5.0)
    s, _ = cond(dc.Tensor(10 * rng.standard_normal((50, 3))), dc.Tensor(rng.standard_normal((50, 1, 5))))
    assert np.all(np.abs(s.data) <= 1.0)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    cond = MlpConditioner(3, 4, 2, 6, 3, rng)
    randomize(cond, rng, 0.5)
    x1, h = dc.Tensor(rng.standard_normal((4, 3))), dc.Tensor(rng.standard_normal((4, 2, 4)))

    def loss():
        s, b = cond(x1, h)
        return dc.sum(s) + dc.sum(b)

    err, where = check_module_grads(loss, cond.named_parameters())
    assert err < 1e-5, where


def test_attention_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    cond = AttnConditioner(2, 5, 8, 2, rng, heads=4)
    randomize(cond, rng, 0.4)
    x1, h = _inputs(rng, b=2, t=4, m=3)
    probe_s, probe_b = rng.standard_normal((2, 4, 2)), rng.standard_normal((2, 4, 2))

    def loss():
        s, b = cond(x1, h)
        return dc.sum(s * probe_s) + dc.sum(b * probe_b)

    err, where = check_module_grads(loss, cond.named_parameters())
    assert err < 1e-4, where


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(5)
    cond = AttnConditioner(2, 5, 8, 2, rng)
    randomize(cond, rng, 1.0)
    cond(*_inputs(rng))
    for block in cond.blocks:
        for attn in (block.self_attn, block.cross_attn):
            assert np.abs(attn.last_weights.sum(-1) - 1).max() < 1e-12


def test_single_context_token_gets_all_cross_attention():
    rng = np.random.default_rng(6)
    cond = AttnConditioner(2, 5, 8, 2, rng)
    randomize(cond, rng, 1.0)
    cond(*_inputs(rng, m=1))
    for block in cond.blocks:
        assert np.all(block.cross_attn.last_weights == 1.0)


def test_output_depends_on_every_token():
    rng = np.random.default_rng(7)
    cond = AttnConditioner(2, 5, 8, 1, rng)
    randomize(cond, rng, 0.5)
    x1, h = _inputs(rng, b=1)
    s0, _ = cond(x1, h)
    for src in (x1, h):
        bumped = src.data.copy()
        bumped[0, -1] += 1.0
        args = (dc.Tensor(bumped), h) if src is x1 else (x1, dc.Tensor(bumped))
        s1, _ = cond(*args)
        assert np.abs(s1.data[0, 0] - s0.data[0, 0]).max() > 1e-6


def test_shape_errors():
    rng = np.random.default_rng(8)
    mlp = MlpConditioner(3, 5, 4, 8, 2, rng)
    with pytest.raises(dc.ShapeError):
        mlp(dc.Tensor(np.ones((2, 4))), dc.Tensor(np.ones((2, 1, 5))))
    attn = AttnConditioner(2, 5, 8, 1, rng)
    with pytest.raises(dc.ShapeError):
        attn(dc.Tensor(np.ones((2, 0, 2))), dc.Tensor(np.ones((2, 1, 5))))
    with pytest.raises(dc.ShapeError):
        attn(dc.Tensor(np.ones((2, 3, 2))), dc.Tensor(np.ones((2, 0, 5))))
    with pytest.raises(ValueError, match="divisible"):
        AttnConditioner(2, 5, 6, 1, rng, heads=4)


def test_pool_and_positions():
    h = dc.Tensor(np.arange(12.0).reshape(1, 3, 4))
    np.testing.assert_array_equal(pool_context(h).data, [[4.0, 5.0, 6.0, 7.0]])
    pe = sinusoidal(np.array([0, 3]), 6)
    assert pe.shape == (2, 6)
    np.testing.assert_array_equal(pe[0, ::2], 0.0)
    assert not np.allclose(pe[0], pe[1])
