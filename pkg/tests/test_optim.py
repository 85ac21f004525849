import math

import numpy as np
import pytest

from nina import diffcore as dc
from nina.optim import AdamW, clip_grad_norm, cosine_lr


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(99, 100, 1e-3) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(99, 100, 1e-3, min_ratio=0.1) == pytest.approx(1e-4)
    assert cosine_lr(0, 1, 0.5) == 0.5
    lrs = [cosine_lr(s, 50, 1.0) for s in range(50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_clip_grad_norm():
    p, q = dc.parameter(np.zeros(2)), dc.parameter(np.zeros(1))
    p.grad[:] = [3.0, 0.0]
    q.grad[:] = [4.0]
    assert clip_grad_norm([p, q], 1.0) == pytest.approx(5.0)
    assert math.sqrt(np.sum(p.grad ** 2) + np.sum(q.grad ** 2)) == pytest.approx(1.0)
    p.grad[:] = [0.3, 0.4]
    q.grad[:] = [0.0]
    clip_grad_norm([p, q], 1.0)
    np.testing.assert_array_equal(p.grad, [0.3, 0.4])


def test_adamw_first_step_by_hand():
    p = dc.parameter([1.0, -2.0])
    p.grad[:] = [0.5, -0.1]
    AdamW([p], lr=0.1, weight_decay=0.01).step()
    # first bias-corrected step is lr * g / |g| after decoupled decay
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.sign([0.5, -0.1])
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-7)


def test_adamw_minimizes_quadratic():
    p = dc.parameter([3.0, -1.0])
    opt = AdamW([p], lr=0.05, weight_decay=0.0)
    for _ in range(500):
        opt.zero_grad()
        with dc.Tape() as tape:
            tape.backward(dc.sum((p - 1.0) * (p - 1.0)))
        opt.step()
    np.testing.assert_allclose(p.data, [1.0, 1.0], atol=1e-3)
