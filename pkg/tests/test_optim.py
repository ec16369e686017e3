import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qat4.errors import DivergenceError
from qat4.layers import Param, QuantizedParam
from qat4.model import ModelConfig, build_vgg4bit
from qat4.optim import (LrSchedule, OptimConfig, QuantAwareAdamW, apply_tanh_clip,
                        clip_gradients_global, lr_at, train_step)
from qat4.tensor import global_l2_norm


def _param(values, grad=None, quantized=False, name="p"):
    cls = QuantizedParam if quantized else Param
    p = cls(name, np.array(values, dtype=np.float64))
    if grad is not None:
        p.grad[...] = grad
    return p


def test_clip_under_threshold_unchanged():
    p = _param([0.0, 0.0], grad=[0.18, 0.24])  # norm 0.3
    assert clip_gradients_global([p]) == pytest.approx(0.3)
    np.testing.assert_array_equal(p.grad, [0.18, 0.24])


def test_clip_scales_proportionally():
    p = _param([0.0, 0.0], grad=[3.0, 4.0])
    assert clip_gradients_global([p], 0.5) == 5.0
    np.testing.assert_allclose(p.grad, [0.3, 0.4])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=1, max_size=5), st.floats(1e-3, 1e4),
       st.integers(0, 2**31))
def test_clip_bound_property(sizes, scale, seed):
    rng = np.random.default_rng(seed)
    ps = [_param(np.zeros(n), grad=rng.standard_normal(n) * scale) for n in sizes]
    clip_gradients_global(ps, 0.5)
    assert global_l2_norm(p.grad for p in ps) <= 0.5 + 1e-6


def test_zero_grad_zero_decay_is_noop():
    p = _param([1.0, -2.0])
    opt = QuantAwareAdamW([p], OptimConfig(weight_decay=0.0, tanh_clip=False))
    opt.step(1e-2)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_first_step_is_signed_lr():
    p = _param([0.5, 0.5, 0.5], grad=[0.2, -0.1, 0.05])
    opt = QuantAwareAdamW([p], OptimConfig(weight_decay=0.0, grad_clip=False, tanh_clip=False))
    opt.step(1e-3)
    np.testing.assert_allclose(p.value - 0.5, [-1e-3, 1e-3, -1e-3], rtol=1e-4)


def test_decoupled_decay_only_on_flagged_params():
    w = _param([2.0], quantized=True)
    b = _param([2.0])
    opt = QuantAwareAdamW([w, b], OptimConfig(weight_decay=0.1, grad_clip=False, tanh_clip=False))
    opt.step(0.5)
    assert w.value[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)
    assert b.value[0] == 2.0


def test_adamw_converges_on_quadratic():
    target = np.array([1.5, -0.7, 0.2])
    p = _param(np.zeros(3))
    opt = QuantAwareAdamW([p], OptimConfig(weight_decay=0.0, grad_clip=False, tanh_clip=False))
    for _ in range(100):
        p.grad[...] = 2 * (p.value - target)
        opt.step(0.1)
    assert np.max(np.abs(p.value - target)) < 1e-2


def test_tanh_clip_near_origin_and_large():
    small = _param([0.05, -0.09, 0.01], quantized=True)
    before = small.value.copy()
    apply_tanh_clip([small])
    assert np.all(np.abs(small.value - before) < 0.01 * np.abs(before))
    big = _param([10.0], quantized=True)
    apply_tanh_clip([big])
    assert big.value[0] == pytest.approx(3 * math.tanh(10 / 3))
    assert round(big.value[0], 2) == 2.99


def test_tanh_clip_skips_unquantized():
    b = _param([10.0])
    apply_tanh_clip([b])
    assert b.value[0] == 10.0


def test_adversarial_steps_stay_bounded():
    rng = np.random.default_rng(0)
    w = QuantizedParam("w", rng.standard_normal((16, 16)).astype(np.float32))
    opt = QuantAwareAdamW([w], OptimConfig(lr=100.0))
    for _ in range(200):
        w.grad[...] = rng.standard_normal(w.grad.shape) * 1e6
        opt.step(100.0)
        assert np.max(np.abs(w.value)) < 3.0


def test_without_tanh_clip_masters_escape():
    rng = np.random.default_rng(0)
    w = QuantizedParam("w", rng.standard_normal(64).astype(np.float32))
    opt = QuantAwareAdamW([w], OptimConfig(tanh_clip=False))
    for _ in range(50):
        w.grad[...] = -np.sign(w.value) * 1e3
        opt.step(1.0)
    assert np.max(np.abs(w.value)) > 3.0


def test_schedule_shape():
    s = LrSchedule(base_lr=1e-2, t0=10, eta_min=1e-4)
    assert lr_at(s, 0) == pytest.approx(1e-2)
    assert lr_at(s, 10) == pytest.approx(1e-2)  # restart
    assert lr_at(s, 5) == pytest.approx((1e-2 + 1e-4) / 2)
    assert lr_at(s, 9, 999_999, 1_000_000) == pytest.approx(1e-4, abs=1e-9)
    # continuous inside a cycle, jump at the restart
    assert abs(lr_at(s, 4, 99, 100) - lr_at(s, 5)) < 1e-4
    assert lr_at(s, 10) - lr_at(s, 9, 99, 100) > 0.9e-2


def test_schedule_t_mult_and_no_restart():
    s = LrSchedule(base_lr=1.0, t0=2, t_mult=2, eta_min=0.0)
    assert lr_at(s, 2) == pytest.approx(1.0)   # second cycle begins
    assert lr_at(s, 4) == pytest.approx(0.5)   # midpoint of the 4-epoch cycle
    assert lr_at(s, 6) == pytest.approx(1.0)   # third cycle
    flat = LrSchedule(base_lr=1.0, eta_min=0.1, restarts=False, total_epochs=10)
    lrs = [lr_at(flat, e, k, 4) for e in range(12) for k in range(4)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == pytest.approx(0.1)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 500), st.floats(1, 50), st.sampled_from([1, 2, 3]))
def test_schedule_bounds(t, t0, t_mult):
    s = LrSchedule(base_lr=0.1, t0=t0, t_mult=t_mult, eta_min=1e-3)
    assert 1e-3 - 1e-12 <= lr_at(s, t) <= 0.1 + 1e-12


@pytest.fixture(scope="module")
def tiny_batch():
    rng = np.random.default_rng(5)
    return (rng.standard_normal((8, 3, 32, 32)).astype(np.float32), rng.integers(0, 10, 8))


def test_train_step_deterministic(tiny_batch):
    x, y = tiny_batch
    net = build_vgg4bit(ModelConfig(10), seed=1)
    opt = QuantAwareAdamW(net.params())
    net2, opt2 = copy.deepcopy(net), copy.deepcopy(opt)
    opt2.params = net2.params()
    r1 = train_step(net, x, y, opt, 1e-3, step=7)
    r2 = train_step(net2, x, y, opt2, 1e-3, step=7)
    assert r1 == r2
    for a, b in zip(net.params(), net2.params()):
        assert a.value.tobytes() == b.value.tobytes()


def test_train_step_report_and_bounds(tiny_batch):
    x, y = tiny_batch
    net = build_vgg4bit(ModelConfig(10), seed=2)
    opt = QuantAwareAdamW(net.params())
    r = train_step(net, x, y, opt, 1e-3)
    assert not r.nan and np.isfinite(r.loss) and r.grad_norm > 0
    assert set(r.unique_levels) == {p.name for p in net.quantized_params()}
    assert all(1 <= c <= 15 for c in r.unique_levels.values())
    assert all(np.max(np.abs(p.value)) < 3 for p in net.quantized_params())


def test_divergence_on_injected_nan(tiny_batch):
    x, y = tiny_batch
    net = build_vgg4bit(ModelConfig(10), seed=3)
    opt = QuantAwareAdamW(net.params())
    bad = x.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError) as info:
        train_step(net, bad, y, opt, 1e-3, step=12)
    assert info.value.step == 12

    net.params()[0].value[0, 0, 0, 0] = np.inf
    with pytest.raises(DivergenceError):
        train_step(net, x, y, opt, 1e-3, step=13)


def test_memorizes_tiny_set():
    """64 fixed random images: loss < 0.1 within 50 full-batch steps."""
    rng = np.random.default_rng(9)
    x = rng.standard_normal((64, 3, 32, 32)).astype(np.float32)
    y = rng.integers(0, 10, 64)
    net = build_vgg4bit(ModelConfig(10), seed=9)
    opt = QuantAwareAdamW(net.params())
    losses = [train_step(net, x, y, opt, 1e-3, step=i).loss for i in range(50)]
    assert losses[-1] < 0.1
    assert losses[-1] < losses[0]
