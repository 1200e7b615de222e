import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normref import tensor as T
from normref.errors import DataError, NumericError
from normref.loss import (
    LossConfig,
    l1_sine,
    l2_z,
    l3_weights,
    l4_sign_bce,
    l5_contrastive,
    network_losses,
    sign_targets,
    total,
    weight_targets,
)
from normref.net import RefineNet, prepare_batch
from normref.tensor import Tensor, finite_diff_check

from conftest import random_rotation, toy_config

Z = np.array([0.0, 0.0, 1.0])


def unit(rng, *shape):
    v = rng.normal(size=shape + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_l1_values():
    assert l1_sine(Z, Z).item() == 0.0
    assert l1_sine(Z, -Z).item() == 0.0
    assert l1_sine(Z, [1.0, 0, 0]).item() == 1.0
    thirty = [0.5, 0.0, math.sqrt(3) / 2]
    assert l1_sine(Z, thirty).item() == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(DataError):
        l1_sine(Z, [0, 0, 2.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_l1_range_and_sign_blindness(seed):
    rng = np.random.default_rng(seed)
    a, b = unit(rng, 5), unit(rng, 5)
    v = l1_sine(a, b).item()
    assert 0 <= v <= 1
    assert l1_sine(a, -b).item() == pytest.approx(v, abs=1e-15)


def test_l2_values_and_gradient():
    assert l2_z(Z, np.eye(3)).item() == 0.0
    assert l2_z([1.0, 0, 0], np.eye(3)).item() == 1.0
    rng = np.random.default_rng(0)
    R = Tensor(np.stack([random_rotation(rng) for _ in range(3)]), requires_grad=True)
    gt = unit(rng, 3)
    assert finite_diff_check(lambda: l2_z(gt, R), [R]).passed


def test_l3_plane_and_oracle():
    pts = np.c_[np.random.default_rng(1).normal(size=(20, 2)), np.zeros(20)]
    target, delta = weight_targets(pts, Z)
    assert np.array_equal(target, np.ones((1, 20)))
    assert delta[0] == pytest.approx(0.0025, rel=1e-15)
    assert l3_weights(pts, Z, np.ones(20)).item() == 0.0

    rng = np.random.default_rng(2)
    pts = rng.normal(scale=0.1, size=(2, 15, 3))
    n = unit(rng, 2)
    w_hat = rng.random((2, 15))
    total_sq = 0.0
    for b in range(2):
        d2 = [sum(p[k] * n[b][k] for k in range(3)) ** 2 for p in pts[b]]
        delta = max(0.05 ** 2, 0.3 * sum(d2) / 15)
        for i in range(15):
            total_sq += (w_hat[b, i] - math.exp(-d2[i] / delta ** 2)) ** 2
    assert abs(l3_weights(pts, n, w_hat).item() - total_sq / 30) < 1e-12
    with pytest.raises(DataError):
        l3_weights(np.zeros((1, 0, 3)), Z, np.zeros((1, 0)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 10))
def test_l3_target_range(seed, scale):
    rng = np.random.default_rng(seed)
    target, delta = weight_targets(rng.normal(scale=scale, size=(3, 10, 3)), unit(rng, 3))
    assert np.all(delta >= 0.05 ** 2)
    assert np.all((target >= 0) & (target <= 1))


def test_l4_values():
    half = l4_sign_bce([0.0], [0.0], [1.0], [1.0]).item()
    assert half == pytest.approx(2 * math.log(2), abs=1e-12)
    assert l4_sign_bce([0.0], [0.0], [1.0], [-1.0]).item() == pytest.approx(2 * math.log(2), abs=1e-12)
    floor = l4_sign_bce([50.0], [-50.0], [1.0], [1.0]).item()
    assert floor == pytest.approx(-2 * math.log(1 - 1e-7), rel=1e-6)
    assert l4_sign_bce([50.0], None, [-1.0], [-1.0]).item() == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)


def test_l5_values():
    assert l5_contrastive([0.3], [0.3]).item() == 1.0
    assert l5_contrastive([50.0], [-50.0]).item() == pytest.approx(math.exp(-1), abs=1e-12)


def test_sign_losses_gradients():
    rng = np.random.default_rng(3)
    sp = Tensor(rng.normal(size=6), requires_grad=True)
    sm = Tensor(rng.normal(size=6), requires_grad=True)
    mst, gt = rng.choice([-1.0, 1.0], size=(2, 6))
    assert finite_diff_check(lambda: l4_sign_bce(sp, sm, mst, gt), [sp, sm]).passed
    assert finite_diff_check(lambda: l5_contrastive(sp, sm), [sp, sm]).passed
    nh = Tensor(unit(rng, 4), requires_grad=True)
    gt_n = unit(rng, 4)
    assert finite_diff_check(lambda: l1_sine(gt_n, T.normalize(nh)), [nh]).passed


def test_total_weights_and_toggles():
    ones = {k: Tensor(1.0) for k in ("l1", "l2", "l3", "l4", "l5")}
    assert total(ones, LossConfig()).item() == pytest.approx(1.8, abs=1e-15)
    assert total({k: Tensor(0.0) for k in ones}, LossConfig()).item() == 0.0
    parts = {k: Tensor(v) for k, v in zip(ones, [0.3, 0.2, 0.7, 1.1, 0.9])}
    on = total(parts, LossConfig()).item()
    off = total(parts, LossConfig(use_l5=False)).item()
    assert on - off == pytest.approx(0.1 * 0.9, abs=1e-15)
    parts["l4"] = Tensor(float("nan"))
    with pytest.raises(NumericError, match="l4"):
        total(parts, LossConfig())
    with pytest.raises(DataError):
        LossConfig(weights=(1, 1, 1, 1, -1))


def test_sign_targets_ties_positive():
    assert np.array_equal(sign_targets([[1.0, 0, 0], [0, 0, 1.0]], [[0, 1.0, 0], [0, 0, -1.0]]), [1.0, -1.0])


def toy_forward(seed=0, **cfg_kw):
    cfg = toy_config(**cfg_kw)
    rng = np.random.default_rng(seed)
    model = RefineNet(cfg)
    batch = prepare_batch(cfg, rng.normal(size=(2, 32, 3)) * [1, 1, 0.1], rng.normal(size=(2, 32, 3)),
                          unit(rng, 2))
    return model, batch, unit(rng, 2), unit(rng, 2)


def test_composite_gradient_is_weighted_sum():
    model, batch, clean, stale = toy_forward()
    cfg = LossConfig()
    model.zero_grad()
    value, _ = network_losses(model.forward(batch), clean, stale, cfg)
    value.backward()
    combined = {k: p.grad.copy() for k, p in model.params.items() if p.grad is not None}
    summed = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    for i, name in enumerate(("l1", "l2", "l3", "l4", "l5")):
        model.zero_grad()
        _, parts = network_losses(model.forward(batch), clean, stale, cfg)
        (parts[name] * cfg.weights[i]).backward()
        for k, p in model.params.items():
            if p.grad is not None:
                summed[k] += p.grad
    for k, g in combined.items():
        assert np.abs(g - summed[k]).max() < 1e-12


def test_cnd_gt_toggle_noise_free():
    model, batch, clean, _ = toy_forward(1)
    out = model.forward(batch)
    a, pa = network_losses(out, clean, clean, LossConfig(use_cnd_gt=True))
    b, pb = network_losses(out, clean, clean, LossConfig(use_cnd_gt=False))
    assert a.item() == b.item()


def test_feature_augmentation_off_drops_terms():
    model, batch, clean, stale = toy_forward(2, dual_sign_head=False)
    out = model.forward(batch)
    _, parts = network_losses(out, clean, stale, LossConfig(), feature_augmentation=False)
    assert parts["l5"] is None and out.s_minus is None


def test_network_loss_gradient():
    model, batch, clean, stale = toy_forward(4)
    params = [model.params[k] for k in ("head.W", "sign.plus.out.W", "qstn.f2.b", "head.phi9.out.b")]
    res = finite_diff_check(lambda: network_losses(model.forward(batch), clean, stale, LossConfig())[0], params)
    assert res.passed, res
