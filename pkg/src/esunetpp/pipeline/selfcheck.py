"""Finite-difference suite over every differentiable primitive and loss.

Shapes are small and random; inputs are kept away from kinks (ReLU at 0,
max-pool ties, |d| = β for Huber, clamp bounds) so that central differences
are meaningful.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from ..architectures import NetConfig, build, forward
from ..autodiff import (RunningStats, Tensor, absolute, batch_norm, clip, concat_channels, conv2d,
                        conv_transpose2d, exp, grad_check, log, max_pool2d, power, relu, sigmoid)
from ..losses import (LossSpec, cross_entropy, dice_loss, ds_loss, focal_loss, huber_elements, mse_loss,
                      seg_loss, smooth_l1, total_loss, weighted_dice_loss)


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(gap, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape):
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) + rng.uniform(0.1, 0.4, shape)) / n


def _probs(rng, shape):
    return rng.uniform(0.05, 0.95, shape)


def _mask(rng, shape):
    m = rng.random(shape) < 0.4
    m.flat[0] = True
    return m.astype(np.float64)


def _check_conv(rng):
    B, C, O = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    H = int(rng.integers(3, 6))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    x, w, b = _t(rng.standard_normal((B, C, H, H))), _t(rng.standard_normal((O, C, k, k))), _t(rng.standard_normal(O))
    return grad_check(lambda x, w, b: (conv2d(x, w, b, stride, k // 2) * 1.0).sum(), [x, w, b])


def _check_conv_t(rng):
    B, C, O = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    H = int(rng.integers(2, 4))
    x, w, b = _t(rng.standard_normal((B, C, H, H))), _t(rng.standard_normal((C, O, 4, 4))), _t(rng.standard_normal(O))
    r = rng.standard_normal((B, O, 2 * H, 2 * H))
    return grad_check(lambda x, w, b: (conv_transpose2d(x, w, b, 2, 1) * r).sum(), [x, w, b])


def _check_pool(rng):
    x = _t(_distinct(rng, (2, 2, 4, 4)))
    r = rng.standard_normal((2, 2, 2, 2))
    return grad_check(lambda x: (max_pool2d(x) * r).sum(), [x])


def _check_bn(rng, training):
    C = int(rng.integers(1, 4))
    x = _t(rng.standard_normal((2, C, 3, 3)))
    s, b = _t(rng.uniform(0.5, 1.5, C)), _t(rng.standard_normal(C))
    st = RunningStats(rng.standard_normal(C) * 0.1, rng.uniform(0.5, 1.5, C))
    r = rng.standard_normal((2, C, 3, 3))
    return grad_check(lambda x, s, b: (batch_norm(x, s, b, st, training) * r).sum(), [x, s, b])


def _check_elementwise(rng) -> Dict[str, float]:
    shape = (2, 3)
    r = rng.standard_normal(shape)
    out = {}
    out["relu"] = grad_check(lambda x: (relu(x) * r).sum(), [_t(_away_from_zero(rng, shape))])
    out["sigmoid"] = grad_check(lambda x: (sigmoid(x) * r).sum(), [_t(rng.standard_normal(shape) * 3)])
    out["exp/log"] = grad_check(lambda x: (log(exp(x) + 1.0) * r).sum(), [_t(rng.standard_normal(shape))])
    out["power"] = grad_check(lambda x: (power(x, 2.5) * r).sum(), [_t(rng.uniform(0.2, 2.0, shape))])
    out["absolute"] = grad_check(lambda x: (absolute(x) * r).sum(), [_t(_away_from_zero(rng, shape))])
    out["clip"] = grad_check(lambda x: (clip(x, -0.5, 0.5) * r).sum(),
                             [_t(rng.choice([-1.0, 1.0], shape) * rng.choice([0.2, 0.8], shape)
                                 + rng.uniform(-0.05, 0.05, shape))])
    a, b = _t(rng.standard_normal((2, 1, 3))), _t(rng.uniform(0.5, 2.0, (1, 4, 3)))
    out["add/mul/div broadcast"] = grad_check(lambda a, b: ((a + b) * a / b - b).mean(), [a, b])
    x1, x2 = _t(rng.standard_normal((1, 2, 2, 2))), _t(rng.standard_normal((1, 3, 2, 2)))
    rc = rng.standard_normal((1, 5, 2, 2))
    out["concat_channels"] = grad_check(lambda a, b: (concat_channels([a, b]) * rc).sum(), [x1, x2])
    return out


def _check_losses(rng) -> Dict[str, float]:
    shape = (2, 1, 4, 4)
    g = _mask(rng, shape)
    w = rng.uniform(0.0, 1.0, shape)
    out = {}
    out["dice_loss"] = grad_check(lambda p: dice_loss(g, p), [_t(_probs(rng, shape))])
    out["weighted_dice_loss"] = grad_check(lambda p: weighted_dice_loss(g, p, w), [_t(_probs(rng, shape))])
    out["cross_entropy"] = grad_check(lambda p: cross_entropy(g, p), [_t(_probs(rng, shape))])
    out["focal_loss"] = grad_check(lambda p: focal_loss(g, p, 2.0), [_t(_probs(rng, shape))])
    spec_l, spec_t = LossSpec.liver(), LossSpec.tumor()
    out["seg_loss (liver)"] = grad_check(lambda p: seg_loss(g, p, spec_l, w), [_t(_probs(rng, shape))])
    out["seg_loss (tumor)"] = grad_check(lambda p: seg_loss(g, p, spec_t), [_t(_probs(rng, shape))])
    heads = [_t(_probs(rng, shape)) for _ in range(4)]
    out["ds_loss"] = grad_check(lambda *h: ds_loss(dict(enumerate(h, 1)), g, spec_t, "DS", 4), heads)

    d = rng.choice([-1.0, 1.0], (2, 3)) * np.where(rng.random((2, 3)) < 0.5,
                                                   rng.uniform(0.05, 0.9, (2, 3)), rng.uniform(1.1, 3.0, (2, 3)))
    y = rng.standard_normal((2, 3))
    out["huber"] = grad_check(lambda x: huber_elements(x, y, 1.0).sum(), [_t(y + d)])
    xs = {1: _t(y + d), 2: _t(rng.standard_normal((3,)) + 5.0)}
    ys = {1: y, 2: rng.standard_normal((3,)) + 5.0}
    out["smooth_l1"] = grad_check(lambda a, b: smooth_l1({1: a, 2: b}, ys, [1, 2]), [xs[1], xs[2]])
    out["mse_loss"] = grad_check(lambda x: mse_loss(x, y), [_t(rng.standard_normal((2, 3)))])
    feats = {i: rng.standard_normal((2, 2, 4 >> i, 4 >> i)) * 0.3 for i in (1, 2)}

    def tot(p1, p2, f1, f2):
        t, _, _ = total_loss({1: p1, 2: p2}, g, {1: f1, 2: f2}, feats, spec_l, "DS", "ES", 2, w)
        return t

    args = [_t(_probs(rng, shape)), _t(_probs(rng, shape)),
            _t(feats[1] + rng.uniform(-0.5, 0.5, feats[1].shape)), _t(feats[2] + rng.uniform(-0.5, 0.5, feats[2].shape))]
    out["total_loss (ES)"] = grad_check(tot, args)
    return out


def _check_network(rng) -> float:
    """Gradient of a DS loss through a whole tiny UNet++ (double precision)."""
    cfg = NetConfig(variant="unetpp", depth=1, base_channels=2, input_size=2, dtype="float64",
                    seed=int(rng.integers(1 << 30)))
    g = build(cfg)
    x = rng.standard_normal((2, 1, 2, 2))
    gt = _mask(rng, (2, 1, 2, 2))
    params = g.parameters()
    spec = LossSpec(dice_weight=1.0, ce_weight=1.0)

    def f(*_):
        return ds_loss(forward(g, Tensor(x), training=True).heads, gt, spec, "DS", 1)
    return grad_check(f, params)


def gradient_suite(repetitions: int = 20, seed: int = 0, network: bool = True) -> List[Tuple[str, float]]:
    """Worst relative error per check over ``repetitions`` random draws."""
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    checks: List[Tuple[str, Callable]] = [
        ("conv2d", _check_conv),
        ("conv_transpose2d", _check_conv_t),
        ("max_pool2d", _check_pool),
        ("batch_norm (train)", lambda r: _check_bn(r, True)),
        ("batch_norm (eval)", lambda r: _check_bn(r, False)),
    ]
    for _ in range(repetitions):
        for name, fn in checks:
            note(name, fn(rng))
        for name, err in _check_elementwise(rng).items():
            note(name, err)
        for name, err in _check_losses(rng).items():
            note(name, err)
    if network:
        for _ in range(max(1, repetitions // 10)):
            note("unetpp ds_loss", _check_network(rng))
    return sorted(worst.items())
