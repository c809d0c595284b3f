"""Finite-difference verification of every trainable block.

Each check builds a small randomly-initialized layer in f64 mode, wires a
scalar readout with fixed random coefficients, and compares backward()
against central differences.  The full-stage check composes group-feature
assembly, the adaptive update, kernel interaction, and both prediction
branches end to end.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .head import (
    SIGMOID, AdaptiveKernelUpdate, KernelMlp, KernelInteraction, KernelUpdateStage,
    PlainKernelUpdate,
)
from .layers import Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention
from .model import BackboneLite, ModelConfig
from .tensor import Tensor

FULL_STAGE_TOLERANCE = 1e-4
LAYER_TOLERANCE = 1e-5


def _readout(rng, shape):
    coef = Tensor(rng.standard_normal(shape))
    return lambda out: T.reduce_sum(T.mul(out, coef))


def _check_linear(rng):
    layer = Linear(5, 4, rng)
    read = _readout(rng, (2, 3, 4))
    x = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
    return T.grad_check(lambda t: read(layer(t)), x)


def _check_layer_norm(rng):
    layer = LayerNorm(6)
    read = _readout(rng, (3, 6))
    x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    return T.grad_check(lambda t: read(layer(t)), x)


def _check_attention(rng):
    layer = MultiHeadAttention(8, 2, rng)
    read = _readout(rng, (1, 3, 8))
    x = Tensor(rng.standard_normal((1, 3, 8)), requires_grad=True)
    return T.grad_check(lambda t: read(layer(t, t, t)), x)


def _check_feed_forward(rng):
    layer = FeedForward(6, rng)
    read = _readout(rng, (2, 6))
    x = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    return T.grad_check(lambda t: read(layer(t)), x)


def _check_conv(rng):
    layer = Conv2d(2, 3, 3, rng, stride=2, padding=1)
    read = _readout(rng, (1, 3, 3, 3))
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    return T.grad_check(lambda t: read(layer(t)), x)


def _check_adaptive_update(rng):
    layer = AdaptiveKernelUpdate(6, rng)
    read = _readout(rng, (1, 2, 6))
    gf = Tensor(rng.standard_normal((1, 2, 6)), requires_grad=True)
    kk = Tensor(rng.standard_normal((1, 2, 6)))
    err = T.grad_check(lambda t: read(layer(t, kk)), gf)
    kk2 = Tensor(rng.standard_normal((1, 2, 6)), requires_grad=True)
    gf2 = Tensor(rng.standard_normal((1, 2, 6)))
    return max(err, T.grad_check(lambda t: read(layer(gf2, t)), kk2))


def _check_plain_update(rng):
    layer = PlainKernelUpdate(6, rng)
    read = _readout(rng, (1, 2, 6))
    gf = Tensor(rng.standard_normal((1, 2, 6)), requires_grad=True)
    kk = Tensor(rng.standard_normal((1, 2, 6)))
    return T.grad_check(lambda t: read(layer(t, kk)), gf)


def _check_kernel_interaction(rng):
    layer = KernelInteraction(8, 2, rng)
    read = _readout(rng, (1, 3, 8))
    x = Tensor(rng.standard_normal((1, 3, 8)), requires_grad=True)
    return T.grad_check(lambda t: read(layer(t)), x)


def _check_mask_branch(rng):
    layer = KernelMlp(8, 8, rng)
    read = _readout(rng, (1, 2, 8))
    x = Tensor(rng.standard_normal((1, 2, 8)), requires_grad=True)
    return T.grad_check(lambda t: read(layer(t)), x)


def _check_class_branch(rng):
    layer = KernelMlp(8, 3, rng)
    read = _readout(rng, (1, 2, 3))
    x = Tensor(rng.standard_normal((1, 2, 8)), requires_grad=True)
    return T.grad_check(lambda t: read(layer(t)), x)


def _check_backbone(rng):
    cfg = ModelConfig(mode="instance", image_size=8, channels=8,
                      num_instance_kernels=2, stages=1, heads=2)
    bb = BackboneLite(cfg, rng)
    ra = _readout(rng, (1, 8, 2, 2))
    rb = _readout(rng, (1, 8, 2, 2))
    x = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)

    def loss(t):
        fa, fb = bb(t)
        return ra(fa) + rb(fb)

    return T.grad_check(loss, x)


def _check_full_stage(rng):
    stage = KernelUpdateStage(8, 2, rng, heads=2)
    read_m = _readout(rng, (1, 2, 3, 3))
    read_k = _readout(rng, (1, 2, 8))
    read_c = _readout(rng, (1, 2, 2))
    m_prev = Tensor(rng.standard_normal((1, 2, 3, 3)))
    k_prev = Tensor(rng.standard_normal((1, 2, 8)))
    feats = Tensor(rng.standard_normal((1, 8, 3, 3)), requires_grad=True)

    def loss(t):
        out = stage(m_prev, k_prev, t, SIGMOID)
        return read_m(out.mask_logits) + read_k(out.kernels) + read_c(out.class_logits)

    err = T.grad_check(loss, feats)

    k_prev2 = Tensor(rng.standard_normal((1, 2, 8)), requires_grad=True)
    feats2 = Tensor(rng.standard_normal((1, 8, 3, 3)))

    def loss_k(t):
        out = stage(m_prev, t, feats2, SIGMOID)
        return read_m(out.mask_logits) + read_k(out.kernels) + read_c(out.class_logits)

    return max(err, T.grad_check(loss_k, k_prev2))


CHECKS = {
    "linear": (_check_linear, LAYER_TOLERANCE),
    "layer_norm": (_check_layer_norm, LAYER_TOLERANCE),
    "multi_head_attention": (_check_attention, LAYER_TOLERANCE),
    "feed_forward": (_check_feed_forward, LAYER_TOLERANCE),
    "conv2d": (_check_conv, LAYER_TOLERANCE),
    "backbone": (_check_backbone, LAYER_TOLERANCE),
    "adaptive_kernel_update": (_check_adaptive_update, LAYER_TOLERANCE),
    "plain_kernel_update": (_check_plain_update, LAYER_TOLERANCE),
    "kernel_interaction": (_check_kernel_interaction, LAYER_TOLERANCE),
    "mask_branch": (_check_mask_branch, LAYER_TOLERANCE),
    "class_branch": (_check_class_branch, LAYER_TOLERANCE),
    "full_stage": (_check_full_stage, FULL_STAGE_TOLERANCE),
}


def gradient_suite(seeds: int = 10) -> dict[str, tuple[float, float]]:
    """Run every check over ``seeds`` seeds; returns name -> (max err, tol)."""
    results = {}
    with T.precision("f64"):
        for name, (fn, tol) in CHECKS.items():
            worst = 0.0
            for seed in range(seeds):
                rng = np.random.default_rng(seed)
                worst = max(worst, fn(rng))
            results[name] = (worst, tol)
    return results
