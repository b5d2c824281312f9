"""Finite-difference verification suite over every parameterized block and
the loss stack; the `gradcheck` CLI command and the acceptance tests both
run this.

Blocks are instantiated in float64 at small shapes; analytic gradients must
match central finite differences (step 1e-5) within relative error 1e-4.
"""

from __future__ import annotations

import numpy as np

from .anchors import assign_labels, build_grid
from .config import LossConfig, ModelConfig
from .losses import total_loss
from .model import ConvHead, QueryLocalizer
from .nn import (CrossAttentionBlock, DownsampleStack, PatchEncoder,
                 SelfAttentionBlock, check_gradients, mask_to_bias,
                 scalar_readout, windowed_temporal_mask)
from .nn.gradcheck import GradCheckResult


def _check_block(name, block, forward_fn, inputs, rng, max_elements=None):
    out, _ = forward_fn(*inputs)
    readout = scalar_readout(rng, out.shape)

    def loss():
        y, _ = forward_fn(*inputs)
        return float((y * readout).sum())

    block.zero_grad()
    _, cache = forward_fn(*inputs)
    din = block.backward(readout, cache)
    if not isinstance(din, tuple):
        din = (din,)
    named = [(f"{name}.{n}", p.value, p.grad) for n, p in block.named_parameters()]
    named += [(f"{name}.input{i}", x, g) for i, (x, g) in enumerate(zip(inputs, din))]
    return check_gradients(loss, named, max_elements=max_elements, rng=rng)


def _check_losses(name, rng):
    cfg_by_mode = [LossConfig(mode=m) for m in ("bce_hnm", "bce", "focal")]
    grid = build_grid(2, 2, 8.0, (8.0,), (1.0,))
    gt = np.array([5.0, 5.0, 7.0, 7.0])
    labels = [[assign_labels(grid, gt, 0.2), assign_labels(grid, None, 0.2)]]
    probs = [rng.uniform(0.1, 0.9, (2, 4))]
    deltas = [rng.uniform(-0.6, 0.6, (2, 4, 4))]
    results = []
    for cfg in cfg_by_mode:
        def loss(cfg=cfg):
            r, _ = total_loss(probs, deltas, labels, grid, image_side=16.0,
                              cfg=cfg)
            return r.total

        _, grads = total_loss(probs, deltas, labels, grid, image_side=16.0,
                              cfg=cfg)
        named = [(f"{name}.{cfg.mode}.probs", probs[0], grads[0][0]),
                 (f"{name}.{cfg.mode}.deltas", deltas[0], grads[0][1])]
        results.extend(check_gradients(loss, named))
    return results


def _check_full_model(name, rng):
    cfg = ModelConfig(input_side=16, clip_len=3, channels=8, patch_stride=8,
                      encoder_blocks=1, n_heads=2, ffn_mult=2, spatial_layers=1,
                      temporal_layers=1, window_half=1, downsample_strides=[1],
                      downsample_channels=8, head_width=8, head_blocks=2,
                      anchor_base_sizes=[6, 10], anchor_aspect_ratios=[1.0])
    model = QueryLocalizer(cfg, rng).to_dtype(np.float64)
    model.attn_bias = model.attn_bias.astype(np.float64)
    for head in (model.prob_head, model.reg_head):
        head.convs[-1].weight.value[...] = \
            rng.standard_normal(head.convs[-1].weight.shape) * 0.1
    clip = rng.uniform(0, 1, (3, 16, 16, 3))
    query = rng.uniform(0, 1, (16, 16, 3))
    probs, deltas, _ = model.forward(clip, query)
    rp = scalar_readout(rng, probs.shape)
    rd = scalar_readout(rng, deltas.shape)

    def loss():
        p, d, _ = model.forward(clip, query)
        return float((p * rp).sum() + (d * rd).sum())

    model.zero_grad()
    _, _, cache = model.forward(clip, query)
    model.backward(rp, rd, cache)
    named = [(f"{name}.{n}", p.value, p.grad) for n, p in model.named_parameters()]
    return check_gradients(loss, named, max_elements=6, rng=rng)


def run_gradient_suite(base_seed: int = 0, n_seeds: int = 5) -> list[GradCheckResult]:
    """Every parameterized stage at ``n_seeds`` seeds; returns flat results."""
    results: list[GradCheckResult] = []
    for k in range(n_seeds):
        rng = np.random.default_rng(base_seed + 1000 * k)
        tag = f"seed{base_seed + 1000 * k}"

        enc = PatchEncoder(channels=4, patch=4, n_blocks=1, rng=rng,
                           dtype=np.float64)
        results += _check_block(f"{tag}.encoder", enc, enc.forward,
                                (rng.uniform(0, 1, (2, 8, 8, 3)),), rng)

        spatial = CrossAttentionBlock(8, 2, 2, rng, dtype=np.float64)
        results += _check_block(
            f"{tag}.spatial_tx", spatial, spatial.forward,
            (rng.standard_normal((2, 4, 8)), rng.standard_normal((1, 4, 8))), rng)

        temporal = SelfAttentionBlock(8, 2, 2, rng, dtype=np.float64)
        bias = mask_to_bias(windowed_temporal_mask(3, 2, 1), np.float64)
        results += _check_block(
            f"{tag}.temporal_tx", temporal,
            lambda x: temporal.forward(x, bias),
            (rng.standard_normal((1, 6, 8)),), rng)

        down = DownsampleStack(4, 4, [2], rng, dtype=np.float64)
        results += _check_block(f"{tag}.downsample", down, down.forward,
                                (rng.standard_normal((2, 4, 4, 4)),), rng)

        prob_head = ConvHead(4, 4, 2, 2, rng, dtype=np.float64,
                             zero_init_final=False)
        results += _check_block(f"{tag}.prob_head", prob_head, prob_head.forward,
                                (rng.standard_normal((2, 2, 2, 4)),), rng)

        reg_head = ConvHead(4, 4, 2, 8, rng, dtype=np.float64,
                            zero_init_final=False)
        results += _check_block(f"{tag}.reg_head", reg_head, reg_head.forward,
                                (rng.standard_normal((2, 2, 2, 4)),), rng)

        results += _check_losses(f"{tag}.losses", rng)
        results += _check_full_model(f"{tag}.full_model", rng)
    return results
