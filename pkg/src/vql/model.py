"""The end-to-end localization model.

Pipeline per clip: shared image encoder -> per-frame cross-attention to the
query tokens -> shared downsampling convs -> add 3-D positional embedding,
flatten -> windowed temporal self-attention layers -> per-frame convolution
heads emitting anchor occurrence probabilities (sigmoid) and additive box
refinements.

The primary entry points are batched over independent (clip, query) pairs:
per-frame stages fold the pair axis into the frame batch, and the temporal
stage runs one attention call over (pairs, tokens, channels). ``forward`` is
pure and returns a cache; ``backward`` consumes gradients w.r.t. the head
outputs and accumulates parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorGrid, build_grid
from .config import ModelConfig
from .errors import ShapeError
from .nn import (CrossAttentionBlock, DownsampleStack, Module, PatchEncoder,
                 PositionalEmbedding3D, SelfAttentionBlock, mask_to_bias,
                 windowed_temporal_mask)
from .nn.modules import Conv2d, GELU


@dataclass
class FramePredictionRaw:
    """Raw head outputs for one frame: per-anchor probabilities (N,) and
    pixel-space refinements (N, 4)."""

    probs: np.ndarray
    deltas: np.ndarray


class ConvHead(Module):
    """Stack of 3x3 same-padding convolution blocks mapping the per-frame
    feature map to per-cell outputs; weights are shared across frames via
    batching. The final layer starts at zero so heads begin neutral."""

    def __init__(self, c_in: int, width: int, n_blocks: int, c_out: int, rng,
                 dtype=np.float32, zero_init_final: bool = True):
        chans = [c_in] + [width] * (n_blocks - 1) + [c_out]
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, 1, 1, rng, dtype)
                      for i in range(n_blocks)]
        self.acts = [GELU() for _ in range(n_blocks - 1)]
        if zero_init_final:
            self.convs[-1].zero_init()

    def forward(self, x: np.ndarray):
        caches = []
        for i, conv in enumerate(self.convs):
            x, cc = conv.forward(x)
            ca = None
            if i < len(self.acts):
                x, ca = self.acts[i].forward(x)
            caches.append((cc, ca))
        return x, caches

    def backward(self, dy: np.ndarray, caches):
        for i in reversed(range(len(self.convs))):
            cc, ca = caches[i]
            if ca is not None:
                dy = self.acts[i].backward(dy, ca)
            dy = self.convs[i].backward(dy, cc)
        return dy


class QueryLocalizer(Module):
    """Composed model: (clip, query image) -> per-frame anchor scores and
    refinements."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        cfg.validate()
        self.encoder = PatchEncoder(cfg.channels, cfg.patch_stride,
                                    cfg.encoder_blocks, rng, dtype)
        self.spatial = [CrossAttentionBlock(cfg.channels, cfg.n_heads,
                                            cfg.ffn_mult, rng, dtype)
                        for _ in range(cfg.spatial_layers)]
        self.downsample = DownsampleStack(cfg.channels, cfg.downsample_channels,
                                          list(cfg.downsample_strides), rng, dtype)
        self.pos_embed = PositionalEmbedding3D(cfg.clip_len, cfg.down_side,
                                               cfg.down_side, cfg.downsample_channels,
                                               dtype, cfg.pos_embed_learnable)
        self.temporal = [SelfAttentionBlock(cfg.downsample_channels, cfg.n_heads,
                                            cfg.ffn_mult, rng, dtype)
                         for _ in range(cfg.temporal_layers)]
        n = cfg.anchors_per_cell
        self.prob_head = ConvHead(cfg.downsample_channels, cfg.head_width,
                                  cfg.head_blocks, n, rng, dtype)
        self.reg_head = ConvHead(cfg.downsample_channels, cfg.head_width,
                                 cfg.head_blocks, 4 * n, rng, dtype)
        self.cfg = cfg
        self.grid: AnchorGrid = build_grid(cfg.down_side, cfg.down_side,
                                           cfg.anchor_stride,
                                           cfg.anchor_base_sizes,
                                           cfg.anchor_aspect_ratios)
        hw = cfg.down_side * cfg.down_side
        if cfg.global_window:
            self.attn_bias = np.zeros((cfg.clip_len * hw, cfg.clip_len * hw),
                                      dtype=dtype)
        else:
            self.attn_bias = mask_to_bias(
                windowed_temporal_mask(cfg.clip_len, hw, cfg.window_half), dtype)

    # -- stages --------------------------------------------------------------

    def spatial_features(self, clips: np.ndarray, queries: np.ndarray):
        """Encoder plus per-frame cross-attention to the matching query.

        clips (V, T, S, S, 3), queries (V, S, S, 3) -> (V*T, H, W, C).
        Purely per-frame: permuting frames permutes the output identically.
        """
        cfg = self.cfg
        if clips.ndim != 5 or clips.shape[1] != cfg.clip_len:
            raise ShapeError(f"clips must be (V, {cfg.clip_len}, S, S, 3), "
                             f"got {clips.shape}")
        v, t = clips.shape[0], clips.shape[1]
        flat = clips.reshape(v * t, *clips.shape[2:])
        f_frames, c_enc_f = self.encoder.forward(flat)
        f_query, c_enc_q = self.encoder.forward(queries)
        return self.spatial_features_from_encoded(f_frames, f_query, v, t,
                                                  (c_enc_f, c_enc_q))

    def spatial_features_from_encoded(self, f_frames: np.ndarray,
                                      f_query: np.ndarray, v: int, t: int,
                                      enc_caches=None):
        _, h, w, c = f_frames.shape
        frames_tokens = f_frames.reshape(v * t, h * w, c)
        # every frame of a pair attends to that pair's query tokens
        kv = np.repeat(f_query.reshape(v, h * w, c), t, axis=0)
        sp_caches = []
        for blk in self.spatial:
            frames_tokens, cb = blk.forward(frames_tokens, kv)
            sp_caches.append(cb)
        fmap = frames_tokens.reshape(v * t, h, w, c)
        return fmap, (enc_caches, sp_caches, (v, t, h, w, c))

    def heads_from_correspondence(self, v_star: np.ndarray):
        """Prediction heads over query-video correspondence features:
        probabilities via sigmoid, refinements raw.

        v_star (B, h, w, c) -> probs (B, N), deltas (B, N, 4).
        """
        b = v_star.shape[0]
        logits_map, c_prob = self.prob_head.forward(v_star)
        # clip keeps float32 exp finite; sigmoid is saturated far earlier
        z = np.clip(logits_map.reshape(b, -1), -40.0, 40.0)
        probs = 1.0 / (1.0 + np.exp(-z))
        reg_map, c_reg = self.reg_head.forward(v_star)
        deltas = reg_map.reshape(b, -1, 4)
        return probs, deltas, (c_prob, c_reg, probs, logits_map.shape, reg_map.shape)

    # -- full passes -----------------------------------------------------------

    def forward(self, clip: np.ndarray, query: np.ndarray):
        """Single pair: returns (probs (T, N), deltas (T, N, 4), cache)."""
        probs, deltas, cache = self.forward_batch(clip[None], query[None])
        return probs[0], deltas[0], cache

    def forward_batch(self, clips: np.ndarray, queries: np.ndarray):
        """Batched pairs: (V, T, S, S, 3) + (V, S, S, 3) ->
        probs (V, T, N), deltas (V, T, N, 4), cache."""
        fmap, c_spatial = self.spatial_features(clips, queries)
        return self._forward_tail(fmap, c_spatial)

    def forward_from_features(self, frame_feats: np.ndarray, query_feat: np.ndarray):
        """Run from precomputed encoder features, bypassing the image
        encoder: frame_feats (T, H, W, C), query_feat (H, W, C)."""
        cfg = self.cfg
        expected = (cfg.clip_len, cfg.feature_side, cfg.feature_side, cfg.channels)
        if tuple(frame_feats.shape) != expected:
            raise ShapeError(f"frame features {frame_feats.shape} != expected {expected}")
        if tuple(query_feat.shape) != expected[1:]:
            raise ShapeError(f"query features {query_feat.shape} != expected {expected[1:]}")
        dtype = self.pos_embed.values.value.dtype
        fmap, c_spatial = self.spatial_features_from_encoded(
            frame_feats.astype(dtype, copy=False),
            query_feat[None].astype(dtype, copy=False), 1, cfg.clip_len)
        probs, deltas, cache = self._forward_tail(fmap, c_spatial)
        return probs[0], deltas[0], cache

    def _forward_tail(self, fmap: np.ndarray, c_spatial):
        v, t = c_spatial[2][0], c_spatial[2][1]
        hs = self.cfg.down_side
        fd, c_down = self.downsample.forward(fmap)
        c = fd.shape[-1]
        fd, _ = self.pos_embed.forward(fd.reshape(v, t, hs, hs, c))
        tokens = fd.reshape(v, t * hs * hs, c)
        tm_caches = []
        for blk in self.temporal:
            tokens, cb = blk.forward(tokens, self.attn_bias)
            tm_caches.append(cb)
        v_star = tokens.reshape(v * t, hs, hs, c)
        probs, deltas, c_heads = self.heads_from_correspondence(v_star)
        n = self.cfg.n_anchors
        cache = (c_spatial, c_down, tm_caches, c_heads, (v, t, hs, c))
        return probs.reshape(v, t, n), deltas.reshape(v, t, n, 4), cache

    def backward(self, dprobs: np.ndarray, ddeltas: np.ndarray, cache) -> None:
        """Accumulate parameter gradients from head-output gradients; accepts
        (T, N)/(V, T, N) shapes matching the forward that built the cache."""
        c_spatial, c_down, tm_caches, c_heads, (v, t, hs, c) = cache
        c_prob, c_reg, probs, logits_shape, reg_shape = c_heads
        dprobs = dprobs.reshape(probs.shape)
        dlogits = (dprobs * probs * (1.0 - probs)).reshape(logits_shape)
        dv_star = self.prob_head.backward(dlogits, c_prob)
        dv_star += self.reg_head.backward(ddeltas.reshape(reg_shape), c_reg)
        dtokens = dv_star.reshape(v, t * hs * hs, c)
        for blk, cb in zip(reversed(self.temporal), reversed(tm_caches)):
            dtokens = blk.backward(dtokens, cb)
        dfd = dtokens.reshape(v, t, hs, hs, c)
        self.pos_embed.backward(dfd, None)
        dfmap = self.downsample.backward(dfd.reshape(v * t, hs, hs, c), c_down)
        enc_caches, sp_caches, (v, t, h, w, ch) = c_spatial
        dframes_tokens = dfmap.reshape(v * t, h * w, ch)
        dkv = np.zeros((v * t, h * w, ch), dtype=dframes_tokens.dtype)
        for blk, cb in zip(reversed(self.spatial), reversed(sp_caches)):
            dframes_tokens, dq = blk.backward(dframes_tokens, cb)
            dkv += dq
        if enc_caches is not None:
            c_enc_f, c_enc_q = enc_caches
            self.encoder.backward(dframes_tokens.reshape(v * t, h, w, ch), c_enc_f)
            dquery = dkv.reshape(v, t, h * w, ch).sum(axis=1)
            self.encoder.backward(dquery.reshape(v, h, w, ch), c_enc_q)


def per_frame_raw(probs: np.ndarray, deltas: np.ndarray) -> list[FramePredictionRaw]:
    """Split stacked (T, N) / (T, N, 4) head outputs into per-frame records."""
    return [FramePredictionRaw(probs=probs[t], deltas=deltas[t])
            for t in range(probs.shape[0])]
