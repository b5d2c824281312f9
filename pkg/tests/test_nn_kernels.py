import numpy as np
import pytest

from vql.errors import ConfigurationError, ShapeError
from vql.nn import (Conv2d, CrossAttentionBlock, DownsampleStack, GELU,
                    LayerNorm, Linear, MultiHeadAttention, PatchEncoder,
                    PositionalEmbedding3D, SelfAttentionBlock, check_gradients,
                    flatten_tokens, load_checkpoint, mask_to_bias,
                    save_checkpoint, scalar_readout, unflatten_tokens,
                    validate_mask, windowed_temporal_mask)

STEP = 1e-5
RTOL = 1e-4


def run_block_gradcheck(block, forward_fn, inputs, rng, max_elements=None):
    """FD-check every parameter of ``block`` plus every input array.

    forward_fn(*inputs) must return the block output; the scalar loss is a
    fixed random projection of that output.
    """
    out, _ = forward_fn(*inputs)
    readout = scalar_readout(rng, out.shape)

    def loss():
        y, _ = forward_fn(*inputs)
        return float((y * readout).sum())

    block.zero_grad()
    out, cache = forward_fn(*inputs)
    din = block.backward(readout, cache)
    if not isinstance(din, tuple):
        din = (din,)

    named = [(n, p.value, p.grad) for n, p in block.named_parameters()]
    named += [(f"input{i}", x, g) for i, (x, g) in enumerate(zip(inputs, din))]
    results = check_gradients(loss, named, step=STEP, rtol=RTOL,
                              max_elements=max_elements, rng=rng)
    for r in results:
        assert r.passed, str(r)


class TestLinearAndNorm:
    def test_linear_gradcheck(self):
        rng = np.random.default_rng(0)
        lin = Linear(5, 7, rng, dtype=np.float64)
        x = rng.standard_normal((3, 4, 5))
        run_block_gradcheck(lin, lin.forward, (x,), rng)

    def test_layernorm_gradcheck(self):
        rng = np.random.default_rng(1)
        ln = LayerNorm(6, dtype=np.float64)
        ln.gamma.value = rng.standard_normal(6)
        ln.beta.value = rng.standard_normal(6)
        x = rng.standard_normal((4, 6)) * 2.0
        run_block_gradcheck(ln, ln.forward, (x,), rng)

    def test_gelu_gradcheck(self):
        rng = np.random.default_rng(2)
        act = GELU()
        x = rng.standard_normal((5, 5))
        run_block_gradcheck(act, act.forward, (x,), rng)


class TestAttention:
    def test_cross_attention_output_shape(self):
        rng = np.random.default_rng(3)
        blk = CrossAttentionBlock(32, n_heads=2, ffn_mult=4, rng=rng)
        frames = rng.standard_normal((1, 16, 32)).astype(np.float32)
        query = rng.standard_normal((1, 16, 32)).astype(np.float32)
        out, _ = blk.forward(frames, query)
        assert out.shape == (1, 16, 32)

    def test_identical_query_tokens_give_uniform_attention(self):
        # all kv tokens equal -> every attention row is uniform, so the
        # attended value is identical for every destination token
        rng = np.random.default_rng(4)
        mha = MultiHeadAttention(8, 2, rng, dtype=np.float64)
        x = rng.standard_normal((1, 5, 8))
        kv = np.tile(rng.standard_normal((1, 1, 8)), (1, 6, 1))
        out, cache = mha.forward(x, kv)
        attn = cache[7]
        np.testing.assert_allclose(attn, 1.0 / 6.0, atol=1e-12)
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :1, :], out.shape),
                                   atol=1e-12)

    def test_softmax_rows_sum_to_one_under_mask(self):
        rng = np.random.default_rng(5)
        mha = MultiHeadAttention(8, 2, rng, dtype=np.float64)
        mask = windowed_temporal_mask(6, 1, 1)
        x = rng.standard_normal((1, 6, 8))
        _, cache = mha.forward(x, x, mask_to_bias(mask, np.float64))
        attn = cache[7]
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(attn[:, :, ~mask] == 0.0)

    def test_cross_attention_gradcheck(self):
        rng = np.random.default_rng(6)
        blk = CrossAttentionBlock(8, n_heads=2, ffn_mult=2, rng=rng, dtype=np.float64)
        frames = rng.standard_normal((2, 4, 8))
        query = rng.standard_normal((1, 3, 8))
        run_block_gradcheck(blk, blk.forward, (frames, query), rng)

    def test_windowed_self_attention_gradcheck(self):
        rng = np.random.default_rng(7)
        blk = SelfAttentionBlock(8, n_heads=2, ffn_mult=2, rng=rng, dtype=np.float64)
        bias = mask_to_bias(windowed_temporal_mask(3, 2, 1), np.float64)
        x = rng.standard_normal((1, 6, 8))
        run_block_gradcheck(blk, lambda t: blk.forward(t, bias), (x,), rng)

    def test_global_mask_equals_unmasked(self):
        rng = np.random.default_rng(8)
        blk = SelfAttentionBlock(8, n_heads=2, ffn_mult=2, rng=rng, dtype=np.float64)
        x = rng.standard_normal((1, 6, 8))
        bias = np.zeros((6, 6))
        out_masked, _ = blk.forward(x, bias)
        out_plain, _ = blk.forward(x, None)
        np.testing.assert_array_equal(out_masked, out_plain)

    def test_head_count_must_divide(self):
        rng = np.random.default_rng(9)
        with pytest.raises(ConfigurationError):
            MultiHeadAttention(10, 3, rng)

    def test_channel_mismatch_raises(self):
        rng = np.random.default_rng(10)
        mha = MultiHeadAttention(8, 2, rng)
        with pytest.raises(ConfigurationError):
            mha.forward(rng.standard_normal((1, 4, 6)), rng.standard_normal((1, 4, 8)))

    def test_batch_permutation_equivariance(self):
        rng = np.random.default_rng(11)
        blk = CrossAttentionBlock(8, 2, 2, rng, dtype=np.float64)
        frames = rng.standard_normal((5, 4, 8))
        kv = rng.standard_normal((1, 4, 8))
        out, _ = blk.forward(frames, kv)
        perm = np.array([3, 1, 4, 0, 2])
        out_perm, _ = blk.forward(frames[perm], kv)
        np.testing.assert_array_equal(out_perm, out[perm])


class TestWindowMask:
    def test_window_example(self):
        # T=5, half-width 2: frame 0 reaches {0,1,2}, frame 2 reaches all
        mask = windowed_temporal_mask(5, 1, 2)
        np.testing.assert_array_equal(mask[0], [True, True, True, False, False])
        np.testing.assert_array_equal(mask[2], [True] * 5)
        assert mask.shape == (5, 5)

    def test_all_masked_row_rejected(self):
        mask = np.ones((3, 3), dtype=bool)
        mask[1] = False
        with pytest.raises(ConfigurationError):
            validate_mask(mask)

    def test_single_layer_locality(self):
        # perturbing frame t changes outputs only at |t' - t| <= w, exactly
        rng = np.random.default_rng(12)
        t_frames, hw, w = 7, 2, 1
        blk = SelfAttentionBlock(8, 2, 2, rng, dtype=np.float64)
        bias = mask_to_bias(windowed_temporal_mask(t_frames, hw, w), np.float64)
        x = rng.standard_normal((1, t_frames * hw, 8))
        base, _ = blk.forward(x, bias)
        t = 4
        x2 = x.copy()
        x2[0, t * hw:(t + 1) * hw, :] += rng.standard_normal((hw, 8))
        out, _ = blk.forward(x2, bias)
        diff = (out - base).reshape(t_frames, hw, 8)
        changed = np.abs(diff).max(axis=(1, 2)) > 0
        for tp in range(t_frames):
            if abs(tp - t) <= w:
                assert changed[tp]
            else:
                assert not changed[tp], f"leak to frame {tp}"


class TestConv:
    def test_stride2_stack_shape(self):
        # two stride-2 layers: (30, 32, 32, C) -> (30, 8, 8, C)
        rng = np.random.default_rng(13)
        stack = DownsampleStack(16, 16, [2, 2], rng)
        x = rng.standard_normal((30, 32, 32, 16)).astype(np.float32)
        y, _ = stack.forward(x)
        assert y.shape == (30, 8, 8, 16)

    def test_identity_kernel_passthrough(self):
        conv = Conv2d(4, 4, kernel=1, stride=1, padding=0)
        conv.weight.value[0, 0] = np.eye(4, dtype=np.float32)
        x = np.random.default_rng(14).standard_normal((2, 5, 5, 4)).astype(np.float32)
        y, _ = conv.forward(x)
        np.testing.assert_allclose(y, x, atol=1e-6)

    def test_indivisible_raises(self):
        rng = np.random.default_rng(15)
        stack = DownsampleStack(4, 4, [2, 2], rng)
        with pytest.raises(ShapeError):
            stack.forward(rng.standard_normal((1, 10, 10, 4)).astype(np.float32))

    def test_conv_gradcheck(self):
        rng = np.random.default_rng(16)
        conv = Conv2d(3, 4, kernel=3, stride=2, padding=1, rng=rng, dtype=np.float64)
        x = rng.standard_normal((2, 6, 6, 3))
        run_block_gradcheck(conv, conv.forward, (x,), rng)

    def test_downsample_gradcheck(self):
        rng = np.random.default_rng(17)
        stack = DownsampleStack(3, 4, [2], rng, dtype=np.float64)
        x = rng.standard_normal((2, 4, 4, 3))
        run_block_gradcheck(stack, stack.forward, (x,), rng)


class TestEncoder:
    def test_full_scale_shape(self):
        rng = np.random.default_rng(18)
        enc = PatchEncoder(channels=256, patch=14, n_blocks=1, rng=rng)
        x = rng.standard_normal((1, 448, 448, 3)).astype(np.float32)
        y, _ = enc.forward(x)
        assert y.shape == (1, 32, 32, 256)

    def test_toy_shape(self):
        rng = np.random.default_rng(19)
        enc = PatchEncoder(channels=64, patch=8, n_blocks=1, rng=rng)
        x = rng.standard_normal((2, 64, 64, 3)).astype(np.float32)
        y, _ = enc.forward(x)
        assert y.shape == (2, 8, 8, 64)

    def test_determinism(self):
        x = np.random.default_rng(20).standard_normal((1, 16, 16, 3)).astype(np.float32)
        outs = []
        for _ in range(2):
            enc = PatchEncoder(channels=8, patch=8, n_blocks=1,
                               rng=np.random.default_rng(99))
            y, _ = enc.forward(x)
            outs.append(y)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_indivisible_side_raises(self):
        rng = np.random.default_rng(21)
        enc = PatchEncoder(channels=8, patch=8, n_blocks=0, rng=rng)
        with pytest.raises(ShapeError):
            enc.forward(rng.standard_normal((1, 20, 20, 3)).astype(np.float32))

    def test_encoder_gradcheck(self):
        rng = np.random.default_rng(22)
        enc = PatchEncoder(channels=4, patch=4, n_blocks=1, rng=rng, dtype=np.float64)
        x = rng.standard_normal((1, 8, 8, 3))
        run_block_gradcheck(enc, enc.forward, (x,), rng)


class TestPositionalAndFlatten:
    def test_zero_embedding_is_pure_reshape(self):
        rng = np.random.default_rng(23)
        pe = PositionalEmbedding3D(2, 3, 3, 4)
        x = rng.standard_normal((2, 3, 3, 4)).astype(np.float32)
        y, _ = pe.forward(x)
        np.testing.assert_array_equal(flatten_tokens(y), x.reshape(1, 18, 4))

    def test_flatten_token_order(self):
        x = np.arange(8, dtype=np.float32).reshape(2, 1, 1, 4)
        tokens = flatten_tokens(x)
        np.testing.assert_array_equal(tokens[0, 0], [0, 1, 2, 3])
        np.testing.assert_array_equal(tokens[0, 1], [4, 5, 6, 7])

    def test_round_trip(self):
        rng = np.random.default_rng(24)
        x = rng.standard_normal((3, 2, 2, 5))
        np.testing.assert_array_equal(unflatten_tokens(flatten_tokens(x), 3, 2, 2), x)

    def test_shape_mismatch_raises(self):
        pe = PositionalEmbedding3D(2, 2, 2, 4)
        with pytest.raises(ShapeError):
            pe.forward(np.zeros((2, 3, 2, 4), dtype=np.float32))

    def test_embedding_gradcheck(self):
        rng = np.random.default_rng(25)
        pe = PositionalEmbedding3D(2, 2, 2, 3, dtype=np.float64)
        pe.values.value = rng.standard_normal((2, 2, 2, 3))
        x = rng.standard_normal((2, 2, 2, 3))
        run_block_gradcheck(pe, pe.forward, (x,), rng)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(26)
        blk = CrossAttentionBlock(8, 2, 2, rng)
        state = blk.state_dict()
        save_checkpoint(tmp_path / "ckpt", state)
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert set(loaded) == set(state)
        for name in state:
            np.testing.assert_array_equal(loaded[name],
                                          state[name].astype(np.float32))

    def test_load_rejects_shape_mismatch(self, tmp_path):
        rng = np.random.default_rng(27)
        blk = Linear(4, 4, rng)
        save_checkpoint(tmp_path / "ckpt", blk.state_dict())
        other = Linear(4, 5, rng)
        with pytest.raises(ShapeError):
            other.load_state_dict(load_checkpoint(tmp_path / "ckpt"))

    def test_manifest_offsets_are_bytes(self, tmp_path):
        import json
        rng = np.random.default_rng(28)
        blk = Linear(3, 2, rng)
        save_checkpoint(tmp_path / "ckpt", blk.state_dict())
        manifest = json.loads((tmp_path / "ckpt" / "checkpoint.json").read_text())
        sizes = {"weight": 6 * 4, "bias": 2 * 4}
        offsets = {k: v["offset"] for k, v in manifest["params"].items()}
        total = sum(sizes.values())
        assert (tmp_path / "ckpt" / "checkpoint.bin").stat().st_size == total
        assert sorted(offsets.values())[0] == 0
