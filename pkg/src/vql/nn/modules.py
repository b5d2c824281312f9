"""Neural building blocks with explicit forward caches and analytic backward.

Conventions
-----------
* Arrays are numpy, channels-last. Token tensors are ``(B, N, C)``; image
  tensors are ``(B, H, W, C)``.
* ``forward`` is pure: it returns ``(output, cache)`` and never mutates the
  module, so concurrent forwards may share parameters. ``backward`` consumes
  the cache, accumulates into ``Parameter.grad`` and returns the input
  gradient; backward (like the optimizer step) requires exclusive access.
* Modules are built in a target dtype: float32 for training, float64 for
  gradient-check mode.

Set the environment variable ``VQL_DEBUG_FINITE=1`` to assert that block
outputs stay finite.
"""

from __future__ import annotations

import math
import os

import numpy as np

from ..errors import ConfigurationError, ShapeError

_DEBUG_FINITE = os.environ.get("VQL_DEBUG_FINITE", "0") == "1"


def _assert_finite(name: str, arr: np.ndarray) -> None:
    if _DEBUG_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")


class Parameter:
    """A trainable array with an accumulated gradient."""

    __slots__ = ("value", "grad", "trainable")

    def __init__(self, value: np.ndarray, trainable: bool = True):
        self.value = value
        self.grad = np.zeros_like(value)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def add_grad(self, g: np.ndarray) -> None:
        if self.trainable:
            self.grad += g


class Module:
    """Base class providing deterministic named-parameter traversal."""

    def named_parameters(self, prefix: str = ""):
        """Yield (name, Parameter) in attribute insertion order."""
        for attr, value in self.__dict__.items():
            name = f"{prefix}{attr}" if prefix == "" else f"{prefix}.{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ShapeError(f"state dict mismatch: missing={sorted(missing)}, "
                             f"unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = state[name]
            if tuple(arr.shape) != tuple(p.value.shape):
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} "
                                 f"!= model shape {p.value.shape}")
            p.value = arr.astype(p.value.dtype)
            p.grad = np.zeros_like(p.value)

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


def _glorot_uniform(rng, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32):
        self.weight = Parameter(_glorot_uniform(rng, d_in, d_out, (d_in, d_out), dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))

    def forward(self, x: np.ndarray):
        y = x @ self.weight.value + self.bias.value
        return y, x

    def backward(self, dy: np.ndarray, cache):
        x = cache
        d_in, d_out = self.weight.shape
        self.weight.add_grad(x.reshape(-1, d_in).T @ dy.reshape(-1, d_out))
        self.bias.add_grad(dy.reshape(-1, d_out).sum(axis=0))
        return dy @ self.weight.value.T


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: np.ndarray):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        y = xhat * self.gamma.value + self.beta.value
        return y, (xhat, inv)

    def backward(self, dy: np.ndarray, cache):
        xhat, inv = cache
        dim = xhat.shape[-1]
        self.gamma.add_grad((dy * xhat).reshape(-1, dim).sum(axis=0))
        self.beta.add_grad(dy.reshape(-1, dim).sum(axis=0))
        dxhat = dy * self.gamma.value
        # dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)


_GELU_C = math.sqrt(2.0 / math.pi)


class GELU(Module):
    """tanh-approximation GELU; smooth, so finite differences stay clean."""

    def forward(self, x: np.ndarray):
        x2 = x * x
        t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
        y = 0.5 * x * (1.0 + t)
        return y, (x, x2, t)

    def backward(self, dy: np.ndarray, cache):
        x, x2, t = cache
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _masked_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis; -inf logits get exactly zero weight."""
    m = np.max(logits, axis=-1, keepdims=True)
    p = np.exp(logits - m)
    return p / p.sum(axis=-1, keepdims=True)


class MultiHeadAttention(Module):
    """Scaled dot-product attention; queries from ``x``, keys/values from ``kv``.

    ``kv`` may have batch 1 while ``x`` is batched (the key/value set is then
    shared across the batch, as when every frame attends to the same query
    tokens). An optional additive ``bias`` of shape (N, M) carries 0 at
    allowed positions and -inf at masked ones, so masked positions take
    exactly zero attention weight.
    """

    def __init__(self, dim: int, n_heads: int, rng, dtype=np.float32):
        if dim % n_heads != 0:
            raise ConfigurationError(f"head count {n_heads} must divide dim {dim}")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = Linear(dim, dim, rng, dtype)
        self.k_proj = Linear(dim, dim, rng, dtype)
        self.v_proj = Linear(dim, dim, rng, dtype)
        self.out_proj = Linear(dim, dim, rng, dtype)

    def _split(self, t: np.ndarray) -> np.ndarray:
        b, n, _ = t.shape
        return t.reshape(b, n, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, t: np.ndarray) -> np.ndarray:
        b, _, n, _ = t.shape
        return t.transpose(0, 2, 1, 3).reshape(b, n, self.dim)

    def forward(self, x: np.ndarray, kv: np.ndarray, bias: np.ndarray | None = None):
        if x.shape[-1] != self.dim or kv.shape[-1] != self.dim:
            raise ConfigurationError(
                f"channel mismatch: got {x.shape[-1]} / {kv.shape[-1]}, expected {self.dim}")
        q, cq = self.q_proj.forward(x)
        k, ck = self.k_proj.forward(kv)
        v, cv = self.v_proj.forward(kv)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scale = 1.0 / math.sqrt(self.head_dim)
        logits = (qh * scale) @ kh.transpose(0, 1, 3, 2)  # (B, H, N, M)
        if bias is not None:
            logits = logits + bias
        attn = _masked_softmax(logits)
        ctx = attn @ vh  # (B, H, N, head_dim)
        out, co = self.out_proj.forward(self._merge(ctx))
        _assert_finite("attention", out)
        cache = (cq, ck, cv, co, qh, kh, vh, attn, kv.shape[0])
        return out, cache

    def backward(self, dy: np.ndarray, cache):
        cq, ck, cv, co, qh, kh, vh, attn, kv_batch = cache
        scale = 1.0 / math.sqrt(self.head_dim)
        dctx = self._split(self.out_proj.backward(dy, co))
        dattn = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ dctx
        # softmax backward; masked entries have attn == 0, hence zero gradient
        dlogits = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dqh = (dlogits @ kh) * scale
        dkh = (dlogits.transpose(0, 1, 3, 2) @ qh) * scale
        if kv_batch == 1 and dkh.shape[0] != 1:
            dkh = dkh.sum(axis=0, keepdims=True)
            dvh = dvh.sum(axis=0, keepdims=True)
        dx = self.q_proj.backward(self._merge(dqh), cq)
        dkv = self.k_proj.backward(self._merge(dkh), ck)
        dkv += self.v_proj.backward(self._merge(dvh), cv)
        return dx, dkv


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.act = GELU()
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def forward(self, x: np.ndarray):
        h, c1 = self.fc1.forward(x)
        a, ca = self.act.forward(h)
        y, c2 = self.fc2.forward(a)
        return y, (c1, ca, c2)

    def backward(self, dy: np.ndarray, cache):
        c1, ca, c2 = cache
        da = self.fc2.backward(dy, c2)
        dh = self.act.backward(da, ca)
        return self.fc1.backward(dh, c1)


class CrossAttentionBlock(Module):
    """Pre-norm residual block: tokens attend to a separate key/value set,
    then pass through a feed-forward sub-block. Token count and arrangement
    of ``x`` are preserved."""

    def __init__(self, dim: int, n_heads: int, ffn_mult: int, rng, dtype=np.float32):
        self.ln_q = LayerNorm(dim, dtype)
        self.ln_kv = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, n_heads, rng, dtype)
        self.ln_f = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_mult * dim, rng, dtype)

    def forward(self, x: np.ndarray, kv: np.ndarray):
        a, c_lnq = self.ln_q.forward(x)
        b, c_lnkv = self.ln_kv.forward(kv)
        h, c_attn = self.attn.forward(a, b)
        x1 = x + h
        f_in, c_lnf = self.ln_f.forward(x1)
        f, c_ffn = self.ffn.forward(f_in)
        out = x1 + f
        _assert_finite("cross_attention_block", out)
        return out, (c_lnq, c_lnkv, c_attn, c_lnf, c_ffn)

    def backward(self, dy: np.ndarray, cache):
        c_lnq, c_lnkv, c_attn, c_lnf, c_ffn = cache
        df = self.ffn.backward(dy, c_ffn)
        dx1 = dy + self.ln_f.backward(df, c_lnf)
        da, db = self.attn.backward(dx1, c_attn)
        dx = dx1 + self.ln_q.backward(da, c_lnq)
        dkv = self.ln_kv.backward(db, c_lnkv)
        return dx, dkv


class SelfAttentionBlock(Module):
    """Pre-norm residual self-attention block with an optional additive mask
    bias (0 allowed / -inf masked)."""

    def __init__(self, dim: int, n_heads: int, ffn_mult: int, rng, dtype=np.float32):
        self.ln_a = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, n_heads, rng, dtype)
        self.ln_f = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_mult * dim, rng, dtype)

    def forward(self, x: np.ndarray, bias: np.ndarray | None = None):
        a, c_ln = self.ln_a.forward(x)
        h, c_attn = self.attn.forward(a, a, bias)
        x1 = x + h
        f_in, c_lnf = self.ln_f.forward(x1)
        f, c_ffn = self.ffn.forward(f_in)
        out = x1 + f
        _assert_finite("self_attention_block", out)
        return out, (c_ln, c_attn, c_lnf, c_ffn)

    def backward(self, dy: np.ndarray, cache):
        c_ln, c_attn, c_lnf, c_ffn = cache
        df = self.ffn.backward(dy, c_ffn)
        dx1 = dy + self.ln_f.backward(df, c_lnf)
        da, dkv = self.attn.backward(dx1, c_attn)
        dx = dx1 + self.ln_a.backward(da + dkv, c_ln)
        return dx


class Conv2d(Module):
    """2-D convolution over channels-last images, implemented as one matmul
    per kernel offset."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: int = 0, rng=None, dtype=np.float32):
        fan_in = kernel * kernel * c_in
        if rng is None:
            weight = np.zeros((kernel, kernel, c_in, c_out), dtype=dtype)
        else:
            weight = _glorot_uniform(rng, fan_in, c_out,
                                     (kernel, kernel, c_in, c_out), dtype)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def out_size(self, size: int) -> int:
        span = size + 2 * self.padding - self.kernel
        if span < 0:
            raise ShapeError(f"conv: input size {size} smaller than kernel "
                             f"{self.kernel} with padding {self.padding}")
        return span // self.stride + 1

    def zero_init(self) -> None:
        self.weight.value[...] = 0
        self.bias.value[...] = 0

    @property
    def _is_patchify(self) -> bool:
        return self.kernel == self.stride and self.padding == 0

    def forward(self, x: np.ndarray):
        b, h, w, c_in = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        oh, ow = self.out_size(h), self.out_size(w)
        c_out = self.bias.shape[0]
        if self._is_patchify:
            # non-overlapping patches: one reshape + one GEMM
            patches = x.reshape(b, oh, k, ow, k, c_in).transpose(0, 1, 3, 2, 4, 5)
            flat = patches.reshape(b * oh * ow, k * k * c_in)
            y = flat @ self.weight.value.reshape(k * k * c_in, c_out)
            y += self.bias.value
            y = y.reshape(b, oh, ow, c_out)
            _assert_finite("conv2d", y)
            return y, (flat, (b, h, w, oh, ow))
        if p > 0:
            xp = np.zeros((b, h + 2 * p, w + 2 * p, c_in), dtype=x.dtype)
            xp[:, p:p + h, p:p + w, :] = x
        else:
            xp = x
        y = np.tile(self.bias.value, (b, oh, ow, 1))
        yf = y.reshape(-1, c_out)
        for di in range(k):
            for dj in range(k):
                xs = xp[:, di:di + s * oh:s, dj:dj + s * ow:s, :]
                yf += xs.reshape(-1, c_in) @ self.weight.value[di, dj]
        _assert_finite("conv2d", y)
        return y, (xp, (b, h, w, oh, ow))

    def backward(self, dy: np.ndarray, cache):
        cached, (b, h, w, oh, ow) = cache
        k, s, p = self.kernel, self.stride, self.padding
        c_in = self.weight.shape[2]
        c_out = self.weight.shape[3]
        dyf = dy.reshape(-1, c_out)
        self.bias.add_grad(dyf.sum(axis=0))
        if self._is_patchify:
            flat = cached
            self.weight.add_grad((flat.T @ dyf).reshape(self.weight.shape))
            dflat = dyf @ self.weight.value.reshape(k * k * c_in, c_out).T
            dx = dflat.reshape(b, oh, ow, k, k, c_in).transpose(0, 1, 3, 2, 4, 5)
            return dx.reshape(b, h, w, c_in)
        xp = cached
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(self.weight.value)
        for di in range(k):
            for dj in range(k):
                xs = xp[:, di:di + s * oh:s, dj:dj + s * ow:s, :]
                dw[di, dj] = xs.reshape(-1, c_in).T @ dyf
                dxp[:, di:di + s * oh:s, dj:dj + s * ow:s, :] += \
                    (dyf @ self.weight.value[di, dj].T).reshape(b, oh, ow, c_in)
        self.weight.add_grad(dw)
        if p > 0:
            return dxp[:, p:p + h, p:p + w, :]
        return dxp


class PatchEncoder(Module):
    """Shared convolutional image encoder for frames and the visual query:
    a non-overlapping patch convolution followed by 3x3 conv blocks.

    (B, S, S, 3) -> (B, S/patch, S/patch, channels); deterministic given the
    construction rng.
    """

    def __init__(self, channels: int, patch: int, n_blocks: int, rng,
                 dtype=np.float32, in_channels: int = 3):
        self.patch = Conv2d(in_channels, channels, kernel=patch, stride=patch,
                            padding=0, rng=rng, dtype=dtype)
        self.acts = [GELU() for _ in range(n_blocks + 1)]
        self.blocks = [Conv2d(channels, channels, 3, 1, 1, rng, dtype)
                       for _ in range(n_blocks)]

    def forward(self, x: np.ndarray):
        if x.shape[1] != x.shape[2]:
            raise ShapeError(f"encoder expects square images, got {x.shape}")
        if x.shape[1] % self.patch.stride != 0:
            raise ShapeError(f"side {x.shape[1]} not divisible by patch stride "
                             f"{self.patch.stride}")
        y, c0 = self.patch.forward(x)
        y, a0 = self.acts[0].forward(y)
        caches = [(c0, a0)]
        for blk, act in zip(self.blocks, self.acts[1:]):
            y, cb = blk.forward(y)
            y, ab = act.forward(y)
            caches.append((cb, ab))
        return y, caches

    def backward(self, dy: np.ndarray, caches):
        for blk, act, (cb, ab) in zip(reversed(self.blocks),
                                      reversed(self.acts[1:]),
                                      reversed(caches[1:])):
            dy = blk.backward(act.backward(dy, ab), cb)
        c0, a0 = caches[0]
        return self.patch.backward(self.acts[0].backward(dy, a0), c0)


class DownsampleStack(Module):
    """Shared 3x3 convolutions shrinking the per-frame resolution; an empty
    stride list is the identity."""

    def __init__(self, c_in: int, c_out: int, strides: list[int], rng,
                 dtype=np.float32):
        chans = [c_in] + [c_out] * len(strides)
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, strides[i], 1, rng, dtype)
                      for i in range(len(strides))]
        self.acts = [GELU() for _ in strides]
        self.stride_product = int(np.prod(strides)) if strides else 1

    def forward(self, x: np.ndarray):
        if x.shape[1] % self.stride_product or x.shape[2] % self.stride_product:
            raise ShapeError(f"feature size {x.shape[1]}x{x.shape[2]} not "
                             f"divisible by stride product {self.stride_product}")
        caches = []
        for conv, act in zip(self.convs, self.acts):
            x, cc = conv.forward(x)
            x, ca = act.forward(x)
            caches.append((cc, ca))
        return x, caches

    def backward(self, dy: np.ndarray, caches):
        for conv, act, (cc, ca) in zip(reversed(self.convs), reversed(self.acts),
                                       reversed(caches)):
            dy = conv.backward(act.backward(dy, ca), cc)
        return dy


class PositionalEmbedding3D(Module):
    """Learnable spatio-temporal positional embedding, initialized to zeros,
    shaped exactly like the downsampled feature volume (T, h, w, c)."""

    def __init__(self, t: int, h: int, w: int, c: int, dtype=np.float32,
                 learnable: bool = True):
        self.values = Parameter(np.zeros((t, h, w, c), dtype=dtype),
                                trainable=learnable)

    def forward(self, x: np.ndarray):
        if x.shape[-4:] != self.values.shape:
            raise ShapeError(f"positional embedding shape {self.values.shape} "
                             f"!= features {x.shape}")
        return x + self.values.value, None

    def backward(self, dy: np.ndarray, cache):
        g = dy
        while g.ndim > self.values.value.ndim:
            g = g.sum(axis=0)
        self.values.add_grad(g)
        return dy


def flatten_tokens(x: np.ndarray) -> np.ndarray:
    """(T, h, w, c) -> (1, T*h*w, c), row-major over (T, h, w)."""
    t, h, w, c = x.shape
    return x.reshape(1, t * h * w, c)


def unflatten_tokens(x: np.ndarray, t: int, h: int, w: int) -> np.ndarray:
    """Inverse of flatten_tokens."""
    _, n, c = x.shape
    if n != t * h * w:
        raise ShapeError(f"cannot unflatten {n} tokens to ({t},{h},{w})")
    return x.reshape(t, h, w, c)
