"""Shifted-window Dconv attention and the transformer block built around it.

Channels are split in two groups after the Q/K/V projection.  One group runs
transposed (channel-by-channel) attention inside each window, the other runs
ordinary token-by-token attention with a relative position bias.  The two
results are concatenated and mixed by a pointwise projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .windowing import make_window_layout, relative_position_index, window_partition, window_reverse

# scores per no-grad attention chunk; bounds peak memory on large maps
_CHUNK_ELEMS = 1 << 23


def default_heads(channels: int) -> int:
    h = max(1, channels // 64)
    while channels % h:
        h -= 1
    return h


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    window_size: int = 16
    shift: int = 0
    heads_c: int | None = None
    heads_s: int | None = None
    ffn_expansion: float = 2.66
    channel_split: float = 0.5  # fraction of channels on the channel-attention path

    def __post_init__(self):
        if self.channels <= 0 or self.channels % 2:
            raise ValueError(f"channels must be positive and even, got {self.channels}")
        if not 0.0 <= self.channel_split <= 1.0:
            raise ValueError("channel_split must lie in [0, 1]")
        if not 0 <= self.shift < self.window_size:
            raise ValueError(f"shift {self.shift} outside [0, {self.window_size})")
        if self.c_chan and self.c_chan % self.n_heads_c:
            raise ValueError(f"{self.c_chan} channel-attention channels not divisible by {self.n_heads_c} heads")
        if self.c_spat and self.c_spat % self.n_heads_s:
            raise ValueError(f"{self.c_spat} spatial-attention channels not divisible by {self.n_heads_s} heads")

    @property
    def c_chan(self) -> int:
        return int(round(self.channels * self.channel_split))

    @property
    def c_spat(self) -> int:
        return self.channels - self.c_chan

    @property
    def n_heads_c(self) -> int:
        return self.heads_c if self.heads_c is not None else default_heads(self.c_chan or 1)

    @property
    def n_heads_s(self) -> int:
        return self.heads_s if self.heads_s is not None else default_heads(self.c_spat or 1)

    @property
    def hidden(self) -> int:
        return int(self.channels * self.ffn_expansion)


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) redrawn until every sample lies within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def fan_in_std(fan_in: int) -> float:
    return 0.02 * math.sqrt(2.0 / fan_in)


def block_param_shapes(cfg: BlockConfig) -> dict[str, tuple[int, ...]]:
    c, m = cfg.channels, cfg.window_size
    shapes = {
        "norm1.gamma": (c,),
        "norm1.beta": (c,),
        "qkv.weight": (c, 3 * c),
        "qkv_dw.weight": (3, 3, 3 * c),
    }
    if cfg.c_chan:
        shapes["temperature"] = (cfg.n_heads_c,)
    if cfg.c_spat:
        shapes["rel_bias"] = ((2 * m - 1) ** 2, cfg.n_heads_s)
    shapes.update({
        "proj.weight": (c, c),
        "norm2.gamma": (c,),
        "norm2.beta": (c,),
        "ffn.in.weight": (c, 2 * cfg.hidden),
        "ffn.out.weight": (cfg.hidden, c),
    })
    return shapes


def init_block_params(cfg: BlockConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, shape in block_param_shapes(cfg).items():
        if name.endswith("gamma") or name == "temperature":
            arr = np.ones(shape)
        elif name.endswith("beta"):
            arr = np.zeros(shape)
        elif name == "rel_bias":
            arr = trunc_normal(rng, shape, 0.02)
        elif name == "qkv_dw.weight":
            arr = trunc_normal(rng, shape, fan_in_std(9))
        else:
            arr = trunc_normal(rng, shape, fan_in_std(shape[0]))
        params[name] = Tensor(arr, name=name)
    return params


def make_qkv(y: Tensor, params: dict[str, Tensor], cfg: BlockConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Pointwise projection to 3C channels, then a bias-free depthwise 3x3 on the whole map."""
    if y.shape[-1] != cfg.channels:
        raise ValueError(f"expected {cfg.channels} channels, got {y.shape[-1]}")
    qkv = T.conv1x1(y, params["qkv.weight"])
    qkv = T.dwconv3x3(qkv, params["qkv_dw.weight"])
    c = cfg.channels
    q, k, v = T.split(qkv, [c, c, c], axis=-1)
    return q, k, v


def _heads(x: Tensor, heads: int) -> Tensor:
    # (nW, N, C) -> (nW, heads, N, d)
    nw, n, c = x.shape
    return T.transpose(T.reshape(x, (nw, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    nw, h, n, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (nw, n, h * d))


def channel_attention(q: Tensor, k: Tensor, v: Tensor, temperature: Tensor,
                      return_attn: bool = False):
    """Transposed attention inside each window.

    ``q, k, v``: ``(nW, N, C')`` token-major windows; heads are taken from
    ``temperature`` (one learnable scale per head).  Rows of Q and K (one row per
    channel, spanning the N tokens) are L2-normalized before the product, so the
    attention map is ``(C'/h) x (C'/h)`` per head.
    """
    heads = temperature.shape[0]
    qt = T.l2_normalize(T.transpose(_heads(q, heads), (0, 1, 3, 2)), axis=-1)
    kt = T.l2_normalize(T.transpose(_heads(k, heads), (0, 1, 3, 2)), axis=-1)
    vt = T.transpose(_heads(v, heads), (0, 1, 3, 2))
    scores = T.scale_axis(T.matmul(qt, T.transpose(kt, (0, 1, 3, 2))), temperature, axis=1)
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, vt)  # (nW, h, d, N)
    out = _merge_heads(T.transpose(out, (0, 1, 3, 2)))
    return (out, attn) if return_attn else out


def gather_bias(table: Tensor, window_size: int) -> Tensor:
    """``(2M-1)^2 x heads`` table -> ``(heads, M^2, M^2)`` bias by relative offset."""
    b = T.take(table, relative_position_index(window_size), axis=0)
    return T.transpose(b, (2, 0, 1))


def spatial_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor,
                      mask: np.ndarray | None = None, return_attn: bool = False):
    """``SoftMax(Q K^T / sqrt(d) + B)`` per head, masked pairs get weight 0.

    ``q, k, v``: ``(nW, N, C')``; ``bias``: ``(heads, N, N)``; ``mask``: ``(nW, N, N)``.
    """
    heads = bias.shape[0]
    qh, kh, vh = _heads(q, heads), _heads(k, heads), _heads(v, heads)
    d = qh.shape[-1]
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    scores = T.bias_add(scores, bias)
    attn = T.softmax(scores, axis=-1, mask=None if mask is None else mask[:, None])
    out = _merge_heads(T.matmul(attn, vh))
    return (out, attn) if return_attn else out


def _window_mask(layout, rows: np.ndarray) -> np.ndarray | None:
    if layout.labels is None:
        return None
    lab = layout.labels[rows % layout.n_windows]
    return lab[:, :, None] == lab[:, None, :]


def _groups(t: Tensor, cc: int, cs: int):
    if not cc:
        return None, t
    if not cs:
        return t, None
    return tuple(T.split(t, [cc, cs]))


def _attend(qw, kw, vw, params, cfg, layout, rows):
    (qc, qs), (kc, ks), (vc, vs) = (_groups(t, cfg.c_chan, cfg.c_spat) for t in (qw, kw, vw))
    parts = []
    if qc is not None:
        parts.append(channel_attention(qc, kc, vc, params["temperature"]))
    if qs is not None:
        bias = gather_bias(params["rel_bias"], cfg.window_size)
        parts.append(spatial_attention(qs, ks, vs, bias, _window_mask(layout, rows)))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)


def swda_attention(y: Tensor, params: dict[str, Tensor], cfg: BlockConfig) -> Tensor:
    """Attention branch on a layer-normalized ``(B, H, W, C)`` map."""
    b, h, w, c = y.shape
    layout = make_window_layout(h, w, cfg.window_size, cfg.shift)
    n = layout.tokens
    q, k, v = make_qkv(y, params, cfg)
    nw = b * layout.n_windows
    qw, kw, vw = (T.reshape(window_partition(t, layout), (nw, n, c)) for t in (q, k, v))

    per_window = n * n * max(cfg.n_heads_s if cfg.c_spat else 0, 1) + c * c
    chunk = max(1, _CHUNK_ELEMS // per_window)
    if T.is_grad_enabled() or nw <= chunk:
        out = _attend(qw, kw, vw, params, cfg, layout, np.arange(nw))
    else:
        pieces = []
        for s in range(0, nw, chunk):
            sl = slice(s, min(s + chunk, nw))
            pieces.append(_attend(Tensor(qw.data[sl]), Tensor(kw.data[sl]), Tensor(vw.data[sl]),
                                  params, cfg, layout, np.arange(sl.start, sl.stop)).data)
        out = Tensor(np.concatenate(pieces, axis=0))
    out = window_reverse(T.reshape(out, (b, layout.n_windows, n, c)), layout)
    return T.conv1x1(out, params["proj.weight"])


def feed_forward(y: Tensor, params: dict[str, Tensor], cfg: BlockConfig) -> Tensor:
    """Gated FFN: expand to two halves, GELU(one) * other, project back."""
    hid = cfg.hidden
    a, g = T.split(T.conv1x1(y, params["ffn.in.weight"]), [hid, hid], axis=-1)
    return T.conv1x1(T.mul(T.gelu(a), g), params["ffn.out.weight"])


def swda_block(x: Tensor, params: dict[str, Tensor], cfg: BlockConfig) -> Tensor:
    """``x + Attn(LN(x))`` then ``x + FFN(LN(x))`` on ``(B, H, W, C)`` or ``(H, W, C)``."""
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1, *x.shape))
    y = T.layernorm(x, params["norm1.gamma"], params["norm1.beta"])
    x = T.add(x, swda_attention(y, params, cfg))
    y = T.layernorm(x, params["norm2.gamma"], params["norm2.beta"])
    x = T.add(x, feed_forward(y, params, cfg))
    return T.reshape(x, x.shape[1:]) if squeeze else x
