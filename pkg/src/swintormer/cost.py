"""Analytic MAC and activation-memory estimates for tiled inference.

The estimate walks the same layer sequence as :func:`swintormer.unet.forward`
without touching any data.  Only multiply-accumulates are counted (pointwise and
depthwise convolutions, attention products); softmax, normalization, GELU and
elementwise ops are free.  Memory is the peak, over the fixed op order, of the
bytes held by tensors that are still needed (each tensor is freed after its last
consumer runs).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

from .model import ModelConfig
from .swda import BlockConfig
from .unet import UNetSpec, param_shapes
from .windowing import make_tile_grid, make_window_layout

PRECISION_BYTES = {16: 2, 32: 4, 64: 8}


def conv1x1_macs(h: int, w: int, cin: int, cout: int) -> int:
    return h * w * cin * cout


def dwconv3x3_macs(h: int, w: int, c: int) -> int:
    return 9 * h * w * c


@dataclass(frozen=True)
class CostReport:
    height: int
    width: int
    tile_height: int
    tile_width: int
    stride: int
    batch: int
    tiles: int
    macs_per_tile: int
    macs_total: int
    macs_per_iteration: int  # one batch of tiles
    peak_activation_bytes: int  # one batch of tiles
    params: int
    precision: int

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("image", f"{self.height}x{self.width}"),
            ("tile", f"{self.tile_height}x{self.tile_width} stride {self.stride}"),
            ("tiles", str(self.tiles)),
            ("batch", str(self.batch)),
            ("params", f"{self.params:,}"),
            ("MACs / tile", f"{self.macs_per_tile:,} ({self.macs_per_tile / 1e9:.3f} G)"),
            ("MACs / iteration", f"{self.macs_per_iteration:,} ({self.macs_per_iteration / 1e9:.3f} G)"),
            ("MACs total", f"{self.macs_total:,} ({self.macs_total / 1e9:.3f} G)"),
            ("peak activations", f"{self.peak_activation_bytes:,} B "
                                 f"({self.peak_activation_bytes / 2**20:.1f} MiB, {self.precision}-bit)"),
        ]

    def table(self) -> str:
        width = max(len(k) for k, _ in self.rows())
        lines = [f"{k:<{width}}  {v}" for k, v in self.rows()]
        lines.append("(MACs exclude softmax, normalization and elementwise ops)")
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        fields = list(asdict(self))
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerow(asdict(self))
        return buf.getvalue()


class _Trace:
    """Op list with output sizes; tracks MACs and liveness-based peak memory."""

    def __init__(self):
        self.sizes: list[int] = []
        self.inputs: list[tuple[int, ...]] = []
        self.macs = 0

    def op(self, elems: int, inputs=(), macs: int = 0) -> int:
        self.sizes.append(int(elems))
        self.inputs.append(tuple(inputs))
        self.macs += int(macs)
        return len(self.sizes) - 1

    def peak_elems(self) -> int:
        n = len(self.sizes)
        last = list(range(n))
        for i, ins in enumerate(self.inputs):
            for j in ins:
                last[j] = max(last[j], i)
        last[n - 1] = n  # the result outlives the graph
        # sweep: add at creation, drop after last use
        frees: dict[int, int] = {}
        for j, t in enumerate(last):
            frees[t] = frees.get(t, 0) + self.sizes[j]
        live = peak = 0
        for i in range(n):
            live += self.sizes[i]
            peak = max(peak, live)
            live -= frees.get(i, 0)
        return peak


def _block(tr: _Trace, x: int, b: int, h: int, w: int, cfg: BlockConfig) -> int:
    c, hw = cfg.channels, b * h * w
    layout = make_window_layout(h, w, cfg.window_size, cfg.shift)
    nw, n = b * layout.n_windows, layout.tokens
    y = tr.op(hw * c, [x])  # layernorm
    qkv = tr.op(hw * 3 * c, [y], conv1x1_macs(b * h, w, c, 3 * c))
    qkv = tr.op(hw * 3 * c, [qkv], dwconv3x3_macs(b * h, w, 3 * c))
    win = tr.op(nw * n * 3 * c, [qkv])  # window partition (padded)
    parts = []
    if cfg.c_chan:
        heads, d = cfg.n_heads_c, cfg.c_chan // cfg.n_heads_c
        s = tr.op(nw * heads * d * d, [win], nw * heads * d * d * n)
        a = tr.op(nw * heads * d * d, [s])
        parts.append(tr.op(nw * n * cfg.c_chan, [a, win], nw * heads * d * n * d))
    if cfg.c_spat:
        heads, d = cfg.n_heads_s, cfg.c_spat // cfg.n_heads_s
        s = tr.op(nw * heads * n * n, [win], nw * heads * n * n * d)
        a = tr.op(nw * heads * n * n, [s])
        parts.append(tr.op(nw * n * cfg.c_spat, [a, win], nw * heads * n * d * n))
    att = tr.op(nw * n * c, parts) if len(parts) > 1 else parts[0]
    att = tr.op(hw * c, [att])  # window reverse + crop
    att = tr.op(hw * c, [att], conv1x1_macs(b * h, w, c, c))
    x = tr.op(hw * c, [x, att])
    y = tr.op(hw * c, [x])
    hid = cfg.hidden
    f = tr.op(hw * 2 * hid, [y], conv1x1_macs(b * h, w, c, 2 * hid))
    f = tr.op(hw * hid, [f])  # GELU(a) * g
    f = tr.op(hw * c, [f], conv1x1_macs(b * h, w, hid, c))
    return tr.op(hw * c, [x, f])


def trace_forward(spec: UNetSpec, b: int, h: int, w: int) -> _Trace:
    """Replay :func:`swintormer.unet.forward` (plus the model's residual) on ``b x h x w``."""
    spec.validate()
    widths = spec.widths()
    m = spec.multiple
    hp, wp = math.ceil(h / m) * m, math.ceil(w / m) * m
    tr = _Trace()
    x_in = tr.op(b * h * w * spec.in_channels)
    x = tr.op(b * hp * wp * spec.in_channels, [x_in])  # centre + pad
    f = tr.op(b * hp * wp * spec.in_channels, [x], dwconv3x3_macs(b * hp, wp, spec.in_channels))
    f = tr.op(b * hp * wp * widths[0], [f], conv1x1_macs(b * hp, wp, spec.in_channels, widths[0]))

    skips = {}
    for prefix, c, count, level in spec.stages():
        lh, lw = hp >> level, wp >> level
        if prefix.startswith("dec"):
            c_up = widths[level + 1]
            up = tr.op(b * (lh // 2) * (lw // 2) * 2 * c_up, [f],
                       conv1x1_macs(b * (lh // 2), lw // 2, c_up, 2 * c_up))
            up = tr.op(b * lh * lw * c, [up])  # pixel shuffle
            cat = tr.op(b * lh * lw * 2 * c, [up, skips.pop(level)])
            f = tr.op(b * lh * lw * c, [cat], conv1x1_macs(b * lh, lw, 2 * c, c))
        for j in range(count):
            f = _block(tr, f, b, lh, lw, spec.block_config(c, j))
        if prefix.startswith("enc"):
            skips[level] = f
            un = tr.op(b * lh * lw * c, [f])  # pixel unshuffle
            f = tr.op(b * (lh // 2) * (lw // 2) * 2 * c, [un],
                      conv1x1_macs(b * (lh // 2), lw // 2, 4 * c, 2 * c))

    f = tr.op(b * hp * wp * widths[0], [f], dwconv3x3_macs(b * hp, wp, widths[0]))
    f = tr.op(b * hp * wp * spec.out_channels, [f], conv1x1_macs(b * hp, wp, widths[0], spec.out_channels))
    f = tr.op(b * h * w * spec.out_channels, [f])  # crop
    tr.op(b * h * w * spec.out_channels, [x_in, f])  # global residual
    return tr


def forward_macs(cfg: ModelConfig, b: int, h: int, w: int) -> int:
    return trace_forward(cfg.unet_spec(), b, h, w).macs


def count_params(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg.unet_spec()).values())


def estimate(cfg: ModelConfig, height: int, width: int, tile: int = 512, stride: int = 220,
             precision: int = 32, batch: int = 1) -> CostReport:
    """MACs and peak activation memory for tiled inference of an ``height x width`` image.

    A tile at least as large as the image along both axes gives whole-image inference.
    """
    if precision not in PRECISION_BYTES:
        raise ValueError(f"precision must be one of {sorted(PRECISION_BYTES)}, got {precision}")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    grid = make_tile_grid(height, width, tile, stride)
    th, tw = grid.tile_height, grid.tile_width
    per_tile = forward_macs(cfg, 1, th, tw)
    batch = min(batch, len(grid))
    tr = trace_forward(cfg.unet_spec(), batch, th, tw)
    return CostReport(
        height=height, width=width, tile_height=th, tile_width=tw, stride=stride, batch=batch,
        tiles=len(grid), macs_per_tile=per_tile, macs_total=per_tile * len(grid),
        macs_per_iteration=tr.macs, peak_activation_bytes=tr.peak_elems() * PRECISION_BYTES[precision],
        params=count_params(cfg), precision=precision,
    )
