"""U-shaped stack of SWDA blocks shared by the deblurring network and the denoiser.

Encoder levels halve resolution with pixel-unshuffle + pointwise conv and double
width; the decoder mirrors it with pointwise conv + pixel-shuffle, concatenates the
skip and fuses back with a pointwise conv.  Inputs are zero-padded to a multiple
of ``2**(levels-1)`` and the output is cropped back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .swda import BlockConfig, block_param_shapes, fan_in_std, init_block_params, swda_block, trunc_normal
from .tensor import Tensor


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int
    out_channels: int
    width: int
    blocks: tuple[int, ...]
    window_size: int
    refinement: int = 0
    ffn_expansion: float = 2.66
    channel_split: float = 0.5

    @property
    def levels(self) -> int:
        return len(self.blocks)

    @property
    def multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def widths(self) -> list[int]:
        return [self.width * 2**i for i in range(self.levels)]

    def block_config(self, channels: int, j: int) -> BlockConfig:
        shift = (self.window_size // 2) if j % 2 else 0
        return BlockConfig(channels, window_size=self.window_size, shift=shift,
                           ffn_expansion=self.ffn_expansion, channel_split=self.channel_split)

    def stages(self):
        """``(prefix, channels, block count, level)`` for every run of SWDA blocks, in forward order."""
        w = self.widths()
        last = self.levels - 1
        out = [(f"enc{i}", w[i], self.blocks[i], i) for i in range(last)]
        out.append(("latent", w[last], self.blocks[last], last))
        out += [(f"dec{i}", w[i], self.blocks[i], i) for i in reversed(range(last))]
        if self.refinement:
            out.append(("refine", w[0], self.refinement, 0))
        return out

    def validate(self) -> None:
        if self.levels < 1 or any(b < 0 for b in self.blocks):
            raise ValueError(f"invalid block counts {self.blocks}")
        if self.width <= 0 or self.width % 2:
            raise ValueError(f"width must be positive and even, got {self.width}")
        for _, c, n, _ in self.stages():
            for j in range(min(n, 2)):
                self.block_config(c, j)


def param_shapes(spec: UNetSpec) -> dict[str, tuple[int, ...]]:
    spec.validate()
    w = spec.widths()
    shapes = {
        "embed.dw": (3, 3, spec.in_channels),
        "embed.pw": (spec.in_channels, w[0]),
        "embed.bias": (w[0],),
    }
    for prefix, c, n, level in spec.stages():
        if prefix.startswith("dec"):
            shapes[f"up{level}.weight"] = (w[level + 1], 2 * w[level + 1])
            shapes[f"fuse{level}.weight"] = (2 * c, c)
        for j in range(n):
            for name, shape in block_param_shapes(spec.block_config(c, j)).items():
                shapes[f"{prefix}.{j}.{name}"] = shape
        if prefix.startswith("enc"):
            shapes[f"down{level}.weight"] = (4 * c, 2 * c)
    shapes["out.dw"] = (3, 3, w[0])
    shapes["out.pw"] = (w[0], spec.out_channels)
    shapes["out.bias"] = (spec.out_channels,)
    return shapes


def init_params(spec: UNetSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    shapes = param_shapes(spec)
    params: dict[str, Tensor] = {}
    for prefix, c, n, _ in spec.stages():
        for j in range(n):
            for name, t in init_block_params(spec.block_config(c, j), rng).items():
                params[f"{prefix}.{j}.{name}"] = Tensor(t.data, name=f"{prefix}.{j}.{name}")
    for name, shape in shapes.items():
        if name in params:
            continue
        if name.endswith("bias"):
            arr = np.zeros(shape)
        elif name.endswith(".dw"):
            arr = trunc_normal(rng, shape, fan_in_std(9))
        else:
            arr = trunc_normal(rng, shape, fan_in_std(shape[0]))
        params[name] = Tensor(arr, name=name)
    return {name: params[name] for name in shapes}


def _sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _sepconv(x: Tensor, params, prefix: str) -> Tensor:
    y = T.dwconv3x3(x, params[f"{prefix}.dw"])
    return T.conv1x1(y, params[f"{prefix}.pw"], params[f"{prefix}.bias"])


def _stage(x: Tensor, params, spec: UNetSpec, prefix: str, c: int, n: int) -> Tensor:
    for j in range(n):
        x = swda_block(x, _sub(params, f"{prefix}.{j}"), spec.block_config(c, j))
    return x


def forward(x: Tensor, params: dict[str, Tensor], spec: UNetSpec,
            after_embed: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """``(B, H, W, in_channels) -> (B, H, W, out_channels)``."""
    b, h, w, cin = x.shape
    if cin != spec.in_channels:
        raise ValueError(f"network expects {spec.in_channels} input channels, got {cin}")
    m = spec.multiple
    hp, wp = math.ceil(h / m) * m, math.ceil(w / m) * m
    f = _sepconv(T.pad2d(x, hp - h, wp - w), params, "embed")
    if after_embed is not None:
        f = after_embed(f)

    skips = {}
    for prefix, c, n, level in spec.stages():
        if prefix.startswith("dec"):
            up = T.pixel_shuffle(T.conv1x1(f, params[f"up{level}.weight"]))
            f = T.conv1x1(T.concat([up, skips[level]], axis=-1), params[f"fuse{level}.weight"])
        f = _stage(f, params, spec, prefix, c, n)
        if prefix.startswith("enc"):
            skips[level] = f
            f = T.conv1x1(T.pixel_unshuffle(f), params[f"down{level}.weight"])
    return T.crop2d(_sepconv(f, params, "out"), h, w)
