"""Attention windows (cyclically shifted, non-overlapping) and inference tiles (overlapping)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import Tensor, custom_op


@dataclass(frozen=True)
class WindowLayout:
    """How an ``H x W`` map is rolled, zero-padded and cut into ``M x M`` windows.

    ``index[n, k]`` is the flat source pixel of token ``k`` in window ``n`` (``-1`` for
    padding).  ``labels`` assigns each token the pre-roll region it came from; tokens
    attend to each other only within a region.  ``labels`` is None when the shift
    does not wrap anything, in which case every pair is allowed.
    """

    height: int
    width: int
    window_size: int
    shift: int
    padded_height: int
    padded_width: int
    index: np.ndarray = field(repr=False)
    labels: np.ndarray | None = field(repr=False)

    @property
    def n_windows(self) -> int:
        return self.index.shape[0]

    @property
    def tokens(self) -> int:
        return self.window_size ** 2

    def mask(self) -> np.ndarray:
        """Boolean ``(nWin, M^2, M^2)``; True marks an allowed token pair."""
        if self.labels is None:
            return np.ones((self.n_windows, self.tokens, self.tokens), dtype=bool)
        return self.labels[:, :, None] == self.labels[:, None, :]


def _region_labels(extent: int, padded: int, shift: int) -> np.ndarray:
    # 0 = rows from the unwrapped part, 1 = wrapped rows; padding joins the last region
    lab = np.zeros(padded, dtype=np.int64)
    if shift:
        lab[extent - shift:] = 1
    return lab


@lru_cache(maxsize=256)
def make_window_layout(height: int, width: int, window_size: int = 16, shift: int = 0) -> WindowLayout:
    m = window_size
    if m <= 0:
        raise ValueError(f"window size must be positive, got {m}")
    if not 0 <= shift < m:
        raise ValueError(f"shift must satisfy 0 <= shift < window size ({m}), got {shift}")
    if height <= 0 or width <= 0:
        raise ValueError(f"empty map {height}x{width}")
    hp = math.ceil(height / m) * m
    wp = math.ceil(width / m) * m
    sh, sw = shift % height, shift % width

    rows = np.arange(hp)
    cols = np.arange(wp)
    src_r = np.where(rows < height, (rows + sh) % height, -1)
    src_c = np.where(cols < width, (cols + sw) % width, -1)
    valid = (src_r[:, None] >= 0) & (src_c[None, :] >= 0)
    flat = np.where(valid, src_r[:, None] * width + src_c[None, :], -1)

    def windows(a):
        return a.reshape(hp // m, m, wp // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)

    index = windows(flat)
    labels = None
    if sh or sw:
        lab = 2 * _region_labels(height, hp, sh)[:, None] + _region_labels(width, wp, sw)[None, :]
        labels = windows(lab)
    index.setflags(write=False)
    if labels is not None:
        labels.setflags(write=False)
    return WindowLayout(height, width, m, shift, hp, wp, index, labels)


def window_partition(x: Tensor, layout: WindowLayout) -> Tensor:
    """``(..., H, W, C) -> (..., nWin, M^2, C)``: roll by ``-shift``, zero-pad, cut."""
    h, w, c = x.shape[-3:]
    if (h, w) != (layout.height, layout.width):
        raise ValueError(f"layout built for {layout.height}x{layout.width}, got {h}x{w}")
    lead = x.shape[:-3]
    idx = layout.index.reshape(-1)
    keep = idx >= 0
    src = idx[keep]
    xf = x.data.reshape(*lead, h * w, c)
    out = np.zeros((*lead, idx.size, c))
    out[..., keep, :] = xf[..., src, :]

    def backward(g):
        gf = g.reshape(*lead, idx.size, c)
        gx = np.zeros((*lead, h * w, c))
        gx[..., src, :] = gf[..., keep, :]
        return (gx.reshape(x.shape),)

    return custom_op(out.reshape(*lead, layout.n_windows, layout.tokens, c), (x,), backward)


def window_reverse(wins: Tensor, layout: WindowLayout) -> Tensor:
    """Exact inverse of :func:`window_partition` (un-roll and crop)."""
    if wins.shape[-3:-1] != (layout.n_windows, layout.tokens):
        raise ValueError(f"windows {wins.shape} do not match layout "
                         f"({layout.n_windows} x {layout.tokens})")
    lead = wins.shape[:-3]
    c = wins.shape[-1]
    h, w = layout.height, layout.width
    idx = layout.index.reshape(-1)
    keep = idx >= 0
    src = idx[keep]
    wf = wins.data.reshape(*lead, idx.size, c)
    out = np.zeros((*lead, h * w, c))
    out[..., src, :] = wf[..., keep, :]

    def backward(g):
        gf = g.reshape(*lead, h * w, c)
        gw = np.zeros((*lead, idx.size, c))
        gw[..., keep, :] = gf[..., src, :]
        return (gw.reshape(wins.shape),)

    return custom_op(out.reshape(*lead, h, w, c), (wins,), backward)


@lru_cache(maxsize=32)
def relative_position_index(window_size: int) -> np.ndarray:
    """``(M^2, M^2)`` indices into a ``(2M-1)^2`` bias table."""
    m = window_size
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    idx = rel[0] * (2 * m - 1) + rel[1]
    idx.setflags(write=False)
    return idx


# inference tiles ---------------------------------------------------------------

def _axis_origins(extent: int, tile: int, stride: int) -> list[int]:
    if extent <= tile:
        return [0]
    n = math.ceil((extent - tile) / stride) + 1
    origins = [i * stride for i in range(n)]
    origins[-1] = extent - tile
    return origins


@dataclass(frozen=True)
class TileGrid:
    height: int
    width: int
    tile: int
    stride: int
    row_origins: tuple[int, ...]
    col_origins: tuple[int, ...]

    @property
    def tile_height(self) -> int:
        return min(self.tile, self.height)

    @property
    def tile_width(self) -> int:
        return min(self.tile, self.width)

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.row_origins for c in self.col_origins]

    def __len__(self):
        return len(self.row_origins) * len(self.col_origins)

    def coverage(self) -> np.ndarray:
        """Per-pixel count of covering tiles."""
        cnt = np.zeros((self.height, self.width), dtype=np.int64)
        th, tw = self.tile_height, self.tile_width
        for r, c in self.origins:
            cnt[r:r + th, c:c + tw] += 1
        return cnt

    def slices(self):
        th, tw = self.tile_height, self.tile_width
        for r, c in self.origins:
            yield slice(r, r + th), slice(c, c + tw)


def make_tile_grid(height: int, width: int, tile: int, stride: int) -> TileGrid:
    """Overlapping ``tile x tile`` grid with stride ``stride``; the last tile per axis is clamped.

    A tile larger than the image along an axis collapses to one image-sized tile there.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if tile <= 0:
        raise ValueError(f"tile must be positive, got {tile}")
    if stride > tile:
        raise ValueError(f"stride {stride} > tile {tile} would leave uncovered pixels")
    if height <= 0 or width <= 0:
        raise ValueError(f"empty image {height}x{width}")
    return TileGrid(height, width, tile, stride,
                    tuple(_axis_origins(height, tile, stride)),
                    tuple(_axis_origins(width, tile, stride)))


def extract_tiles(image: np.ndarray, grid: TileGrid) -> list[np.ndarray]:
    """Cut ``image`` (H x W x C) into one array per grid origin."""
    if image.shape[:2] != (grid.height, grid.width):
        raise ValueError(f"image {image.shape[:2]} does not match grid {grid.height}x{grid.width}")
    return [image[rs, cs].copy() for rs, cs in grid.slices()]


def merge_tiles(tiles, grid: TileGrid) -> np.ndarray:
    """Average overlapping tiles back into an ``H x W x C`` image.

    Uses a running mean in grid order, so identical overlapping values come back bit-exact.
    """
    tiles = [t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64) for t in tiles]
    if len(tiles) != len(grid):
        raise ValueError(f"expected {len(grid)} tiles, got {len(tiles)}")
    th, tw = grid.tile_height, grid.tile_width
    c = tiles[0].shape[-1]
    for t in tiles:
        if t.shape != (th, tw, c):
            raise ValueError(f"tile shape {t.shape} != {(th, tw, c)}")
    out = np.zeros((grid.height, grid.width, c))
    seen = np.zeros((grid.height, grid.width, 1))
    for t, (rs, cs) in zip(tiles, grid.slices()):
        seen[rs, cs] += 1.0
        out[rs, cs] += (t - out[rs, cs]) / seen[rs, cs]
    return out
