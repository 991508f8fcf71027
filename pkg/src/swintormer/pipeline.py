"""Two-stage inference (diffusion prior -> tiled deblur -> averaged merge), the
deblurring losses and a small trainer for desk-scale experiments."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensor as T
from .diffusion import DenoiserNet, DiffusionSchedule, IdentityCodec, ddim_sample, ddpm_sample
from .model import Swintormer
from .optim import Adam
from .swda import trunc_normal
from .tensor import Tensor
from .windowing import extract_tiles, make_tile_grid, merge_tiles

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


# prior -------------------------------------------------------------------------

def extract_prior(image: np.ndarray, denoiser, sched: DiffusionSchedule, steps: int | None = None,
                  eta: float = 0.0, seed: int = 0, sampler: str = "ddim",
                  codec=IdentityCodec()) -> np.ndarray:
    """Sample the prior feature ``z_0`` (H x W x 3) conditioned on the encoded image.

    Sampling starts from seeded Gaussian noise at ``t = T``.  With ``eta = 0`` the result
    is a deterministic function of ``(image, denoiser, seed)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected H x W x C image, got {image.shape}")
    channels = 3
    if isinstance(denoiser, DenoiserNet):
        channels = denoiser.cfg.channels
        if image.shape[-1] != denoiser.cfg.cond_channels:
            raise ValueError(f"denoiser conditions on {denoiser.cfg.cond_channels} channels, "
                             f"image has {image.shape[-1]}")
    start, noise = np.random.SeedSequence(seed).spawn(2)
    z_T = np.random.default_rng(start).standard_normal((*image.shape[:2], channels))
    cond = codec.encode(image)
    if sampler == "ddim":
        return ddim_sample(z_T, denoiser, cond, sched, steps, eta, seed=noise)
    if sampler == "ddpm":
        return ddpm_sample(z_T, denoiser, cond, sched, np.random.default_rng(noise))
    raise ValueError(f"unknown sampler {sampler!r}")


# tiled deblur ------------------------------------------------------------------

@dataclass
class DeblurJob:
    image: np.ndarray  # H x W x 3, floats in [0, 1]
    model: Swintormer
    prior: np.ndarray | None = None
    tile: int = 512
    stride: int = 220
    batch: int = 1
    threads: int = 1


def deblur(job: DeblurJob) -> np.ndarray:
    """Concatenate the prior, run the model on overlapping tiles in batches, average overlaps."""
    x = np.asarray(job.image, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {x.shape}")
    if job.prior is not None:
        prior = np.asarray(job.prior, dtype=np.float64)
        if prior.shape[:2] != x.shape[:2]:
            raise ValueError(f"prior {prior.shape[:2]} and image {x.shape[:2]} differ spatially")
        x = np.concatenate([x, prior], axis=-1)
    if job.model.cfg.in_channels != x.shape[-1]:
        raise ValueError(f"model takes {job.model.cfg.in_channels} channels but the job supplies "
                         f"{x.shape[-1]} ({'with' if job.prior is not None else 'without'} prior)")
    if job.batch < 1 or job.threads < 1:
        raise ValueError("batch and threads must be >= 1")

    grid = make_tile_grid(x.shape[0], x.shape[1], job.tile, job.stride)
    tiles = extract_tiles(x, grid)
    batches = [np.stack(tiles[i:i + job.batch]) for i in range(0, len(tiles), job.batch)]
    log.info("deblur %dx%d: %d tiles of %dx%d in %d batches", grid.height, grid.width,
             len(grid), grid.tile_height, grid.tile_width, len(batches))
    if job.threads == 1:
        outs = [job.model.infer(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=job.threads) as pool:
            outs = list(pool.map(job.model.infer, batches))
    out_tiles = [t for b in outs for t in b]
    return np.clip(merge_tiles(out_tiles, grid), 0.0, 1.0)


# losses ------------------------------------------------------------------------

def l1_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    return T.mean(T.abs_(T.sub(pred, target)))


class FeatureExtractor:
    """Frozen, seeded three-layer conv stack used as the perceptual feature map.

    Inputs are standardized with a fixed mean/std first so the features are O(1).
    """

    def __init__(self, seed: int = 0, widths: Sequence[int] = (3, 16, 16, 16),
                 mean: float = 0.5, std: float = 0.25):
        rng = np.random.default_rng(seed)
        self.mean, self.std = mean, std
        self.layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            dw = Tensor(trunc_normal(rng, (3, 3, cin), 1.0 / 3.0))
            pw = Tensor(trunc_normal(rng, (cin, cout), np.sqrt(2.0 / cin)))
            self.layers.append((dw, pw))
        self.in_channels = widths[0]

    def __call__(self, x: Tensor) -> Tensor:
        x = T.bias_add(T.scale(x, 1.0 / self.std), Tensor(np.full(x.shape[-1], -self.mean / self.std)))
        for dw, pw in self.layers:
            x = T.gelu(T.conv1x1(T.dwconv3x3(x, dw), pw))
        return x


@lru_cache(maxsize=1)
def default_features() -> FeatureExtractor:
    return FeatureExtractor()


def perceptual_loss(pred: Tensor, target, feat: FeatureExtractor | None = None) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    feat = feat or default_features()
    return T.mean(T.square(T.sub(feat(pred), feat(target))))


LOSSES = {"l1": l1_loss, "perceptual": perceptual_loss}


# training ----------------------------------------------------------------------

def model_input(blurry: np.ndarray, prior: np.ndarray | None) -> np.ndarray:
    return blurry if prior is None else np.concatenate([blurry, prior], axis=-1)


def train_toy(model: Swintormer, pairs, loss_kind: str = "l1", steps: int = 500,
              lr: float = 1e-2, seed: int = 0, feat: FeatureExtractor | None = None,
              cosine: bool = True) -> list[float]:
    """Adam on ``(blurry, sharp, prior)`` triples; returns the per-step loss (before each update).

    With ``cosine`` the learning rate decays from ``lr`` to zero over ``steps``.

    The pair used at each step is drawn with ``seed``; identical seeds give identical curves.
    """
    if not pairs:
        raise ValueError("need at least one (blurry, sharp, prior) triple")
    if loss_kind not in LOSSES:
        raise ValueError(f"unknown loss {loss_kind!r}")
    inputs = [Tensor(model_input(b, p)[None]) for b, _, p in pairs]
    targets = [Tensor(np.asarray(s, dtype=np.float64)[None]) for _, s, _ in pairs]
    loss_fn = LOSSES[loss_kind]
    kwargs = {"feat": feat} if loss_kind == "perceptual" and feat is not None else {}
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr, eps=1e-8)
    curve = []
    for step in range(steps):
        i = int(rng.integers(len(pairs)))
        if cosine:
            opt.lr = 0.5 * lr * (1.0 + np.cos(np.pi * step / steps))
        opt.zero_grad()
        loss = loss_fn(model.forward(inputs[i]), targets[i], **kwargs)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteLossError(f"loss became {value} at step {step}")
        loss.backward()
        opt.step()
        curve.append(value)
    return curve


def make_toy_pair(size: int = 64, seed: int = 0, blur_sigma: float = 1.0, shapes: int = 24,
                  edge_sigma: float = 1.0, margin: int = 4, background: float = 0.5):
    """Synthetic sharp image and its Gaussian blur.

    The sharp image is smooth shading plus rectangles whose edges are softened by
    ``edge_sigma`` (anti-aliasing), framed by a ``margin`` of ``background`` grey.
    Blurring extends the image with the same grey, so borders carry no artefacts.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for c in range(3):
        fx, fy, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        img[..., c] = 0.5 + 0.2 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    for _ in range(shapes):
        r0, c0 = rng.integers(0, size - 4, size=2)
        h, w = rng.integers(3, size // 4, size=2)
        img[r0:r0 + h, c0:c0 + w] = rng.uniform(0.05, 0.95, size=3)
    if edge_sigma > 0:
        img = gaussian_filter(img, sigma=(edge_sigma, edge_sigma, 0), mode="constant", cval=background)
    if margin:
        img[:margin] = img[-margin:] = background
        img[:, :margin] = img[:, -margin:] = background
    blurry = gaussian_filter(img, sigma=(blur_sigma, blur_sigma, 0), mode="constant", cval=background)
    return blurry, img
