"""Memory-efficient tiled image deblurring: a windowed dual-attention transformer
guided by a diffusion prior, with a numpy autodiff engine and a MACs/memory estimator."""

from .cost import CostReport, estimate
from .diffusion import DenoiserConfig, DenoiserNet, DiffusionSchedule, ddim_sample, ddpm_sample, make_schedule
from .imageio import ImageBuffer, read_image, write_image
from .metrics import evaluate, psnr, ssim
from .model import TINY, TOY, ModelConfig, Swintormer, WeightStore, build_model, load_weights, \
    model_from_store, save_weights
from .pipeline import DeblurJob, deblur, extract_prior, make_toy_pair, train_toy
from .tensor import Tensor, gradcheck, no_grad
from .windowing import TileGrid, WindowLayout, make_tile_grid, make_window_layout

__version__ = "0.1.0"
