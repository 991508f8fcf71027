"""DDPM machinery used to produce the prior feature: schedule, forward noising,
posterior, ancestral and DDIM samplers, and the conditional noise-prediction loss.

Timesteps are 1-based (``t = 1..T``); ``t = 0`` denotes the clean sample with
``alpha_bar_0 = 1``.  Latents live in image space: the encoder/decoder pair is
pluggable and defaults to identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from . import unet
from .model import CONFIG_PREFIX, WeightStore, config_entries, config_from_entries
from .swda import fan_in_std, trunc_normal
from .tensor import Tensor


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    alpha_bar_prev: np.ndarray = field(init=False, repr=False)
    tilde_beta: np.ndarray = field(init=False, repr=False)
    coef_z0: np.ndarray = field(init=False, repr=False)
    coef_zt: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("need at least one beta")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        abar = np.cumprod(alphas)
        abar_prev = np.concatenate([[1.0], abar[:-1]])
        derived = {
            "betas": betas,
            "alphas": alphas,
            "alpha_bar": abar,
            "alpha_bar_prev": abar_prev,
            "tilde_beta": (1.0 - abar_prev) / (1.0 - abar) * betas,
            "coef_z0": np.sqrt(abar_prev) * betas / (1.0 - abar),
            "coef_zt": np.sqrt(alphas) * (1.0 - abar_prev) / (1.0 - abar),
        }
        for name, arr in derived.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.betas.size

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return int(t)

    # 1-based accessors
    def beta(self, t: int) -> float:
        return float(self.betas[self.check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.check_t(t) - 1])

    def abar(self, t: int) -> float:
        t = self.check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def posterior_variance(self, t: int) -> float:
        return float(self.tilde_beta[self.check_t(t) - 1])


def make_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear", base_steps: int | None = 1000) -> DiffusionSchedule:
    """Linear betas over a ``base_steps`` grid, respaced to ``T`` steps.

    Respacing keeps ``alpha_bar`` at the grid points ``t*base/T`` so the noise level at
    ``t = T`` is the same for every ``T``.  ``base_steps=None`` spaces betas linearly over
    ``T`` directly.
    """
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if base_steps is None or base_steps == T:
        return DiffusionSchedule(np.linspace(beta_start, beta_end, T))
    if base_steps < T:
        raise ValueError(f"base_steps {base_steps} < T {T}")
    base_abar = np.cumprod(1.0 - np.linspace(beta_start, beta_end, base_steps))
    idx = np.arange(1, T + 1) * base_steps // T - 1
    abar = base_abar[idx]
    prev = np.concatenate([[1.0], abar[:-1]])
    return DiffusionSchedule(1.0 - abar / prev)


def q_sample(z0: np.ndarray, t: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``."""
    if np.shape(z0) != np.shape(eps):
        raise ValueError(f"z0 {np.shape(z0)} and eps {np.shape(eps)} differ in shape")
    ab = sched.abar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def posterior(z_t: np.ndarray, z0: np.ndarray, t: int, sched: DiffusionSchedule):
    """Mean and variance of ``q(z_{t-1} | z_t, z_0)``."""
    if np.shape(z_t) != np.shape(z0):
        raise ValueError("z_t and z0 differ in shape")
    i = sched.check_t(t) - 1
    return sched.coef_z0[i] * z0 + sched.coef_zt[i] * z_t, float(sched.tilde_beta[i])


def ddpm_step(z_t: np.ndarray, t: int, eps_hat: np.ndarray, noise: np.ndarray | None,
              sched: DiffusionSchedule) -> np.ndarray:
    """One ancestral step; noise scale is ``sqrt(1 - alpha_t)``, and no noise at ``t = 1``."""
    a, ab = sched.alpha(t), sched.abar(t)
    mean = (z_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if t == 1 or noise is None:
        return mean
    return mean + np.sqrt(1.0 - a) * noise


Denoiser = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


def ddpm_sample(z_T: np.ndarray, denoiser: Denoiser, cond, sched: DiffusionSchedule,
                rng: np.random.Generator) -> np.ndarray:
    z = np.asarray(z_T, dtype=np.float64)
    for t in range(sched.T, 0, -1):
        noise = rng.standard_normal(z.shape) if t > 1 else None
        z = ddpm_step(z, t, _predict(denoiser, z, t, cond), noise, sched)
    return z


def ddim_timesteps(T: int, steps: int) -> list[int]:
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    return [i * T // steps for i in range(steps + 1)]


def ddim_sample(z_T: np.ndarray, denoiser: Denoiser, cond, sched: DiffusionSchedule,
                steps: int | None = None, eta: float = 0.0, seed: int = 0) -> np.ndarray:
    """DDIM over ``steps`` evenly spaced timesteps ending at ``T``; ``eta = 0`` is deterministic."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    taus = ddim_timesteps(sched.T, sched.T if steps is None else steps)
    rng = np.random.default_rng(seed)
    z = np.asarray(z_T, dtype=np.float64)
    for t, t_prev in zip(taus[:0:-1], taus[-2::-1]):
        eps = _predict(denoiser, z, t, cond)
        ab, ab_prev = sched.abar(t), sched.abar(t_prev)
        z0_hat = (z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
        z = np.sqrt(ab_prev) * z0_hat + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            z = z + sigma * rng.standard_normal(z.shape)
    return z


def _predict(denoiser, z, t, cond) -> np.ndarray:
    eps = denoiser(z, t, cond)
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if eps.shape != z.shape:
        raise ValueError(f"denoiser returned {eps.shape}, expected {z.shape}")
    return eps


# encoder -----------------------------------------------------------------------

class IdentityCodec:
    """Default latent codec: the image is its own latent."""

    def encode(self, x):
        return x

    def decode(self, z):
        return z


# denoiser network ----------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 3
    cond_channels: int = 3
    width: int = 16
    blocks: tuple[int, ...] = (1, 1, 1)
    window_size: int = 8
    time_dim: int = 32
    ffn_expansion: float = 2.66
    channel_split: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        self.unet_spec().validate()

    def unet_spec(self) -> unet.UNetSpec:
        return unet.UNetSpec(self.channels + self.cond_channels, self.channels, self.width,
                             self.blocks, self.window_size, 0, self.ffn_expansion, self.channel_split)


class DenoiserNet:
    """Time-conditioned U-shaped noise predictor ``eps(z_t, t, c)``.

    The condition is concatenated to ``z_t`` on the channel axis; a projected
    sinusoidal embedding of ``t`` is added to every pixel after the input embedding.
    """

    def __init__(self, cfg: DenoiserConfig, params: dict[str, Tensor]):
        expected = self.param_shapes(cfg)
        if set(params) != set(expected):
            raise ValueError("denoiser parameter names do not match config")
        self.cfg = cfg
        self.params = {k: params[k] for k in expected}

    @staticmethod
    def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
        shapes = unet.param_shapes(cfg.unet_spec())
        shapes["time.weight"] = (cfg.time_dim, cfg.width)
        shapes["time.bias"] = (cfg.width,)
        return shapes

    @classmethod
    def build(cls, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0) -> "DenoiserNet":
        rng = np.random.default_rng(seed)
        params = unet.init_params(cfg.unet_spec(), rng)
        params["time.weight"] = Tensor(trunc_normal(rng, (cfg.time_dim, cfg.width), fan_in_std(cfg.time_dim)),
                                       name="time.weight")
        params["time.bias"] = Tensor(np.zeros(cfg.width), name="time.bias")
        return cls(cfg, params)

    def forward(self, z_t: Tensor, t: int, cond: Tensor) -> Tensor:
        squeeze = z_t.ndim == 3
        if squeeze:
            z_t, cond = T.reshape(z_t, (1, *z_t.shape)), T.reshape(cond, (1, *cond.shape))
        if z_t.shape[-1] != self.cfg.channels or cond.shape[-1] != self.cfg.cond_channels:
            raise ValueError(f"denoiser expects {self.cfg.channels}+{self.cfg.cond_channels} channels, "
                             f"got {z_t.shape[-1]}+{cond.shape[-1]}")
        if z_t.shape[:-1] != cond.shape[:-1]:
            raise ValueError(f"latent {z_t.shape} and condition {cond.shape} differ spatially")
        emb = Tensor(T.sinusoidal_embed(float(t), self.cfg.time_dim).reshape(1, -1))
        temb = T.gelu(T.bias_add(T.matmul(emb, self.params["time.weight"]), self.params["time.bias"]))
        temb = T.reshape(temb, (self.cfg.width,))
        out = unet.forward(T.concat([z_t, cond], axis=-1), self.params, self.cfg.unet_spec(),
                           after_embed=lambda f: T.bias_add(f, temb))
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def __call__(self, z_t, t: int, cond):
        with T.no_grad():
            return self.forward(Tensor(z_t), t, Tensor(cond)).data

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> WeightStore:
        store = WeightStore()
        for k, v in config_entries(self.cfg).items():
            store[k] = v
        for k, p in self.params.items():
            store[k] = p.data
        return store

    @classmethod
    def from_store(cls, store: WeightStore) -> "DenoiserNet":
        cfg = config_from_entries(DenoiserConfig, store)
        params = {k: Tensor(v.astype(np.float64), name=k) for k, v in store.items()
                  if not k.startswith(CONFIG_PREFIX)}
        return cls(cfg, params)


def ldm_loss(denoiser, z0: np.ndarray, y_cond: np.ndarray, t: int, eps: np.ndarray,
             sched: DiffusionSchedule, codec=IdentityCodec()) -> Tensor:
    """Mean squared error between the injected noise and the denoiser's prediction.

    ``denoiser`` is a :class:`DenoiserNet` (differentiable path) or any callable
    returning the predicted noise.
    """
    sched.check_t(t)
    if np.shape(z0) != np.shape(eps):
        raise ValueError(f"z0 {np.shape(z0)} and eps {np.shape(eps)} differ in shape")
    z_t = q_sample(np.asarray(z0, dtype=np.float64), t, eps, sched)
    cond = Tensor(codec.encode(np.asarray(y_cond, dtype=np.float64)))
    if isinstance(denoiser, DenoiserNet):
        pred = denoiser.forward(Tensor(z_t), t, cond)
    else:
        pred = denoiser(Tensor(z_t), t, cond)
        pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    if pred.shape != np.shape(eps):
        raise ValueError(f"prediction {pred.shape} vs noise {np.shape(eps)}")
    return T.mean(T.square(T.sub(Tensor(eps), pred)))


def train_denoiser(net: DenoiserNet, samples: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]],
                   sched: DiffusionSchedule, steps: int, lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Adam on :func:`ldm_loss` with ``t`` uniform in ``[1, T]``; ``samples(rng)`` yields ``(z0, y)``."""
    from .optim import Adam

    rng = np.random.default_rng(seed)
    opt = Adam(net.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        z0, y = samples(rng)
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(np.shape(z0))
        opt.zero_grad()
        loss = ldm_loss(net, z0, y, t, eps, sched)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
