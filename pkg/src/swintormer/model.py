"""The deblurring network and its weight container.

Weight file layout (all integers little-endian)::

    b"SWTW" | u32 version (=1) | u32 entry count
    per entry: u16 name length | name (utf-8) | u8 dtype (0=f32, 1=f64) | u8 rank
               | u32 dims[rank] | raw little-endian data

Model hyperparameters travel inside the same file as rank-0/1 f64 entries under
the reserved ``__config__.`` prefix.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from . import unet
from .tensor import Tensor

MAGIC = b"SWTW"
VERSION = 1
CONFIG_PREFIX = "__config__."
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}

# inputs (image and prior, both in [0, 1]) are centred before the network
INPUT_SHIFT = 0.5


class WeightFormatError(ValueError):
    pass


class BadMagicError(WeightFormatError):
    pass


class VersionMismatchError(WeightFormatError):
    pass


class TruncatedWeightsError(WeightFormatError):
    pass


class DuplicateNameError(WeightFormatError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 6
    width: int = 48
    blocks: tuple[int, ...] = (2, 3, 3, 4)
    window_size: int = 16
    refinement: int = 2
    ffn_expansion: float = 2.66
    channel_split: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if self.in_channels < 3:
            raise ValueError("in_channels must include the 3 image channels")
        self.unet_spec().validate()

    def unet_spec(self) -> unet.UNetSpec:
        return unet.UNetSpec(self.in_channels, 3, self.width, self.blocks, self.window_size,
                             self.refinement, self.ffn_expansion, self.channel_split)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


TINY = ModelConfig(in_channels=6, width=16, blocks=(1, 1, 1, 1), window_size=8, refinement=1)
# small enough for 500 Adam steps on a 64x64 pair in about a minute on one core
TOY = ModelConfig(in_channels=6, width=8, blocks=(1, 1, 1, 1), window_size=8, refinement=0)


class Swintormer:
    """Deblurring network: ``image + delta(image ⊕ prior)``."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        expected = unet.param_shapes(cfg.unet_spec())
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter names do not match config (missing {missing[:3]}, extra {extra[:3]})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape} != {shape}")
        self.cfg = cfg
        self.params = {name: params[name] for name in expected}

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1, *x.shape))
        if x.shape[-1] != self.cfg.in_channels:
            raise ValueError(f"model expects {self.cfg.in_channels} channels, got {x.shape[-1]}")
        shift = Tensor(np.full(x.shape[-1], -INPUT_SHIFT))
        delta = unet.forward(T.bias_add(x, shift), self.params, self.cfg.unet_spec())
        image = x if x.shape[-1] == 3 else T.split(x, [3, x.shape[-1] - 3])[0]
        out = T.add(image, delta)
        return T.reshape(out, out.shape[1:]) if squeeze else out

    __call__ = forward

    def infer(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.forward(Tensor(x)).data

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self, dtype=np.float64) -> "WeightStore":
        store = WeightStore()
        for name, value in config_entries(self.cfg).items():
            store[name] = value
        for name, p in self.params.items():
            store[name] = p.data.astype(dtype)
        return store


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> Swintormer:
    """Seeded truncated-normal init; the output projection starts at zero (identity model)."""
    params = unet.init_params(cfg.unet_spec(), np.random.default_rng(seed))
    params["out.pw"].data = np.zeros(params["out.pw"].shape)
    params["out.bias"].data = np.zeros(params["out.bias"].shape)
    return Swintormer(cfg, params)


def model_from_store(store: "WeightStore") -> Swintormer:
    cfg = config_from_entries(ModelConfig, store)
    params = {name: Tensor(arr.astype(np.float64), name=name)
              for name, arr in store.items() if not name.startswith(CONFIG_PREFIX)}
    return Swintormer(cfg, params)


# config <-> entries ------------------------------------------------------------

def config_entries(cfg) -> dict[str, np.ndarray]:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[CONFIG_PREFIX + f.name] = np.asarray(v, dtype=np.float64)
    return out


def config_from_entries(cls, store: "WeightStore"):
    kw = {}
    for f in dataclasses.fields(cls):
        key = CONFIG_PREFIX + f.name
        if key not in store:
            raise WeightFormatError(f"weights carry no {key} entry")
        v = store[key]
        default = f.default
        if isinstance(default, tuple):
            kw[f.name] = tuple(int(x) for x in v.reshape(-1))
        elif isinstance(default, int):
            kw[f.name] = int(v)
        else:
            kw[f.name] = float(v)
    return cls(**kw)


def config_hash(cfg) -> str:
    text = ";".join(f"{f.name}={getattr(cfg, f.name)!r}" for f in dataclasses.fields(cfg))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# weight store ------------------------------------------------------------------

class WeightStore(OrderedDict):
    """Ordered ``name -> ndarray`` (float32 or float64)."""

    def __setitem__(self, name, value):
        arr = np.asarray(value)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 255:
            raise ValueError("rank too large")
        super().__setitem__(name, arr)

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self))]
        for name, arr in self.items():
            raw = name.encode("utf-8")
            dt = arr.dtype.newbyteorder("<")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "WeightStore":
        view = memoryview(buf)
        pos = 0

        def need(n):
            nonlocal pos
            if pos + n > len(view):
                raise TruncatedWeightsError(f"file ends at byte {len(view)}, needed {pos + n}")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(view[:4]) != MAGIC:
            if len(view) < 4:
                raise TruncatedWeightsError("file shorter than the magic number")
            raise BadMagicError(f"bad magic {bytes(view[:4])!r}")
        pos = 4
        version, count = struct.unpack("<II", need(8))
        if version != VERSION:
            raise VersionMismatchError(f"unsupported weight format version {version}")
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", need(2))
            name = bytes(need(nlen)).decode("utf-8")
            code, rank = struct.unpack("<BB", need(2))
            if code not in _DTYPES:
                raise WeightFormatError(f"{name}: unknown dtype code {code}")
            dims = struct.unpack(f"<{rank}I", need(4 * rank))
            dt = _DTYPES[code]
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(bytes(need(n * dt.itemsize)), dtype=dt).reshape(dims)
            if name in store:
                raise DuplicateNameError(f"duplicate entry {name!r}")
            store[name] = arr.astype(dt.newbyteorder("="))
        if pos != len(view):
            raise WeightFormatError(f"{len(view) - pos} trailing bytes after last entry")
        return store


def save_weights(store: WeightStore, path) -> None:
    Path(path).write_bytes(store.to_bytes())


def load_weights(path) -> WeightStore:
    return WeightStore.from_bytes(Path(path).read_bytes())
