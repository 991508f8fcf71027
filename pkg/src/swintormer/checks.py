"""Finite-difference gradient suite over every differentiable op and the composed networks.

Each check draws random 64-bit inputs, reduces the op output to a scalar with a
fixed random projection, and compares analytic against central-difference
gradients (``h = 1e-5``).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import GradcheckReport, Tensor, gradcheck

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-5
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    kind: str  # "primitive" or "composite"
    report: GradcheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.kind:<9s} {self.name:<24s} max rel err {self.report.max_error:.2e}"
                f"  (tol {self.report.tol:.0e}, {self.seconds:.2f}s)")


def _leaf(rng, shape, lo=-1.0, hi=1.0, name=None) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), name=name)


def _project(y: Tensor, r: np.ndarray) -> Tensor:
    return T.sum_(T.mul(y, Tensor(r)))


def _unary(rng, op: Callable[[Tensor], Tensor], shape, lo=-1.0, hi=1.0):
    x = _leaf(rng, shape, lo, hi, "x")
    r = rng.standard_normal(op(x).shape)
    return (lambda: _project(op(x), r)), [x]


def _away_from_zero(rng, shape):
    mag = rng.uniform(0.2, 1.0, size=shape)
    return Tensor(mag * rng.choice([-1.0, 1.0], size=shape), name="x")


def _primitives(rng) -> dict[str, Callable[[], tuple]]:
    def binary(op):
        def make():
            a, b = _leaf(rng, (3, 4), name="a"), _leaf(rng, (3, 4), name="b")
            r = rng.standard_normal((3, 4))
            return (lambda: _project(op(a, b), r)), [a, b]
        return make

    def abs_case():
        x = _away_from_zero(rng, (3, 4))
        r = rng.standard_normal((3, 4))
        return (lambda: _project(T.abs_(x), r)), [x]

    def matmul_case():
        a, b = _leaf(rng, (3, 4), name="a"), _leaf(rng, (4, 2), name="b")
        r = rng.standard_normal((3, 2))
        return (lambda: _project(T.matmul(a, b), r)), [a, b]

    def batched_matmul():
        a, b = _leaf(rng, (2, 3, 3, 4), name="a"), _leaf(rng, (2, 3, 4, 2), name="b")
        r = rng.standard_normal((2, 3, 3, 2))
        return (lambda: _project(T.matmul(a, b), r)), [a, b]

    def conv1x1_case():
        x, w, b = _leaf(rng, (2, 2, 3), name="x"), _leaf(rng, (3, 4), name="w"), _leaf(rng, (4,), name="b")
        r = rng.standard_normal((2, 2, 4))
        return (lambda: _project(T.conv1x1(x, w, b), r)), [x, w, b]

    def dwconv_case():
        x, w = _leaf(rng, (4, 4, 2), name="x"), _leaf(rng, (3, 3, 2), name="w")
        r = rng.standard_normal((4, 4, 2))
        return (lambda: _project(T.dwconv3x3(x, w), r)), [x, w]

    def softmax_case():
        x = _leaf(rng, (1, 5), -2, 2, "x")
        r = rng.standard_normal((1, 5))
        return (lambda: _project(T.softmax(x, axis=-1), r)), [x]

    def masked_softmax():
        x = _leaf(rng, (3, 4), -2, 2, "x")
        mask = np.array([[1, 1, 0, 1], [0, 1, 1, 0], [1, 0, 0, 0]], dtype=bool)
        r = rng.standard_normal((3, 4))
        return (lambda: _project(T.softmax(x, axis=-1, mask=mask), r)), [x]

    def layernorm_case():
        x = _leaf(rng, (2, 3, 5), name="x")
        g, b = _leaf(rng, (5,), 0.5, 1.5, "gamma"), _leaf(rng, (5,), name="beta")
        r = rng.standard_normal((2, 3, 5))
        return (lambda: _project(T.layernorm(x, g, b), r)), [x, g, b]

    def bias_add_case():
        x, b = _leaf(rng, (2, 3, 4), name="x"), _leaf(rng, (3, 4), name="b")
        r = rng.standard_normal((2, 3, 4))
        return (lambda: _project(T.bias_add(x, b), r)), [x, b]

    def scale_axis_case():
        x, v = _leaf(rng, (2, 3, 4), name="x"), _leaf(rng, (3,), name="v")
        r = rng.standard_normal((2, 3, 4))
        return (lambda: _project(T.scale_axis(x, v, axis=1), r)), [x, v]

    def take_case():
        x = _leaf(rng, (5, 3), name="x")
        idx = np.array([[0, 2], [2, 4], [1, 1]])
        r = rng.standard_normal((3, 2, 3))
        return (lambda: _project(T.take(x, idx, axis=0), r)), [x]

    def concat_case():
        a, b = _leaf(rng, (2, 3, 2), name="a"), _leaf(rng, (2, 3, 3), name="b")
        r = rng.standard_normal((2, 3, 5))
        return (lambda: _project(T.concat([a, b], axis=-1), r)), [a, b]

    def split_case():
        x = _leaf(rng, (2, 6), name="x")
        r1, r2 = rng.standard_normal((2, 2)), rng.standard_normal((2, 4))

        def f():
            p, q = T.split(x, [2, 4], axis=-1)
            return T.add(_project(p, r1), _project(q, r2))
        return f, [x]

    def sum_case():
        x = _leaf(rng, (3, 4), name="x")
        return (lambda: T.sum_(T.square(x))), [x]

    def mean_case():
        x = _leaf(rng, (3, 4), name="x")
        r = Tensor(rng.standard_normal((3, 4)))
        return (lambda: T.mean(T.mul(x, r))), [x]

    return {
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "scale": lambda: _unary(rng, lambda x: T.scale(x, -1.7), (3, 4)),
        "neg": lambda: _unary(rng, T.neg, (3, 4)),
        "abs": abs_case,
        "square": lambda: _unary(rng, T.square, (3, 4)),
        "gelu": lambda: _unary(rng, T.gelu, (3, 4), -3, 3),
        "sum": sum_case,
        "mean": mean_case,
        "matmul": matmul_case,
        "matmul_batched": batched_matmul,
        "reshape": lambda: _unary(rng, lambda x: T.reshape(x, (4, 3)), (3, 4)),
        "transpose": lambda: _unary(rng, lambda x: T.transpose(x, (2, 0, 1)), (2, 3, 4)),
        "bias_add": bias_add_case,
        "scale_axis": scale_axis_case,
        "take": take_case,
        "concat": concat_case,
        "split": split_case,
        "conv1x1": conv1x1_case,
        "dwconv3x3": dwconv_case,
        "softmax": softmax_case,
        "softmax_masked": masked_softmax,
        "layernorm": layernorm_case,
        "l2_normalize": lambda: _unary(rng, lambda x: T.l2_normalize(x, axis=-1), (3, 4)),
        "pad2d": lambda: _unary(rng, lambda x: T.pad2d(x, 2, 1), (1, 3, 2, 2)),
        "crop2d": lambda: _unary(rng, lambda x: T.crop2d(x, 2, 3), (1, 4, 4, 2)),
        "pixel_unshuffle": lambda: _unary(rng, T.pixel_unshuffle, (1, 4, 4, 2)),
        "pixel_shuffle": lambda: _unary(rng, T.pixel_shuffle, (1, 2, 2, 8)),
    }


def _composites(rng) -> dict[str, Callable[[], tuple]]:
    from . import swda
    from .diffusion import DenoiserConfig, DenoiserNet, ldm_loss, make_schedule
    from .model import ModelConfig, build_model
    from .pipeline import l1_loss, perceptual_loss

    def randomize(params: dict[str, Tensor], scale: float = 0.3) -> dict[str, Tensor]:
        # spread the weights so every path carries a non-trivial gradient
        for p in params.values():
            p.data = p.data + rng.uniform(-scale, scale, size=p.shape)
        return params

    def qkv_case():
        cfg = swda.BlockConfig(4, window_size=4)
        params = randomize(swda.init_block_params(cfg, rng))
        y = _leaf(rng, (1, 5, 6, 4), name="y")
        rs = [rng.standard_normal((1, 5, 6, 4)) for _ in range(3)]

        def f():
            q, k, v = swda.make_qkv(y, params, cfg)
            return T.add(T.add(_project(q, rs[0]), _project(k, rs[1])), _project(v, rs[2]))
        return f, {"y": y, "qkv.weight": params["qkv.weight"], "qkv_dw.weight": params["qkv_dw.weight"]}

    def channel_case():
        q, k, v = (_leaf(rng, (2, 16, 4), name=n) for n in "qkv")
        temp = _leaf(rng, (2,), 0.5, 2.0, "temperature")
        r = rng.standard_normal((2, 16, 4))
        return (lambda: _project(swda.channel_attention(q, k, v, temp), r)), [q, k, v, temp]

    def spatial_case():
        from .windowing import make_window_layout
        layout = make_window_layout(8, 8, 4, 2)
        mask = layout.mask()
        q, k, v = (_leaf(rng, (4, 16, 4), name=n) for n in "qkv")
        table = _leaf(rng, (49, 2), -0.5, 0.5, "rel_bias")
        r = rng.standard_normal((4, 16, 4))

        def f():
            bias = swda.gather_bias(table, 4)
            return _project(swda.spatial_attention(q, k, v, bias, mask), r)
        return f, [q, k, v, table]

    def block_case():
        cfg = swda.BlockConfig(4, window_size=4, shift=2)
        params = randomize(swda.init_block_params(cfg, rng))
        x = _leaf(rng, (8, 8, 4), name="x")
        r = rng.standard_normal((8, 8, 4))
        return (lambda: _project(swda.swda_block(x, params, cfg), r)), {"x": x, **params}

    def model_case():
        cfg = ModelConfig(in_channels=6, width=16, blocks=(1, 1, 1, 1), window_size=8, refinement=1)
        model = build_model(cfg, seed=int(rng.integers(1 << 31)))
        randomize(model.params, 0.2)
        x = _leaf(rng, (8, 8, 6), 0.0, 1.0, "x")
        r = rng.standard_normal((8, 8, 3))
        return (lambda: _project(model.forward(x), r)), {"x": x, **model.params}

    def ldm_case():
        net = DenoiserNet.build(DenoiserConfig(width=8, blocks=(1, 1), window_size=4, time_dim=8), seed=1)
        randomize(net.params)
        sched = make_schedule(10)
        z0, y, eps = (rng.standard_normal((8, 8, 3)) for _ in range(3))
        return (lambda: ldm_loss(net, z0, y, 5, eps, sched)), dict(net.params)

    def losses_case():
        pred = _leaf(rng, (6, 6, 3), 0.0, 1.0, "pred")
        target = rng.uniform(0.0, 1.0, size=(6, 6, 3))
        return (lambda: T.add(l1_loss(pred, target), perceptual_loss(pred, target))), [pred]

    return {
        "make_qkv": qkv_case,
        "channel_attention": channel_case,
        "spatial_attention": spatial_case,
        "swda_block": block_case,
        "tiny_model": model_case,
        "ldm_loss": ldm_case,
        "deblur_losses": losses_case,
    }


# coordinates sampled per parameter tensor for the network-sized checks
_MAX_COORDS = {"tiny_model": 4, "ldm_loss": 4}

SUITES = ("primitives", "composites", "all")


def run_suite(suite: str = "all", seed: int = 0, h: float = STEP) -> list[CheckResult]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")
    rng = np.random.default_rng(seed)
    plan = []
    if suite in ("primitives", "all"):
        plan += [(n, "primitive", PRIMITIVE_TOL, m) for n, m in _primitives(rng).items()]
    if suite in ("composites", "all"):
        plan += [(n, "composite", COMPOSITE_TOL, m) for n, m in _composites(rng).items()]
    results = []
    for name, kind, tol, make in plan:
        start = time.perf_counter()
        f, leaves = make()
        rep = gradcheck(f, leaves, h=h, tol=tol, max_coords=_MAX_COORDS.get(name), rng=rng)
        results.append(CheckResult(name, kind, rep, time.perf_counter() - start))
    return results


def summary(results: list[CheckResult]) -> str:
    ok = sum(r.passed for r in results)
    worst = max((r.report.max_error for r in results), default=math.nan)
    return f"{ok}/{len(results)} checks passed; worst rel err {worst:.2e}"
