"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py``; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import math
import subprocess
import sys
import time
from itertools import permutations

import numpy as np
import pytest

from swintormer import checks, cost, swda
from swintormer.diffusion import DenoiserConfig, DenoiserNet, ddim_sample, make_schedule, q_sample
from swintormer.imageio import ImageBuffer, write_image
from swintormer.metrics import psnr, ssim
from swintormer.model import TOY, ModelConfig, build_model, save_weights
from swintormer.pipeline import DeblurJob, deblur, l1_loss, make_toy_pair, perceptual_loss, train_toy
from swintormer.tensor import Tensor, no_grad
from swintormer.windowing import make_tile_grid, make_window_layout, window_partition, window_reverse

from conftest import instrumented_macs


def closed_form_tiles(h, w, tile, stride):
    def axis(n):
        return 1 if n <= tile else math.ceil((n - tile) / stride) + 1
    return axis(h) * axis(w)


@pytest.mark.criterion(1, "gradient suite (primitives < 1e-6, composites < 1e-5, h=1e-5, float64, < 2 min)")
def test_gradient_suite():
    start = time.perf_counter()
    results = checks.run_suite("all", h=1e-5)
    elapsed = time.perf_counter() - start
    print()
    for r in results:
        print(r.line())
    print(checks.summary(results), f"in {elapsed:.1f}s")
    kinds = {r.kind for r in results}
    assert kinds == {"primitive", "composite"}
    assert {r.name for r in results} >= {"swda_block", "tiny_model"}
    for r in results:
        assert r.report.tol == (1e-6 if r.kind == "primitive" else 1e-5)
        assert r.passed, r.line()
    assert elapsed < 120


@pytest.mark.criterion(2, "windowing oracles (200 roundtrips, tile counts incl. 28, exact identity deblur, < 1 min)")
def test_windowing_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 40, size=2))
        m = int(rng.integers(1, 10))
        shift = int(rng.integers(0, m))
        x = rng.standard_normal((h, w, int(rng.integers(1, 5))))
        layout = make_window_layout(h, w, m, shift)
        assert np.array_equal(window_reverse(window_partition(Tensor(x), layout), layout).data, x)

    assert len(make_tile_grid(1680, 1120, 512, 220)) == 28
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 3000, size=2))
        tile = int(rng.integers(1, 700))
        stride = int(rng.integers(1, tile + 1))
        assert len(make_tile_grid(h, w, tile, stride)) == closed_form_tiles(h, w, tile, stride)

    model = build_model(ModelConfig(width=8, blocks=(1, 1), window_size=4, refinement=1), seed=0)
    for h, w, tile, stride, batch in [(40, 33, 16, 7, 1), (25, 25, 8, 8, 3), (12, 30, 64, 20, 2)]:
        img, prior = rng.uniform(size=(h, w, 3)), rng.uniform(size=(h, w, 3))
        out = deblur(DeblurJob(img, model, prior, tile, stride, batch))
        assert np.array_equal(out, img)
    assert time.perf_counter() - start < 60


@pytest.mark.criterion(3, "diffusion oracles (tilde_beta, composition, inversion, DDIM determinism, MC 3 sigma, < 2 min)")
def test_diffusion_oracles():
    start = time.perf_counter()
    sched = make_schedule(50)
    assert sched.tilde_beta[0] == 0.0

    # composing q(z_t | z_{t-1}) step by step gives the closed-form marginal
    mean_coef, var = 1.0, 0.0
    for t in range(1, sched.T + 1):
        a = sched.alpha(t)
        mean_coef, var = math.sqrt(a) * mean_coef, a * var + (1.0 - a)
        assert abs(mean_coef - math.sqrt(sched.abar(t))) < 1e-12
        assert abs(var - (1.0 - sched.abar(t))) < 1e-12

    rng = np.random.default_rng(3)
    z0, eps = rng.standard_normal((8, 8, 3)), rng.standard_normal((8, 8, 3))
    for t in range(1, sched.T + 1):
        ab = sched.abar(t)
        z0_hat = (q_sample(z0, t, eps, sched) - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        assert np.max(np.abs(z0_hat - z0)) < 1e-12

    net = DenoiserNet.build(DenoiserConfig(width=8, blocks=(1, 1), window_size=4, time_dim=8), seed=1)
    zT, cond = rng.standard_normal((8, 8, 3)), rng.uniform(size=(8, 8, 3))
    runs = [ddim_sample(zT, net, cond, sched, 10, 0.0, seed=s).tobytes() for s in (0, 0, 99)]
    assert runs[0] == runs[1] == runs[2]

    n = 100_000
    z0_scalar = 0.7
    for t in (1, 10, 25, 50):
        samples = q_sample(np.full(n, z0_scalar), t, rng.standard_normal(n), sched)
        mu, sigma2 = math.sqrt(sched.abar(t)) * z0_scalar, 1.0 - sched.abar(t)
        assert abs(samples.mean() - mu) < 3 * math.sqrt(sigma2 / n)
        assert abs(samples.var(ddof=1) - sigma2) < 3 * sigma2 * math.sqrt(2.0 / (n - 1))
    assert time.perf_counter() - start < 120


@pytest.mark.criterion(4, "attention properties (row-stochastic, masked zeros, channel equivariance on M=4, identical windows)")
def test_attention_properties():
    rng = np.random.default_rng(4)
    layout = make_window_layout(8, 8, 4, 2)
    mask = layout.mask()
    q, k, v = (rng.standard_normal((4, 16, 8)) for _ in range(3))
    bias = swda.gather_bias(Tensor(rng.standard_normal((49, 2)) * 0.5), 4)
    _, a_s = swda.spatial_attention(Tensor(q), Tensor(k), Tensor(v), bias, mask, return_attn=True)
    _, a_c = swda.channel_attention(Tensor(q), Tensor(k), Tensor(v), Tensor(np.array([0.8, 1.7])), return_attn=True)
    for a in (a_s.data, a_c.data):
        assert np.max(np.abs(a.sum(-1) - 1.0)) <= 1e-12
    assert not mask.all()
    assert np.all(a_s.data[np.broadcast_to(~mask[:, None], a_s.shape)] == 0.0)

    # permuting the 16 tokens of an M=4 window permutes the channel-attention output the same way
    temp = Tensor(np.array([1.3]))
    qw, kw, vw = (rng.standard_normal((1, 16, 4)) for _ in range(3))
    base = swda.channel_attention(Tensor(qw), Tensor(kw), Tensor(vw), temp).data
    perms = [np.array(p) for p in permutations(range(4))]  # all 24 row orders of the 4x4 window
    perms += [np.roll(np.arange(16), s) for s in range(16)]
    perms += [rng.permutation(16) for _ in range(200)]
    for p in perms:
        if p.size == 4:
            p = (p[:, None] * 4 + np.arange(4)[None, :]).reshape(-1)
        out = swda.channel_attention(Tensor(qw[:, p]), Tensor(kw[:, p]), Tensor(vw[:, p]), temp).data
        assert np.max(np.abs(out - base[:, p])) < 1e-12

    # windows with identical contents produce identical spatial-attention outputs
    win_q, win_k, win_v = (rng.standard_normal((16, 4)) for _ in range(3))
    stack = [np.stack([x, rng.standard_normal((16, 4)), x]) for x in (win_q, win_k, win_v)]
    out = swda.spatial_attention(*(Tensor(s) for s in stack), swda.gather_bias(
        Tensor(rng.standard_normal((49, 1))), 4)).data
    assert np.array_equal(out[0], out[2])


@pytest.mark.criterion(5, "toy training reaches 10% of initial loss in 500 steps (L1 and perceptual), deterministic, < 5 min")
def test_toy_training():
    start = time.perf_counter()
    blurry, sharp = make_toy_pair()
    pairs = [(blurry, sharp, blurry)]
    x, y = Tensor(np.concatenate([blurry, blurry], -1)[None]), sharp[None]
    print()
    for kind, loss_fn in (("l1", l1_loss), ("perceptual", perceptual_loss)):
        model = build_model(TOY, seed=0)
        curve = train_toy(model, pairs, kind, steps=500, lr=1e-2, seed=0)
        with no_grad():
            pred = model.forward(x)
            final = loss_fn(pred, y).item()
            pixel = l1_loss(pred, y).item() / l1_loss(Tensor(blurry[None]), y).item()
        print(f"{kind}: initial {curve[0]:.5g} final {final:.5g} ratio {final / curve[0]:.4f} "
              f"(pixel L1 ratio {pixel:.3f})")
        assert final <= 0.1 * curve[0]
    short = [train_toy(build_model(TOY, seed=s), pairs, "l1", steps=10, seed=s) for s in (1, 1, 2)]
    assert short[0] == short[1] and short[0] != short[2]
    assert time.perf_counter() - start < 300


COST_MATRIX = [
    (ModelConfig(in_channels=6, width=8, blocks=(1, 1), window_size=4, refinement=0), 1, 8, 8),
    (ModelConfig(in_channels=6, width=8, blocks=(1, 1), window_size=4, refinement=0), 2, 8, 8),
    (ModelConfig(in_channels=6, width=8, blocks=(1, 1), window_size=4, refinement=1), 1, 9, 7),
    (ModelConfig(in_channels=3, width=4, blocks=(1,), window_size=2, refinement=0), 1, 5, 5),
    (ModelConfig(in_channels=6, width=8, blocks=(1, 1, 1), window_size=4, channel_split=0.25), 1, 12, 8),
    (ModelConfig(in_channels=6, width=8, blocks=(1, 1), window_size=4, channel_split=0.0), 1, 8, 8),
    (ModelConfig(in_channels=6, width=8, blocks=(1, 1), window_size=4, channel_split=1.0), 1, 8, 8),
    (ModelConfig(in_channels=6, width=8, blocks=(1, 1), window_size=4, ffn_expansion=2.0), 1, 6, 10),
    (ModelConfig(in_channels=6, width=8, blocks=(2, 1), window_size=4, refinement=2), 1, 10, 10),
    (ModelConfig(in_channels=6, width=16, blocks=(1, 1, 1, 1), window_size=8, refinement=1), 1, 16, 16),
    (ModelConfig(in_channels=6, width=8, blocks=(1, 2), window_size=8, refinement=0), 1, 8, 12),
    (ModelConfig(in_channels=6, width=8, blocks=(1, 2), window_size=4, refinement=1), 3, 6, 10),
]


@pytest.mark.criterion(6, "cost model (analytic = instrumented on 12 configs, stride 110 gives 84 tiles and 3x MACs, tiled peak lower)")
def test_cost_model():
    for cfg, b, h, w in COST_MATRIX:
        assert cost.forward_macs(cfg, b, h, w) == instrumented_macs(cfg, b, h, w), (cfg, b, h, w)
    default = ModelConfig()
    r220 = cost.estimate(default, 1680, 1120, 512, 220)
    r110 = cost.estimate(default, 1680, 1120, 512, 110)
    assert (r220.tiles, r110.tiles) == (28, 84)
    assert r110.macs_total == 3 * r220.macs_total
    whole = cost.estimate(default, 1680, 1120, 1680, 220)
    assert whole.tiles == 1
    assert r220.peak_activation_bytes < whole.peak_activation_bytes
    print(f"\n{r220.table()}\nwhole-image peak {whole.peak_activation_bytes:,} B")


@pytest.mark.criterion(7, "metrics (psnr(x, x+10) closed form on constant 8-bit, ssim(x,x)=1, bit depth via MAX)")
def test_metrics():
    x = np.full((32, 32, 3), 120, dtype=np.int64)
    value = psnr(x, x + 10)
    print(f"\npsnr(x, x+10) = {value:.6f} dB")
    assert abs(value - 20 * math.log10(255 / 10)) <= 1e-3
    rng = np.random.default_rng(7)
    img = rng.integers(0, 256, (32, 32, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    noisy = np.clip(img + rng.integers(-12, 13, img.shape), 0, 255)
    gap = psnr(img, noisy, 16) - psnr(img, noisy, 8)
    assert gap == pytest.approx(20 * math.log10(65535 / 255), abs=1e-9)
    assert ssim(img * 257, noisy * 257, 16) == pytest.approx(ssim(img, noisy, 8), abs=1e-12)
    assert ssim(img, noisy, 16) > ssim(img, noisy, 8)


@pytest.mark.criterion(8, "CLI deblur is byte-identical across runs and --threads 1/4")
def test_cli_reproducible(tmp_path, perturbed_model):
    rng = np.random.default_rng(8)
    src = tmp_path / "in.ppm"
    write_image(src, ImageBuffer(rng.integers(0, 256, (20, 18, 3)), 8))
    weights = tmp_path / "w.swtw"
    save_weights(perturbed_model.state(), weights)
    outputs = []
    for run, threads in enumerate([1, 1, 4, 4]):
        out = tmp_path / f"out{run}.ppm"
        cmd = [sys.executable, "-m", "swintormer", "deblur", "--input", str(src), "--output", str(out),
               "--weights", str(weights), "--diffuse", "--steps", "3", "--seed", "5",
               "--tile", "8", "--shift", "5", "--batch", "2", "--threads", str(threads)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outputs.append(out.read_bytes())
    assert len(set(outputs)) == 1
    assert outputs[0] != src.read_bytes()
