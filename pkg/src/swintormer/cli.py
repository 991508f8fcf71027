"""``swintormer`` command line: deblur, prior, train-toy, cost, metrics, gradcheck.

Exit codes: 0 success, 1 usage, 2 runtime failure, 3 malformed image or weight file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checks, cost, metrics
from .config import ConfigError, RunConfig, apply_config, read_config
from .diffusion import DenoiserConfig, DenoiserNet, make_schedule
from .imageio import ImageBuffer, ImageFormatError, read_image, write_image
from .model import TOY, ModelConfig, WeightFormatError, WeightStore, build_model, load_weights, \
    model_from_store, save_weights
from .pipeline import DeblurJob, deblur, extract_prior, make_toy_pair, train_toy

log = logging.getLogger("swintormer")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_FORMAT = 0, 1, 2, 3
THREADS_ENV = "SWINTORMER_THREADS"
SCHEDULE_STEPS = 50  # diffusion steps T of the denoiser schedule
PRIOR_ENTRY = "prior"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _add_model_flags(p):
    d = ModelConfig()
    g = p.add_argument_group("model (used when no weights are given)")
    g.add_argument("--base-width", type=_positive, default=d.width)
    g.add_argument("--blocks", type=_int_list, default=d.blocks, help="blocks per level, e.g. 2,3,3,4")
    g.add_argument("--refinement", type=int, default=d.refinement)
    g.add_argument("--ffn-expansion", type=float, default=d.ffn_expansion)
    g.add_argument("--channel-split", type=float, default=d.channel_split,
                   help="fraction of channels given to channel attention")
    g.add_argument("--in-channels", type=_positive, default=None,
                   help="defaults to 6 with a prior and 3 without")
    g.add_argument("--attn-window", type=_positive, default=None,
                   help=f"attention window M (default {d.window_size})")


def _model_config(args, in_channels: int) -> ModelConfig:
    return ModelConfig(in_channels=args.in_channels or in_channels, width=args.base_width,
                       blocks=args.blocks, window_size=args.attn_window or ModelConfig().window_size,
                       refinement=args.refinement, ffn_expansion=args.ffn_expansion,
                       channel_split=args.channel_split)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="swintormer", description="Memory-efficient tiled image deblurring.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", metavar="FILE", help="key = value settings; flags override them")
        return p

    p = command("deblur", "deblur an image with overlapping tiles")
    p.add_argument("--input", help="blurry PPM (P6), 8- or 16-bit")
    p.add_argument("--output", help="where to write the PPM result (same bit depth as the input)")
    p.add_argument("--weights", help="SWTW weight file; a seeded model is built when omitted")
    p.add_argument("--tile", type=_positive, default=512)
    p.add_argument("--shift", type=_positive, default=220, help="tile stride")
    prior = p.add_mutually_exclusive_group()
    prior.add_argument("--prior", metavar="PATH", help="precomputed prior (PPM or SWTW with a 'prior' entry)")
    prior.add_argument("--diffuse", action="store_true", help="sample the prior with the denoiser")
    p.add_argument("--denoiser", help="denoiser SWTW file for --diffuse (seeded when omitted)")
    p.add_argument("--steps", type=_positive, default=50, help="sampling steps for --diffuse")
    p.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=_positive, default=1, help="tiles per forward pass")
    p.add_argument("--threads", type=_positive, default=_default_threads(),
                   help=f"worker threads over tile batches (default ${THREADS_ENV} or 1)")
    _add_model_flags(p)
    p.set_defaults(func=cmd_deblur)

    p = command("prior", "sample the diffusion prior for an image")
    p.add_argument("--input")
    p.add_argument("--denoiser", help="denoiser SWTW file (seeded when omitted)")
    p.add_argument("--steps", type=_positive, default=50)
    p.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=".swtw keeps the raw floats; anything else is written as a PPM")
    p.set_defaults(func=cmd_prior)

    p = command("train-toy", "train the toy model on a synthetic blurred pair")
    p.add_argument("--loss", choices=("l1", "perceptual"), default="l1")
    p.add_argument("--steps", type=_positive, default=500)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_positive, default=64, help="side of the synthetic image")
    p.add_argument("--out", help="write the trained weights here")
    p.add_argument("--curve", help="write the loss curve as CSV")
    p.set_defaults(func=cmd_train_toy)

    p = command("cost", "estimate MACs and peak activation memory")
    p.add_argument("--height", type=_positive, default=1680)
    p.add_argument("--width", type=_positive, default=1120)
    p.add_argument("--tile", type=_positive, default=512)
    p.add_argument("--shift", type=_positive, default=220)
    p.add_argument("--batch", type=_positive, default=1)
    p.add_argument("--precision", type=int, choices=sorted(cost.PRECISION_BYTES), default=32)
    p.add_argument("--csv", metavar="PATH", help="also write the report as CSV")
    _add_model_flags(p)
    p.set_defaults(func=cmd_cost)

    p = command("metrics", "PSNR, SSIM and MAE between two images")
    p.add_argument("--ref")
    p.add_argument("--test")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=None,
                   help="defaults to the reference's bit depth")
    p.set_defaults(func=cmd_metrics)

    p = command("gradcheck", "finite-difference gradient checks")
    p.add_argument("--suite", choices=checks.SUITES, default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    parser.commands = sub.choices
    return parser


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError("missing " + ", ".join("--" + n.replace("_", "-") for n in missing))


# subcommands -----------------------------------------------------------------------

def _load_denoiser(args) -> DenoiserNet:
    if args.denoiser:
        return DenoiserNet.from_store(load_weights(args.denoiser))
    return DenoiserNet.build(DenoiserConfig(), seed=args.seed)


def _sample_prior(image: np.ndarray, args) -> np.ndarray:
    net = _load_denoiser(args)
    if args.sampler == "ddpm":
        sched, steps = make_schedule(args.steps), None
    else:
        sched, steps = make_schedule(max(SCHEDULE_STEPS, args.steps)), args.steps
    return extract_prior(image, net, sched, steps, args.eta, args.seed, args.sampler)


def _read_rgb(path) -> ImageBuffer:
    img = read_image(path)
    if img.shape[2] != 3:
        raise ImageFormatError(f"{path}: expected an RGB (P6) image, got {img.shape[2]} channel(s)")
    return img


def _load_prior(path, shape) -> np.ndarray:
    if str(path).endswith(".swtw"):
        store = load_weights(path)
        if PRIOR_ENTRY not in store:
            raise WeightFormatError(f"{path}: no '{PRIOR_ENTRY}' entry")
        prior = np.asarray(store[PRIOR_ENTRY], dtype=np.float64)
    else:
        prior = read_image(path).to_float()
    if prior.ndim != 3 or prior.shape[:2] != shape[:2]:
        raise UsageError(f"prior shape {prior.shape} does not match image {shape}")
    return prior


def cmd_deblur(args) -> int:
    _require(args, "input", "output")
    img = _read_rgb(args.input)
    x = img.to_float()
    prior = None
    if args.prior:
        prior = _load_prior(args.prior, x.shape)
    elif args.diffuse:
        prior = _sample_prior(x, args)
    in_channels = 3 + (prior.shape[-1] if prior is not None else 0)
    if args.weights:
        model = model_from_store(load_weights(args.weights))
        if args.attn_window is not None and args.attn_window != model.cfg.window_size:
            raise UsageError(f"--attn-window {args.attn_window} conflicts with the weights "
                             f"(window {model.cfg.window_size})")
    else:
        model = build_model(_model_config(args, in_channels), seed=args.seed)
    start = time.perf_counter()
    out = deblur(DeblurJob(x, model, prior, args.tile, args.shift, args.batch, args.threads))
    write_image(args.output, ImageBuffer.from_float(out, img.bit_depth))
    log.info("deblurred %s in %.2fs", args.input, time.perf_counter() - start)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_prior(args) -> int:
    _require(args, "input", "out")
    x = _read_rgb(args.input)
    z0 = _sample_prior(x.to_float(), args)
    if str(args.out).endswith(".swtw"):
        store = WeightStore()
        store[PRIOR_ENTRY] = z0
        save_weights(store, args.out)
    else:
        write_image(args.out, ImageBuffer.from_float(z0, x.bit_depth))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    blurry, sharp = make_toy_pair(size=args.size, seed=args.seed)
    model = build_model(TOY, seed=args.seed)
    start = time.perf_counter()
    curve = train_toy(model, [(blurry, sharp, blurry)], args.loss, args.steps, args.lr, seed=args.seed)
    ratio = curve[-1] / curve[0]
    print(f"loss {args.loss}: initial {curve[0]:.6g}  final {curve[-1]:.6g}  ratio {ratio:.4f}  "
          f"({len(curve)} steps, {time.perf_counter() - start:.1f}s)")
    if args.curve:
        Path(args.curve).write_text("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
    if args.out:
        save_weights(model.state(), args.out)
    return EXIT_OK


def cmd_cost(args) -> int:
    cfg = _model_config(args, 6)
    report = cost.estimate(cfg, args.height, args.width, args.tile, args.shift, args.precision, args.batch)
    print(report.table())
    if args.csv:
        Path(args.csv).write_text(report.csv())
    return EXIT_OK


def cmd_metrics(args) -> int:
    _require(args, "ref", "test")
    ref, test = read_image(args.ref), read_image(args.test)
    if ref.shape != test.shape:
        raise UsageError(f"images differ in shape: {ref.shape} vs {test.shape}")
    depth = args.bit_depth or ref.bit_depth
    print(metrics.evaluate(ref.data, test.data, depth).format())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = checks.run_suite(args.suite, seed=args.seed)
    for r in results:
        print(r.line())
    print(checks.summary(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# entry point -----------------------------------------------------------------------

def parse(argv=None) -> argparse.Namespace:
    """Parse flags, folding in ``--config`` values (flags win)."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a command is required")
    if args.config:
        try:
            apply_config(parser.commands[args.command], read_config(args.config))
        except OSError as exc:
            parser.error(f"cannot read config: {exc}")
        except ConfigError as exc:
            parser.error(str(exc))
        args = parser.parse_args(argv)
    if getattr(args, "prior", None) and getattr(args, "diffuse", False):
        parser.error("--prior and --diffuse are mutually exclusive")
    return args


def run_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig.from_namespace(args, skip=("command", "config", "func", "verbose"))


def main(argv=None) -> int:
    try:
        args = parse(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("settings:\n%s", run_config(args).to_text())
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"swintormer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ImageFormatError, WeightFormatError) as exc:
        print(f"swintormer {args.command}: bad file: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as exc:
        print(f"swintormer {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"swintormer {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
