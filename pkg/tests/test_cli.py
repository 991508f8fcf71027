import numpy as np
import pytest

from swintormer.cli import EXIT_FORMAT, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, main, parse
from swintormer.imageio import ImageBuffer, read_image, write_image
from swintormer.model import WeightStore, load_weights, save_weights

SEEDED = ["--base-width", "8", "--blocks", "1,1", "--refinement", "0", "--attn-window", "4"]


@pytest.fixture
def image(tmp_path, rng):
    path = tmp_path / "in.ppm"
    write_image(path, ImageBuffer(rng.integers(0, 256, (12, 10, 3)), 8))
    return path


@pytest.fixture
def weights(tmp_path, perturbed_model):
    path = tmp_path / "w.swtw"
    save_weights(perturbed_model.state(), path)
    return path


class TestDefaults:
    def test_deblur_defaults(self):
        args = parse(["deblur"])
        assert (args.tile, args.shift, args.steps, args.attn_window) == (512, 220, 50, None)

    def test_threads_from_environment(self, monkeypatch):
        monkeypatch.setenv("SWINTORMER_THREADS", "3")
        assert build_parser().parse_args(["deblur"]).threads == 3

    def test_all_subcommands_present(self):
        assert set(build_parser().commands) == {"deblur", "prior", "train-toy", "cost", "metrics", "gradcheck"}


class TestUsageErrors:
    @pytest.mark.parametrize("argv", [[], ["deblur", "--bogus"], ["cost", "--precision", "8"],
                                      ["deblur", "--input", "a"], ["frobnicate"],
                                      ["deblur", "--prior", "p.ppm", "--diffuse"]])
    def test_exit_one(self, argv, capsys):
        assert main(argv) == EXIT_USAGE
        assert capsys.readouterr().err

    def test_window_conflicts_with_weights(self, image, weights, tmp_path):
        argv = ["deblur", "--input", str(image), "--output", str(tmp_path / "o.ppm"), "--weights", str(weights),
                "--prior", str(image), "--attn-window", "8"]
        assert main(argv) == EXIT_USAGE


class TestErrors:
    def test_bad_image_is_format_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"P6\n4 4\n255\n" + bytes(5))
        assert main(["metrics", "--ref", str(bad), "--test", str(bad)]) == EXIT_FORMAT

    def test_bad_weights_is_format_error(self, image, tmp_path):
        w = tmp_path / "w.swtw"
        w.write_bytes(b"NOPE" + bytes(8))
        argv = ["deblur", "--input", str(image), "--output", str(tmp_path / "o.ppm"), "--weights", str(w)]
        assert main(argv) == EXIT_FORMAT

    def test_missing_file_is_runtime_error(self, tmp_path):
        assert main(["metrics", "--ref", str(tmp_path / "nope.ppm"), "--test", "x"]) == EXIT_RUNTIME

    def test_prior_without_matching_channels(self, image, tmp_path):
        argv = ["deblur", "--input", str(image), "--output", str(tmp_path / "o.ppm"), "--in-channels", "6", *SEEDED]
        assert main(argv) == EXIT_RUNTIME


class TestCommands:
    def test_metrics_identical(self, image, capsys):
        assert main(["metrics", "--ref", str(image), "--test", str(image)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "psnr=inf" in out and "ssim=1.000000" in out

    def test_cost_default_reports_28_tiles(self, tmp_path, capsys):
        csv = tmp_path / "c.csv"
        assert main(["cost", "--csv", str(csv)]) == EXIT_OK
        assert any(line.split() == ["tiles", "28"] for line in capsys.readouterr().out.splitlines())
        assert csv.read_text().startswith("height,width")

    def test_seeded_model_without_prior_is_identity(self, image, tmp_path):
        out = tmp_path / "o.ppm"
        assert main(["deblur", "--input", str(image), "--output", str(out), "--tile", "8", "--shift", "4",
                     *SEEDED]) == EXIT_OK
        assert out.read_bytes() == image.read_bytes()

    def test_prior_file_paths(self, image, weights, tmp_path):
        z = tmp_path / "z.swtw"
        assert main(["prior", "--input", str(image), "--steps", "2", "--out", str(z)]) == EXIT_OK
        assert load_weights(z)["prior"].shape == (12, 10, 3)
        outs = []
        for prior in (z, image):
            out = tmp_path / f"o_{prior.suffix[1:]}.ppm"
            assert main(["deblur", "--input", str(image), "--output", str(out), "--weights", str(weights),
                         "--prior", str(prior), "--tile", "8", "--shift", "4"]) == EXIT_OK
            outs.append(read_image(out))
        assert outs[0].shape == outs[1].shape == (12, 10, 3)

    def test_prior_as_image(self, image, tmp_path):
        out = tmp_path / "z.ppm"
        assert main(["prior", "--input", str(image), "--steps", "2", "--sampler", "ddpm", "--out", str(out)]) == 0
        assert read_image(out).shape == (12, 10, 3)

    def test_sixteen_bit_output_keeps_depth(self, tmp_path, weights, rng):
        src = tmp_path / "in16.ppm"
        write_image(src, ImageBuffer(rng.integers(0, 65536, (8, 8, 3)), 16))
        out = tmp_path / "o16.ppm"
        assert main(["deblur", "--input", str(src), "--output", str(out), "--weights", str(weights),
                     "--diffuse", "--steps", "2"]) == EXIT_OK
        assert read_image(out).bit_depth == 16

    def test_train_toy_writes_outputs(self, tmp_path, capsys):
        curve, w = tmp_path / "curve.csv", tmp_path / "toy.swtw"
        assert main(["train-toy", "--steps", "3", "--size", "16", "--curve", str(curve), "--out", str(w)]) == 0
        assert len(curve.read_text().splitlines()) == 4
        assert isinstance(load_weights(w), WeightStore)
        assert "ratio" in capsys.readouterr().out

    def test_gradcheck_primitives(self, capsys):
        assert main(["gradcheck", "--suite", "primitives"]) == EXIT_OK
        assert "checks passed" in capsys.readouterr().out

    def test_config_file(self, image, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"input = {image}\noutput = {tmp_path / 'o.ppm'}\ntile = 8 # small\nshift = 4\n"
                       + "".join(f"{k.lstrip('-')} = {v}\n" for k, v in zip(SEEDED[::2], SEEDED[1::2])))
        assert main(["deblur", "--config", str(cfg)]) == EXIT_OK
        assert np.array_equal(read_image(tmp_path / "o.ppm").data, read_image(image).data)
