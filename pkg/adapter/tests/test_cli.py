"""End-to-end command-line runs against fixture rasters and slides."""

import json

import numpy as np
import pytest

from sam_adapter.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from sam_adapter.raster import save_raster


@pytest.fixture
def slide_npy(tmp_path, tissue_slide):
    path = tmp_path / "slide.npy"
    np.save(path, tissue_slide)
    return path


@pytest.fixture
def raster_npz(tmp_path, quadrant_raster):
    path = tmp_path / "raster.npz"
    save_raster(path, quadrant_raster)
    return path


def process_args(slide, raster, out, *extra):
    return [
        "process",
        "--slide", str(slide),
        "--backbone", "fixture",
        "--raster", str(raster),
        "--out", str(out),
        *extra,
    ]


class TestProcess:
    def test_writes_a_parseable_slide_directory(self, tmp_path, slide_npy, raster_npz, capsys):
        out = tmp_path / "out" / "slide"
        code = main(process_args(slide_npy, raster_npz, out, "--label", "1"))
        assert code == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["slide_id"] == "slide"
        assert manifest["label"] == 1
        assert manifest["N"] == 4
        assert manifest["D_in"] == 1024
        assert manifest["segment_of"] == [1, 2, 3, -1]
        assert len((out / "features.bin").read_bytes()) == 4 * 4 * 1024
        assert "4 patches, 3 segments, 1 unsegmented" in capsys.readouterr().out

    def test_slide_id_flag_overrides_file_stem(self, tmp_path, slide_npy, raster_npz):
        out = tmp_path / "named"
        code = main(process_args(slide_npy, raster_npz, out, "--slide-id", "case_17"))
        assert code == EXIT_OK
        assert json.loads((out / "manifest.json").read_text())["slide_id"] == "case_17"

    def test_second_run_needs_force(self, tmp_path, slide_npy, raster_npz, capsys):
        out = tmp_path / "dup"
        assert main(process_args(slide_npy, raster_npz, out)) == EXIT_OK
        assert main(process_args(slide_npy, raster_npz, out)) == EXIT_DATA
        assert "force" in capsys.readouterr().err
        assert main(process_args(slide_npy, raster_npz, out, "--force")) == EXIT_OK

    def test_image_slide_via_pillow(self, tmp_path, raster_npz, quadrant_raster, capsys):
        Image = pytest.importorskip("PIL.Image")
        gen = np.random.default_rng(1)
        pixels = gen.integers(30, 120, size=(1024, 1024, 3)).astype(np.uint8)
        path = tmp_path / "slide.png"
        Image.fromarray(pixels).save(path)
        out = tmp_path / "png_out"
        assert main(process_args(path, raster_npz, out)) == EXIT_OK
        assert json.loads((out / "manifest.json").read_text())["N"] == 4

    def test_missing_slide_fails_with_data_exit(self, tmp_path, raster_npz, capsys):
        code = main(process_args(tmp_path / "nope.npy", raster_npz, tmp_path / "o"))
        assert code == EXIT_DATA
        assert "slide not found" in capsys.readouterr().err

    def test_missing_raster_file_fails(self, tmp_path, slide_npy, capsys):
        code = main(process_args(slide_npy, tmp_path / "nope.npz", tmp_path / "o"))
        assert code == EXIT_DATA
        assert "raster" in capsys.readouterr().err

    def test_unknown_backbone_fails_and_lists_names(self, tmp_path, slide_npy, raster_npz, capsys):
        args = process_args(slide_npy, raster_npz, tmp_path / "o")
        args[args.index("fixture")] = "vgg"
        assert main(args) == EXIT_DATA
        assert "supported: fixture, resnet50" in capsys.readouterr().err

    def test_all_background_slide_fails(self, tmp_path, raster_npz, capsys):
        path = tmp_path / "blank.npy"
        np.save(path, np.full((1024, 1024, 3), 255, dtype=np.uint8))
        assert main(process_args(path, raster_npz, tmp_path / "o")) == EXIT_DATA
        assert "no 512x512 patches" in capsys.readouterr().err

    def test_without_raster_needs_mask_generator(self, tmp_path, slide_npy, capsys):
        code = main(
            ["process", "--slide", str(slide_npy), "--backbone", "fixture",
             "--out", str(tmp_path / "o")]
        )
        assert code == EXIT_DATA
        err = capsys.readouterr().err
        assert "segment_anything" in err or "checkpoint" in err
        assert "raster" in err  # must point at the offline alternative

    def test_smaller_patch_size(self, tmp_path, raster_npz, quadrant_raster):
        gen = np.random.default_rng(2)
        path = tmp_path / "s.npy"
        np.save(path, gen.integers(20, 100, size=(1024, 1024, 3)).astype(np.uint8))
        out = tmp_path / "small"
        code = main(process_args(path, raster_npz, out, "--patch-size", "256"))
        assert code == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["N"] == 16
        # every 256-px patch sits fully inside one quadrant: none unsegmented
        # except the four in the background quadrant
        assert manifest["segment_of"].count(-1) == 4


class TestUsage:
    def test_no_arguments_is_usage_error(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_subcommand_is_usage_error(self):
        assert main(["transmogrify"]) == EXIT_USAGE

    def test_missing_required_flag_is_usage_error(self):
        assert main(["process", "--slide", "x.npy"]) == EXIT_USAGE

    def test_help_exits_clean(self):
        assert main(["--help"]) == EXIT_OK
        assert main(["process", "--help"]) == EXIT_OK
