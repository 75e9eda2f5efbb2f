"""Command-line surface: process one slide into an interchange directory.

Exit codes: 0 success, 1 usage error, 2 anything that prevents processing
(unreadable slide, bad raster, missing backbone weights or mask-generator
dependencies, output collisions).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from sam_adapter.emit import emit_slide
from sam_adapter.features import extract_features
from sam_adapter.patches import assign_patches, crop_patches, foreground_and_patch
from sam_adapter.raster import UNSEGMENTED, generate_raster, load_raster

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


def load_slide(path: str | Path) -> np.ndarray:
    """Read a slide as an array: .npy directly, anything else via Pillow."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"slide not found: {path}")
    if path.suffix == ".npy":
        return np.load(path)
    try:
        from PIL import Image
    except ImportError as exc:
        raise RuntimeError(
            f"reading {path.suffix} slides needs Pillow (pip install Pillow); "
            "alternatively save the slide as .npy"
        ) from exc
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _as_rgb_patches(patches: np.ndarray) -> np.ndarray:
    """Promote 2-D (mask/gray) patch crops to 3-channel uint8 for backbones."""
    if patches.ndim == 4:
        return patches
    if patches.dtype == bool:
        patches = patches.astype(np.uint8) * 255
    return np.repeat(patches[..., np.newaxis], 3, axis=3)


def cmd_process(args: argparse.Namespace) -> int:
    slide = load_slide(args.slide)

    if args.raster is not None:
        raster = load_raster(args.raster)
    else:
        raster = generate_raster(
            slide, downsample=args.downsample, checkpoint=args.sam_checkpoint
        )

    grid = foreground_and_patch(slide, patch_size=args.patch_size)
    if grid.n_patches == 0:
        raise ValueError(
            f"no {args.patch_size}x{args.patch_size} patches fit inside the "
            f"foreground of {args.slide}"
        )

    segment_of, segment_areas = assign_patches(grid, raster)
    patches = _as_rgb_patches(crop_patches(slide, grid))
    features = extract_features(patches, args.backbone)

    slide_id = args.slide_id or Path(args.slide).stem
    out = emit_slide(
        args.out,
        slide_id=slide_id,
        label=args.label,
        features=features,
        segment_of=segment_of,
        segment_areas=segment_areas,
        coords=grid.coords,
        force=args.force,
    )
    n_unseg = int((segment_of == UNSEGMENTED).sum())
    print(
        f"wrote {out}: {grid.n_patches} patches, {raster.n_segments} segments, "
        f"{n_unseg} unsegmented"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sam-adapter",
        description="Turn a slide plus a segmentation raster into a feature directory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("process", help="patch, assign, embed, and emit one slide")
    p.add_argument("--slide", required=True, help="slide image (.npy array or image file)")
    p.add_argument("--backbone", default="resnet50", help="feature backbone name")
    p.add_argument("--out", required=True, help="output slide directory")
    p.add_argument(
        "--raster",
        default=None,
        help="precomputed segment raster (.npz with 'labels' and 'downsample'); "
        "skips automatic mask generation",
    )
    p.add_argument("--label", type=int, default=0, help="slide class label (default 0)")
    p.add_argument("--slide-id", default=None, help="slide id (default: slide file stem)")
    p.add_argument("--patch-size", type=int, default=512, help="patch side (default 512)")
    p.add_argument(
        "--downsample",
        type=int,
        default=4,
        help="mask-generation downsample when no --raster is given (default 4)",
    )
    p.add_argument(
        "--sam-checkpoint", default=None, help="mask-generator checkpoint (no default)"
    )
    p.add_argument("--force", action="store_true", help="overwrite an existing slide dir")
    p.set_defaults(func=cmd_process)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
