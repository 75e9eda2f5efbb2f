"""Foreground detection, patch grids, and patch-to-segment voting.

A slide is tiled with non-overlapping square patches anchored at the origin;
a patch is kept only when its whole footprint lies on tissue foreground.
Each kept patch is then voted into the raster segment that covers the most
of its footprint, with safeguards for patches that mostly miss every segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sam_adapter.raster import SegmentRaster, UNSEGMENTED

# A patch must overlap its winning segment by at least this fraction of its
# own footprint; below that it is left unsegmented rather than mislabeled.
MIN_OVERLAP_FRACTION = 0.2

# RGB pixels with mean intensity at or above this count as background
# (slide scanners render empty glass near-white).
DEFAULT_INTENSITY_THRESHOLD = 220.0


@dataclass(frozen=True)
class PatchGrid:
    """Locations of same-sized square patches on one slide.

    Attributes:
        coords: int array (N, 2) of (x, y) top-left corners in full-res
            pixels; x varies fastest in scan order.
        patch_size: side length of every patch, in pixels.
        slide_shape: (height, width) of the slide the grid was laid on.
    """

    coords: np.ndarray
    patch_size: int
    slide_shape: tuple[int, int]

    def __post_init__(self) -> None:
        coords = np.asarray(self.coords, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (N, 2), got {coords.shape}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        h, w = self.slide_shape
        if coords.size:
            if coords.min() < 0:
                raise ValueError("patch coordinates must be non-negative")
            if (coords[:, 0] + self.patch_size > w).any() or (
                coords[:, 1] + self.patch_size > h
            ).any():
                raise ValueError(
                    f"patches extend past the slide: size {self.patch_size} on "
                    f"shape {self.slide_shape}"
                )
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "slide_shape", (int(h), int(w)))

    @property
    def n_patches(self) -> int:
        return self.coords.shape[0]


def foreground_mask(
    slide: np.ndarray, intensity_threshold: float = DEFAULT_INTENSITY_THRESHOLD
) -> np.ndarray:
    """Boolean tissue mask for a slide image.

    Accepts an (H, W, 3) RGB image, an (H, W) grayscale image, or an already
    boolean (H, W) mask, which is passed through unchanged.
    """
    slide = np.asarray(slide)
    if slide.ndim == 2 and slide.dtype == bool:
        return slide
    if slide.ndim == 3 and slide.shape[2] == 3:
        gray = slide.astype(np.float64).mean(axis=2)
    elif slide.ndim == 2:
        gray = slide.astype(np.float64)
    else:
        raise ValueError(
            f"slide must be (H, W, 3) RGB, (H, W) gray, or (H, W) bool, "
            f"got shape {slide.shape} dtype {slide.dtype}"
        )
    return gray < intensity_threshold


def foreground_and_patch(
    slide: np.ndarray,
    patch_size: int = 512,
    intensity_threshold: float = DEFAULT_INTENSITY_THRESHOLD,
) -> PatchGrid:
    """Tile the slide and keep the patches lying entirely on foreground.

    The grid is anchored at (0, 0) with stride equal to ``patch_size``; a
    position is kept only if every pixel of its footprint is foreground.
    Scan order is row-major: y increases slowly, x fast.
    """
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    mask = foreground_mask(slide, intensity_threshold)
    h, w = mask.shape
    coords = []
    for y in range(0, h - patch_size + 1, patch_size):
        for x in range(0, w - patch_size + 1, patch_size):
            if mask[y : y + patch_size, x : x + patch_size].all():
                coords.append((x, y))
    return PatchGrid(
        coords=np.asarray(coords, dtype=np.int64).reshape(-1, 2),
        patch_size=patch_size,
        slide_shape=(h, w),
    )


def crop_patches(slide: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Stack the pixel crops for every patch in the grid.

    Returns (N, patch_size, patch_size, C) for channeled slides or
    (N, patch_size, patch_size) for 2-D ones.
    """
    slide = np.asarray(slide)
    if slide.shape[:2] != grid.slide_shape:
        raise ValueError(
            f"slide shape {slide.shape[:2]} does not match the grid's "
            f"{grid.slide_shape}"
        )
    ps = grid.patch_size
    return np.stack(
        [slide[y : y + ps, x : x + ps] for x, y in grid.coords]
    ) if grid.n_patches else np.zeros((0, ps, ps) + slide.shape[2:], dtype=slide.dtype)


def _axis_overlap(start: int, stop: int, downsample: int) -> tuple[int, np.ndarray]:
    """Full-res pixel overlap of [start, stop) with each covered raster cell.

    Returns the index of the first covered cell and the per-cell overlap
    lengths (all equal to ``downsample`` except possibly the two ends).
    """
    first = start // downsample
    last = -(-stop // downsample)  # ceil division
    edges = np.arange(first, last + 1, dtype=np.int64) * downsample
    lengths = np.minimum(edges[1:], stop) - np.maximum(edges[:-1], start)
    return first, lengths.astype(np.float64)


def assign_patches(
    grid: PatchGrid, raster: SegmentRaster
) -> tuple[np.ndarray, dict[int, float]]:
    """Vote each patch into a segment and report full-resolution areas.

    Every patch goes to the segment id covering the largest part of its
    footprint (background pixels never win); exact ties break toward the
    lower id.  If even the winner covers less than ``MIN_OVERLAP_FRACTION``
    of the footprint, the patch is marked ``UNSEGMENTED``.

    Returns ``(segment_of, segment_areas)`` where ``segment_of`` is an int
    array of per-patch ids and ``segment_areas`` maps every raster segment id
    to its area in full-resolution pixels.
    """
    ds = raster.downsample
    full_h, full_w = raster.full_resolution_shape()
    h, w = grid.slide_shape
    if grid.n_patches and (h > full_h or w > full_w):
        raise ValueError(
            f"raster covers {full_h}x{full_w} full-res pixels but the grid "
            f"was laid on a {h}x{w} slide"
        )

    n_ids = raster.n_segments
    footprint = float(grid.patch_size) ** 2
    segment_of = np.full(grid.n_patches, UNSEGMENTED, dtype=np.int64)

    for i, (x, y) in enumerate(grid.coords):
        row0, wy = _axis_overlap(int(y), int(y) + grid.patch_size, ds)
        col0, wx = _axis_overlap(int(x), int(x) + grid.patch_size, ds)
        window = raster.labels[row0 : row0 + wy.size, col0 : col0 + wx.size]
        weights = np.outer(wy, wx)
        votes = np.bincount(
            window.ravel(), weights=weights.ravel(), minlength=n_ids + 1
        )
        if n_ids == 0:
            continue
        best = int(np.argmax(votes[1:])) + 1  # argmax returns the lowest tied id
        if votes[best] >= MIN_OVERLAP_FRACTION * footprint:
            segment_of[i] = best

    return segment_of, raster.scaled_areas()
