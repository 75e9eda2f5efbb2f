"""Segment rasters: a downsampled image of segment ids plus their areas.

A raster assigns every pixel of a (possibly downsampled) slide to either the
background (id 0) or one of K segments with ids 1..K.  The ids must be
contiguous starting at 1 so that downstream code can index by id directly.
``downsample`` records how many full-resolution pixels one raster pixel
spans along each axis; areas measured on the raster are scaled by its square
to recover full-resolution pixel counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Patches whose footprint cannot be credited to any segment get this id in
# the emitted manifest.  Kept as a module constant so the adapter does not
# need to import the training package to agree on the value.
UNSEGMENTED = -1


@dataclass(frozen=True)
class SegmentRaster:
    """A 2-D array of segment ids with bookkeeping for areas and scale.

    Attributes:
        labels: int array of shape (H, W); 0 is background, segments are
            numbered contiguously from 1.
        downsample: how many full-resolution pixels one raster pixel covers
            per axis (an integer >= 1).
        areas: pixel count per segment id, measured on the raster itself.
    """

    labels: np.ndarray
    downsample: int = 1
    areas: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"labels must be 2-D, got shape {labels.shape}")
        if labels.size == 0:
            raise ValueError("labels must not be empty")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
        labels = labels.astype(np.int64, copy=True)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

        if int(self.downsample) != self.downsample or self.downsample < 1:
            raise ValueError(f"downsample must be an integer >= 1, got {self.downsample}")
        object.__setattr__(self, "downsample", int(self.downsample))

        if labels.min() < 0:
            raise ValueError("labels must be >= 0 (0 is background)")
        present = np.unique(labels)
        ids = present[present > 0]
        n = int(ids.size)
        if n and not np.array_equal(ids, np.arange(1, n + 1)):
            raise ValueError(
                f"segment ids must be contiguous from 1, got {ids.tolist()}"
            )

        counts = np.bincount(labels.ravel(), minlength=n + 1)
        expected = {int(i): int(counts[i]) for i in range(1, n + 1)}
        if not self.areas:
            object.__setattr__(self, "areas", expected)
        elif dict(self.areas) != expected:
            raise ValueError(
                f"areas disagree with labels: got {dict(self.areas)}, counted {expected}"
            )

    @classmethod
    def from_labels(cls, labels: np.ndarray, downsample: int = 1) -> "SegmentRaster":
        """Build a raster from a label image, counting areas automatically."""
        return cls(labels=np.asarray(labels), downsample=downsample)

    @property
    def n_segments(self) -> int:
        return len(self.areas)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def full_resolution_shape(self) -> tuple[int, int]:
        """Extent of the slide this raster describes, in full-res pixels."""
        h, w = self.labels.shape
        return h * self.downsample, w * self.downsample

    def scaled_areas(self) -> dict[int, float]:
        """Segment areas in full-resolution pixels (raster count x downsample^2)."""
        factor = float(self.downsample) ** 2
        return {sid: count * factor for sid, count in self.areas.items()}


def save_raster(path: str | Path, raster: SegmentRaster) -> None:
    """Persist a raster as an .npz with its label image and downsample."""
    np.savez_compressed(
        Path(path), labels=raster.labels, downsample=np.int64(raster.downsample)
    )


def load_raster(path: str | Path) -> SegmentRaster:
    """Load a raster saved by :func:`save_raster`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"raster file not found: {path}")
    with np.load(path) as data:
        if "labels" not in data:
            raise ValueError(f"raster file {path} has no 'labels' array")
        labels = data["labels"]
        downsample = int(data["downsample"]) if "downsample" in data else 1
    return SegmentRaster.from_labels(labels, downsample=downsample)


def generate_raster(
    slide_rgb: np.ndarray,
    downsample: int = 4,
    checkpoint: str | Path | None = None,
) -> SegmentRaster:
    """Run automatic mask generation on a slide image to get a raster.

    This needs the ``segment_anything`` package and a model checkpoint, which
    are not part of this package's requirements; precomputed rasters can be
    supplied instead (see ``--raster`` on the command line).
    """
    try:
        from segment_anything import SamAutomaticMaskGenerator, sam_model_registry
    except ImportError as exc:
        raise RuntimeError(
            "automatic mask generation requires the 'segment_anything' package "
            "and a model checkpoint; install it (pip install segment-anything), "
            "download a checkpoint, and pass it via 'checkpoint=', or supply a "
            "precomputed raster instead (--raster on the command line)"
        ) from exc
    if checkpoint is None:
        raise RuntimeError(
            "automatic mask generation needs a model checkpoint; pass one via "
            "'checkpoint=' or supply a precomputed raster instead"
        )
    sam = sam_model_registry["vit_b"](checkpoint=str(checkpoint))
    generator = SamAutomaticMaskGenerator(sam)
    small = np.asarray(slide_rgb)[::downsample, ::downsample]
    masks = generator.generate(small)
    # Paint masks largest-first so smaller segments overwrite bigger ones,
    # then renumber whatever survived to contiguous ids.
    labels = np.zeros(small.shape[:2], dtype=np.int64)
    for rank, mask in enumerate(
        sorted(masks, key=lambda m: -int(m["area"])), start=1
    ):
        labels[np.asarray(mask["segmentation"], dtype=bool)] = rank
    survivors = np.unique(labels[labels > 0])
    remap = np.zeros(int(labels.max()) + 1, dtype=np.int64)
    remap[survivors] = np.arange(1, survivors.size + 1)
    return SegmentRaster.from_labels(remap[labels], downsample=downsample)
