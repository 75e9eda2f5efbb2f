"""Shared fixtures: a slide with four quadrant segments and its raster."""

from __future__ import annotations

import numpy as np
import pytest

from sam_adapter.raster import SegmentRaster


@pytest.fixture
def quadrant_raster() -> SegmentRaster:
    """Three rectangle segments on a 256x256 raster at downsample 4.

    Mapped to full resolution (1024x1024): segment 1 is the top-left
    512x512 quadrant, segment 2 top-right, segment 3 bottom-left, and the
    bottom-right quadrant is background.
    """
    labels = np.zeros((256, 256), dtype=np.int64)
    labels[0:128, 0:128] = 1
    labels[0:128, 128:256] = 2
    labels[128:256, 0:128] = 3
    return SegmentRaster.from_labels(labels, downsample=4)


@pytest.fixture
def tissue_slide() -> np.ndarray:
    """A 1024x1024 RGB slide: dark tissue everywhere (all foreground)."""
    gen = np.random.default_rng(7)
    slide = gen.integers(40, 160, size=(1024, 1024, 3))
    return slide.astype(np.uint8)
