"""Cross-package contract: emitted directories load on the training side.

These tests import the training package (``segmil``) on purpose -- they pin
the on-disk interchange format from both ends.  They skip when it is not
installed; the adapter itself never imports it.
"""

import numpy as np
import pytest

segmil_data_io = pytest.importorskip("segmil.data_io")
from segmil.bag_model import UNSEGMENTED as PRIMARY_UNSEGMENTED
from segmil.bag_model import validate_bag

from sam_adapter.emit import emit_slide
from sam_adapter.features import extract_features
from sam_adapter.patches import assign_patches, crop_patches, foreground_and_patch
from sam_adapter.raster import UNSEGMENTED


def test_unsegmented_sentinels_agree():
    assert UNSEGMENTED == PRIMARY_UNSEGMENTED


def test_emitted_slide_reads_back_and_validates(tmp_path, tissue_slide, quadrant_raster):
    grid = foreground_and_patch(tissue_slide)
    segment_of, segment_areas = assign_patches(grid, quadrant_raster)
    features = extract_features(crop_patches(tissue_slide, grid), "fixture")
    out = emit_slide(
        tmp_path / "slide_a",
        slide_id="slide_a",
        label=1,
        features=features,
        segment_of=segment_of,
        segment_areas=segment_areas,
        coords=grid.coords,
        force=False,
    )

    bag = segmil_data_io.read_slide(out)
    assert validate_bag(bag) == []
    assert bag.slide_id == "slide_a"
    assert bag.label == 1
    assert bag.n_instances == grid.n_patches
    assert bag.feature_dim == features.shape[1]
    assert np.array_equal(bag.segment_of, segment_of)
    assert bag.segment_areas == segment_areas
    assert np.array_equal(bag.coords, grid.coords)
    # float32 on disk, widened on load: values must survive bit-for-bit
    assert np.array_equal(bag.features.astype(np.float32), features)


def test_slide_with_only_unsegmented_patches_validates(tmp_path):
    features = np.random.default_rng(0).standard_normal((4, 8)).astype(np.float32)
    out = emit_slide(
        tmp_path / "slide_b",
        slide_id="slide_b",
        label=0,
        features=features,
        segment_of=np.full(4, UNSEGMENTED, dtype=np.int64),
        segment_areas={},
    )
    bag = segmil_data_io.read_slide(out)
    assert validate_bag(bag) == []
    assert bag.segment_areas == {}
