"""Turn a whole slide plus a segmentation raster into a feature directory.

The pipeline has four stages, each usable on its own:

1. :mod:`sam_adapter.patches` -- find the tissue foreground and lay a grid of
   fixed-size patches fully inside it, then vote each patch into a segment.
2. :mod:`sam_adapter.raster` -- the ``SegmentRaster`` container for a
   downsampled segment-id image with per-segment pixel areas.
3. :mod:`sam_adapter.features` -- embed the patch crops with a backbone
   (a pretrained resnet50 trunk, or a deterministic fixture for tests).
4. :mod:`sam_adapter.emit` -- write the result as a slide directory
   (``manifest.json`` + ``features.bin``) that the training side reads.

The emitted directory layout is the only coupling to the training package;
nothing in here imports it.
"""

from sam_adapter.raster import SegmentRaster, UNSEGMENTED, load_raster, save_raster
from sam_adapter.patches import PatchGrid, assign_patches, crop_patches, foreground_and_patch
from sam_adapter.features import extract_features, list_backbones
from sam_adapter.emit import emit_slide

__version__ = "0.1.0"

__all__ = [
    "SegmentRaster",
    "UNSEGMENTED",
    "load_raster",
    "save_raster",
    "PatchGrid",
    "foreground_and_patch",
    "assign_patches",
    "crop_patches",
    "extract_features",
    "list_backbones",
    "emit_slide",
]
