"""Write one processed slide as a training-ready interchange directory.

The layout is the contract with the training package, reproduced here
independently so the adapter stays import-free of it:

* ``manifest.json`` -- slide id, integer label, N, D_in, per-segment areas
  (JSON object keyed by stringified id), per-patch segment ids with -1 for
  unsegmented patches, and optional (x, y) patch coordinates.
* ``features.bin`` -- the N x D_in feature matrix as row-major little-endian
  IEEE-754 float32, exactly 4*N*D_in bytes, no header.

The manifest is written last so a directory with one is complete.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

SLIDE_MANIFEST = "manifest.json"
FEATURES_BIN = "features.bin"


def emit_slide(
    out_dir: str | Path,
    slide_id: str,
    label: int,
    features: np.ndarray,
    segment_of: np.ndarray,
    segment_areas: dict[int, float],
    coords: np.ndarray | None = None,
    force: bool = False,
) -> Path:
    """Write the slide directory; refuses to overwrite unless ``force``.

    Returns the directory path.  Raises ValueError on inconsistent inputs
    (shape mismatches, ids without areas, non-finite features).
    """
    features = np.asarray(features)
    segment_of = np.asarray(segment_of, dtype=np.int64)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    n, d_in = features.shape
    if n < 1:
        raise ValueError("refusing to emit a slide with zero patches")
    if not np.isfinite(features).all():
        raise ValueError("features contain non-finite values")
    if segment_of.shape != (n,):
        raise ValueError(
            f"segment_of has shape {segment_of.shape}, expected ({n},)"
        )
    if (segment_of < -1).any():
        raise ValueError("segment ids must be >= 1, or -1 for unsegmented patches")
    if int(label) < 0:
        raise ValueError(f"label must be a non-negative class index, got {label}")
    referenced = {int(s) for s in segment_of if s >= 0}
    missing = referenced - set(int(k) for k in segment_areas)
    if missing:
        raise ValueError(f"segment ids {sorted(missing)} have no area entry")
    for sid, area in segment_areas.items():
        if not np.isfinite(area) or area < 0:
            raise ValueError(f"segment {sid} has invalid area {area}")
    if coords is not None:
        coords = np.asarray(coords, dtype=np.int64)
        if coords.shape != (n, 2):
            raise ValueError(f"coords must have shape ({n}, 2), got {coords.shape}")

    out = Path(out_dir)
    manifest_path = out / SLIDE_MANIFEST
    if manifest_path.exists() and not force:
        raise FileExistsError(
            f"{out} already holds a slide; pass force=True to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)

    (out / FEATURES_BIN).write_bytes(
        np.ascontiguousarray(features, dtype="<f4").tobytes()
    )
    manifest = {
        "slide_id": str(slide_id),
        "label": int(label),
        "N": n,
        "D_in": d_in,
        "segment_areas": {str(int(k)): float(v) for k, v in segment_areas.items()},
        "segment_of": [int(s) for s in segment_of],
        "coords": None if coords is None else [[int(x), int(y)] for x, y in coords],
    }
    manifest_path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return out
