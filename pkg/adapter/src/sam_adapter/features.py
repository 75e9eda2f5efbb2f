"""Patch feature backbones.

Two are registered:

* ``resnet50`` -- the default: an ImageNet-pretrained torchvision ResNet-50
  truncated after its third stage, global-average-pooled to 1024 dims.
  Requires torch/torchvision and locally available weights.
* ``fixture`` -- a deterministic, dependency-free stand-in for tests and
  offline runs: a coarse color descriptor pushed through a fixed random
  projection to the same 1024 dims.
"""

from __future__ import annotations

import numpy as np

FEATURE_DIM = 1024

# Side of the coarse sampling grid the fixture backbone reads from a patch.
_FIXTURE_GRID = 8
_FIXTURE_SEED = 74120

_WEIGHTS_HINT = (
    "resnet50 needs torchvision's IMAGENET1K_V1 weights available locally; "
    "download them on a connected machine (e.g. "
    "torchvision.models.resnet50(weights=ResNet50_Weights.IMAGENET1K_V1)) "
    "and copy the cache (TORCH_HOME, default ~/.cache/torch) here, or use "
    "the 'fixture' backbone"
)


def list_backbones() -> tuple[str, ...]:
    """Names accepted by :func:`extract_features`."""
    return ("fixture", "resnet50")


def extract_features(patches: np.ndarray, backbone: str = "resnet50") -> np.ndarray:
    """Embed patch crops as a float32 (N, 1024) matrix, one row per patch.

    ``patches`` is (N, H, W, 3), uint8 or float; row order is preserved.
    Unknown backbone names raise ValueError; the resnet50 backbone raises
    RuntimeError with remediation steps when torch or its weights are
    missing.
    """
    patches = np.asarray(patches)
    if patches.ndim != 4 or patches.shape[3] != 3:
        raise ValueError(
            f"patches must have shape (N, H, W, 3), got {patches.shape}"
        )
    if backbone == "fixture":
        return _fixture_features(patches)
    if backbone == "resnet50":
        return _resnet50_features(patches)
    raise ValueError(
        f"unknown backbone {backbone!r}; supported: {', '.join(list_backbones())}"
    )


def _to_unit_float(patches: np.ndarray) -> np.ndarray:
    if np.issubdtype(patches.dtype, np.integer):
        return patches.astype(np.float64) / 255.0
    return patches.astype(np.float64)


def _fixture_features(patches: np.ndarray) -> np.ndarray:
    """Deterministic embedding: sampled color grid -> fixed projection."""
    n, h, w, _ = patches.shape
    if n == 0:
        return np.zeros((0, FEATURE_DIM), dtype=np.float32)
    scaled = _to_unit_float(patches)
    # Nearest-neighbour sample a fixed grid so any patch size >= 1 works.
    rows = np.linspace(0, h - 1, _FIXTURE_GRID).round().astype(int)
    cols = np.linspace(0, w - 1, _FIXTURE_GRID).round().astype(int)
    sampled = scaled[:, rows][:, :, cols].reshape(n, -1)
    means = scaled.reshape(n, -1, 3).mean(axis=1)
    descriptor = np.concatenate([sampled, means], axis=1)
    projection = np.random.default_rng(_FIXTURE_SEED).standard_normal(
        (descriptor.shape[1], FEATURE_DIM)
    ) / np.sqrt(descriptor.shape[1])
    return (descriptor @ projection).astype(np.float32)


def _resnet50_features(patches: np.ndarray, batch_size: int = 16) -> np.ndarray:
    try:
        import torch
        from torchvision.models import ResNet50_Weights, resnet50
    except ImportError as exc:
        raise RuntimeError(
            f"the resnet50 backbone needs torch and torchvision installed; {_WEIGHTS_HINT}"
        ) from exc

    try:
        model = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1)
    except Exception as exc:  # torchvision raises URLError/OSError subclasses
        raise RuntimeError(f"could not load pretrained weights: {_WEIGHTS_HINT}") from exc

    # Keep the trunk through stage 3: its 1024-channel output, pooled, is the
    # feature vector; stage 4 and the classification head are dropped.
    trunk = torch.nn.Sequential(
        model.conv1, model.bn1, model.relu, model.maxpool,
        model.layer1, model.layer2, model.layer3,
    )
    trunk.eval()

    mean = np.array([0.485, 0.456, 0.406])
    std = np.array([0.229, 0.224, 0.225])
    scaled = (_to_unit_float(patches) - mean) / std

    n = scaled.shape[0]
    out = np.zeros((n, FEATURE_DIM), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            chunk = scaled[start : start + batch_size].transpose(0, 3, 1, 2)
            maps = trunk(torch.from_numpy(np.ascontiguousarray(chunk)).float())
            out[start : start + maps.shape[0]] = (
                maps.mean(dim=(2, 3)).cpu().numpy().astype(np.float32)
            )
    return out
