"""Shared helpers for the test suite: random bag factories."""

from __future__ import annotations

import numpy as np
import pytest

from segmil.bag_model import UNSEGMENTED, SlideBag, make_bag


def random_bag(
    gen: np.random.Generator,
    n_min: int = 3,
    n_max: int = 40,
    d: int = 8,
    max_segments: int = 4,
    unsegmented_fraction: float = 0.25,
    slide_id: str = "rand",
) -> SlideBag:
    """A valid random bag with a random mix of segments and unsegmented rows."""
    n = int(gen.integers(n_min, n_max + 1))
    n_segments = int(gen.integers(1, max_segments + 1))
    segment_of = gen.integers(0, n_segments, size=n).astype(np.int64)
    unseg = gen.random(n) < unsegmented_fraction
    segment_of[unseg] = UNSEGMENTED
    if (segment_of == UNSEGMENTED).all():
        segment_of[int(gen.integers(0, n))] = 0
    present = sorted(int(s) for s in np.unique(segment_of) if s != UNSEGMENTED)
    areas = {s: float(gen.uniform(1.0, 100.0)) for s in present}
    features = gen.standard_normal((n, d)).astype(np.float32)
    return make_bag(slide_id, int(gen.integers(0, 2)), features, segment_of, areas)


@pytest.fixture
def gen() -> np.random.Generator:
    return np.random.default_rng(2024)
