"""Core data model: bags of instance features, segment assignments, group tokens.

A :class:`SlideBag` is one weakly labeled bag: an ``N x D_in`` matrix of
instance features, a per-instance segment-category id (or ``UNSEGMENTED``),
and the raw area of each segment category.  :class:`AugmentedBag` appends one
mean-feature token per segment category to the ordinary instances.

All types are immutable after construction (arrays are marked read-only), so
they are safe to share across concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

#: Sentinel segment id for instances the segmentation did not cover.
UNSEGMENTED = -1

#: Token kind tags used by AugmentedBag.token_kind.
KIND_ORDINARY = 0
KIND_GROUP = 1


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr:
        out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SlideBag:
    """One bag: instance features plus segment assignments and areas.

    Attributes:
        slide_id: Unique identifier of the slide.
        label: Class index in ``{0..C-1}``.
        features: ``N x D_in`` float32 matrix, one row per instance.
        segment_of: Length-``N`` int array of segment ids (``UNSEGMENTED``
            for uncovered instances).
        segment_areas: Raw area per segment id (pixels or arbitrary units).
        coords: Optional ``N x 2`` integer patch coordinates.
    """

    slide_id: str
    label: int
    features: np.ndarray
    segment_of: np.ndarray
    segment_areas: Mapping[int, float]
    coords: np.ndarray | None = None

    def __post_init__(self) -> None:
        feats = _readonly(np.asarray(self.features, dtype=np.float32))
        seg = _readonly(np.asarray(self.segment_of, dtype=np.int64).reshape(-1))
        areas = {int(k): float(v) for k, v in self.segment_areas.items()}
        coords = self.coords
        if coords is not None:
            coords = _readonly(np.asarray(coords, dtype=np.int64))
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "segment_of", seg)
        object.__setattr__(self, "segment_areas", areas)
        object.__setattr__(self, "coords", coords)

    @property
    def n_instances(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def segment_ids(self) -> list[int]:
        """Distinct non-sentinel segment ids present, ascending."""
        present = np.unique(self.segment_of)
        return [int(s) for s in present if s != UNSEGMENTED]


@dataclass(frozen=True)
class GroupToken:
    """Mean feature of one segment group, appended to the bag as a token."""

    segment_id: int
    feature: np.ndarray
    member_count: int

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "feature", _readonly(np.asarray(self.feature, dtype=np.float64).reshape(-1))
        )
        if self.member_count < 1:
            raise ValueError("group token needs at least one member instance")


@dataclass(frozen=True)
class AugmentedBag:
    """A bag with group tokens appended after the ordinary instances.

    ``token_kind[i]`` is ``KIND_ORDINARY`` for the first N tokens and
    ``KIND_GROUP`` for the trailing group tokens (one per distinct
    non-sentinel segment id, ascending).
    """

    base: SlideBag
    group_tokens: tuple[GroupToken, ...]
    token_kind: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "group_tokens", tuple(self.group_tokens))
        kinds = _readonly(np.asarray(self.token_kind, dtype=np.int8).reshape(-1))
        object.__setattr__(self, "token_kind", kinds)
        n, l = self.base.n_instances, len(self.group_tokens)
        if kinds.shape[0] != n + l:
            raise ValueError("token_kind length must be N + group count")
        if not (np.all(kinds[:n] == KIND_ORDINARY) and np.all(kinds[n:] == KIND_GROUP)):
            raise ValueError("group tokens must follow all ordinary instances")
        ids = [t.segment_id for t in self.group_tokens]
        if sorted(set(ids)) != ids:
            raise ValueError("group tokens must be unique and sorted by segment id")
        if set(ids) != set(self.base.segment_ids()):
            raise ValueError("exactly one group token per distinct segment id required")

    @property
    def n_ordinary(self) -> int:
        return self.base.n_instances

    @property
    def n_tokens(self) -> int:
        return self.base.n_instances + len(self.group_tokens)

    def token_features(self) -> np.ndarray:
        """All token features as a float64 ``(N + l) x D_in`` matrix."""
        parts = [np.asarray(self.base.features, dtype=np.float64)]
        if self.group_tokens:
            parts.append(np.stack([t.feature for t in self.group_tokens]))
        return np.concatenate(parts, axis=0)

    def token_segments(self) -> np.ndarray:
        """Segment id per token; group tokens carry their own segment id."""
        ids = np.asarray([t.segment_id for t in self.group_tokens], dtype=np.int64)
        return np.concatenate([self.base.segment_of, ids])


@dataclass(frozen=True)
class MaskedBag:
    """The retained-token view a masking plan produces.

    Unlike :class:`AugmentedBag` this makes no one-token-per-segment promise
    (the full-random strategy may remove group tokens); it is the sequence
    the model actually consumes.
    """

    slide_id: str
    label: int
    features: np.ndarray
    segment_ids: np.ndarray
    kinds: np.ndarray
    source_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", _readonly(np.asarray(self.features, dtype=np.float64)))
        object.__setattr__(
            self, "segment_ids", _readonly(np.asarray(self.segment_ids, dtype=np.int64))
        )
        object.__setattr__(self, "kinds", _readonly(np.asarray(self.kinds, dtype=np.int8)))
        object.__setattr__(
            self, "source_indices", _readonly(np.asarray(self.source_indices, dtype=np.int64))
        )

    @property
    def n_tokens(self) -> int:
        return int(self.features.shape[0])


def validate_bag(bag: SlideBag) -> list[str]:
    """Check every bag invariant; return human-readable violations.

    An empty list means the bag is valid.  Pure: never mutates the bag and
    repeated calls return identical results.
    """
    violations: list[str] = []
    feats = bag.features
    if feats.ndim != 2:
        violations.append(f"features must be 2-D, got shape {feats.shape}")
        return violations
    n = feats.shape[0]
    if n < 1:
        violations.append("bag must contain at least one instance (N >= 1)")
    bad_rows = np.nonzero(~np.isfinite(feats).all(axis=1))[0]
    for row in bad_rows:
        violations.append(f"feature row {int(row)} contains a non-finite value")
    if bag.label < 0:
        violations.append(f"label must be a non-negative class index, got {bag.label}")
    if bag.segment_of.shape[0] != n:
        violations.append(
            f"segment_of has length {bag.segment_of.shape[0]}, expected N={n}"
        )
    else:
        for seg in bag.segment_ids():
            if seg not in bag.segment_areas:
                violations.append(f"segment {seg} has instances but no entry in segment_areas")
    for seg, area in bag.segment_areas.items():
        if not np.isfinite(area) or area < 0:
            violations.append(f"segment {seg} has invalid area {area}")
    segmented = bag.segment_of != UNSEGMENTED
    if segmented.any() and bag.segment_of.shape[0] == n:
        # Only meaningful once every referenced segment has an entry;
        # missing entries are already reported above.
        covered = [bag.segment_areas.get(s) for s in bag.segment_ids()]
        if covered and None not in covered and max(covered) <= 0.0:
            violations.append("all segment areas are zero although instances are segmented")
    if bag.coords is not None and bag.coords.shape != (n, 2):
        violations.append(
            f"coords must have shape ({n}, 2), got {tuple(bag.coords.shape)}"
        )
    return violations


def normalized_area_fractions(bag: SlideBag) -> dict[int, float]:
    """Area fraction per segment id, summing to 1 over all groups.

    Unsegmented instances form a synthetic pseudo-group (id ``UNSEGMENTED``)
    whose pre-normalization area is ``(n_unsegmented / N) * total_area``, so
    they participate in area-driven masking like any other group.

    Raises:
        ValueError: if every real segment area is zero ("degenerate areas").
    """
    n = bag.n_instances
    seg_ids = bag.segment_ids()
    n_unseg = int(np.count_nonzero(bag.segment_of == UNSEGMENTED))
    if not seg_ids:
        # No segmentation at all: the pseudo-group is the whole bag.
        return {UNSEGMENTED: 1.0}
    areas = {s: float(bag.segment_areas[s]) for s in seg_ids}
    total = sum(areas.values())
    if total <= 0.0:
        raise ValueError("degenerate areas: every segment area is zero")
    if n_unseg > 0:
        areas[UNSEGMENTED] = (n_unseg / n) * total
        total += areas[UNSEGMENTED]
    return {s: a / total for s, a in areas.items()}


def make_bag(
    slide_id: str,
    label: int,
    features: np.ndarray,
    segment_of: Sequence[int] | np.ndarray,
    segment_areas: Mapping[int, float],
    coords: np.ndarray | None = None,
) -> SlideBag:
    """Construct a SlideBag and raise if any invariant is violated."""
    bag = SlideBag(slide_id, int(label), features, np.asarray(segment_of), segment_areas, coords)
    problems = validate_bag(bag)
    if problems:
        raise ValueError(f"invalid bag {slide_id!r}: " + "; ".join(problems))
    return bag
