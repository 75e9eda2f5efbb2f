"""Instance-masking strategies applied before the forward pass.

Three strategies produce a :class:`MaskPlan` over a bag's tokens:

* ``full_random`` — uniform over ALL tokens, including group tokens;
* ``nongroup_random`` — uniform over ordinary instances only;
* ``sg2m`` — per segment group, with a mask ratio that grows with the
  group's normalized area via an adjusted sigmoid, so dominant tissue is
  masked aggressively while rare tissue is spared.

Masking is token REMOVAL (index selection), not zeroing: zeroed tokens
would still consume attention mass.  Plans are deterministic given
(seed, slide_id, group id), so per-slide plans are order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .bag_model import (
    KIND_ORDINARY,
    AugmentedBag,
    MaskedBag,
    SlideBag,
    normalized_area_fractions,
)

CONSTANT = "constant"
LINEAR = "linear"
ADJUSTED_SIGMOID = "adjusted_sigmoid"
RATIO_KINDS = (CONSTANT, LINEAR, ADJUSTED_SIGMOID)

FULL_RANDOM = "full_random"
NONGROUP_RANDOM = "nongroup_random"
SG2M = "sg2m"
STRATEGIES = (FULL_RANDOM, NONGROUP_RANDOM, SG2M)

#: Strategies whose candidate pool excludes group tokens.
_GROUP_EXEMPT = (NONGROUP_RANDOM, SG2M)


@dataclass(frozen=True)
class RatioFunction:
    """Maps a group's normalized area fraction to a mask ratio in [0, 1].

    ``adjusted_sigmoid`` computes ``1 / (1 + exp(-(a*A + b)))``; with the
    defaults a=10, b=-5 on area fractions this gives 0.5 at half the total
    area, ~0.007 near zero area, and ~0.993 at full area.  ``constant``
    returns 1 and ``linear`` returns the fraction itself; both ignore a, b.
    """

    kind: str = ADJUSTED_SIGMOID
    a: float = 10.0
    b: float = -5.0

    def __post_init__(self) -> None:
        if self.kind not in RATIO_KINDS:
            raise ValueError(f"unknown ratio function kind {self.kind!r}; choose from {RATIO_KINDS}")
        if self.kind == ADJUSTED_SIGMOID and not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError("adjusted_sigmoid requires finite a and b")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, d: dict) -> "RatioFunction":
        return cls(kind=d.get("kind", ADJUSTED_SIGMOID), a=d.get("a", 10.0), b=d.get("b", -5.0))


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def ratio(fn: RatioFunction, area_fraction: float) -> float:
    """Mask ratio for one group given its area fraction (clamped to [0, 1])."""
    if fn.kind == CONSTANT:
        out = 1.0
    elif fn.kind == LINEAR:
        out = float(area_fraction)
    else:
        out = _sigmoid(fn.a * float(area_fraction) + fn.b)
    return min(1.0, max(0.0, out))


def group_mask_ratio(fn: RatioFunction, area_fraction: float, mr_target: float) -> float:
    """Per-group mask ratio: the global target scaled by the area-driven ratio."""
    return mr_target * ratio(fn, area_fraction)


@dataclass(frozen=True)
class MaskPlan:
    """Retained/masked index partition over a bag's tokens.

    ``retained`` and ``masked`` are disjoint, ascending, and together cover
    every token index.  For ``sg2m`` and ``nongroup_random`` plans no group
    token may appear in ``masked``; ``full_random`` is the one strategy
    allowed to mask group tokens.  ``per_group_ratio`` records the per-group
    target mask ratio (area-driven; empty for the uniform strategies).
    """

    strategy: str
    seed: int
    n_tokens: int
    n_ordinary: int
    retained: np.ndarray
    masked: np.ndarray
    per_group_ratio: dict[int, float]

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        retained = np.sort(np.asarray(self.retained, dtype=np.int64).reshape(-1))
        masked = np.sort(np.asarray(self.masked, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "retained", retained)
        object.__setattr__(self, "masked", masked)
        object.__setattr__(
            self, "per_group_ratio", {int(k): float(v) for k, v in self.per_group_ratio.items()}
        )
        if self.n_ordinary > self.n_tokens:
            raise ValueError("n_ordinary cannot exceed n_tokens")
        both = np.concatenate([retained, masked])
        if both.size != self.n_tokens or not np.array_equal(
            np.sort(both), np.arange(self.n_tokens)
        ):
            raise ValueError("retained and masked must partition all token indices")
        if self.strategy in _GROUP_EXEMPT and masked.size and masked.max() >= self.n_ordinary:
            raise ValueError(
                f"{self.strategy} plans may not mask group tokens "
                f"(index {int(masked.max())} >= n_ordinary={self.n_ordinary})"
            )

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": int(self.seed),
            "n_tokens": int(self.n_tokens),
            "n_ordinary": int(self.n_ordinary),
            "retained": [int(i) for i in self.retained],
            "masked": [int(i) for i in self.masked],
            "per_group_ratio": {str(k): v for k, v in self.per_group_ratio.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskPlan":
        return cls(
            strategy=d["strategy"],
            seed=int(d["seed"]),
            n_tokens=int(d["n_tokens"]),
            n_ordinary=int(d["n_ordinary"]),
            retained=np.asarray(d["retained"], dtype=np.int64),
            masked=np.asarray(d["masked"], dtype=np.int64),
            per_group_ratio={int(k): float(v) for k, v in d["per_group_ratio"].items()},
        )


def _pool(bag: AugmentedBag | SlideBag) -> tuple[SlideBag, int, int]:
    """(base bag, ordinary count, total token count) for either bag form."""
    if isinstance(bag, AugmentedBag):
        return bag.base, bag.n_ordinary, bag.n_tokens
    if isinstance(bag, SlideBag):
        return bag, bag.n_instances, bag.n_instances
    raise TypeError(f"expected SlideBag or AugmentedBag, got {type(bag).__name__}")


def _check_mr(mr_target: float) -> None:
    if not 0.0 <= mr_target <= 1.0:
        raise ValueError(f"mr_target must lie in [0, 1], got {mr_target}")


def _finish(
    strategy: str, seed: int, n_tokens: int, n_ordinary: int, masked: np.ndarray, ratios: dict
) -> MaskPlan:
    keep = np.ones(n_tokens, dtype=bool)
    keep[masked] = False
    return MaskPlan(
        strategy=strategy,
        seed=seed,
        n_tokens=n_tokens,
        n_ordinary=n_ordinary,
        retained=np.nonzero(keep)[0],
        masked=masked,
        per_group_ratio=ratios,
    )


def plan_sg2m(
    bag: AugmentedBag | SlideBag, fn: RatioFunction, mr_target: float, seed: int
) -> MaskPlan:
    """Area-guided per-group masking.

    For each segment group (including the pseudo-group of unsegmented
    instances) the masked count is ``floor(n_k * mr_target * ratio(area_k))``,
    reduced if needed so at least one ordinary instance of the group
    survives.  Group tokens are never masked.  The random choice within a
    group is drawn from a stream keyed by (seed, slide_id, group id).
    """
    _check_mr(mr_target)
    base, n_ordinary, n_tokens = _pool(bag)
    fractions = normalized_area_fractions(base)
    masked_parts: list[np.ndarray] = []
    ratios: dict[int, float] = {}
    for k in sorted(fractions):
        members = np.nonzero(base.segment_of == k)[0]
        n_k = int(members.size)
        mr_k = group_mask_ratio(fn, fractions[k], mr_target)
        ratios[k] = mr_k
        count = int(math.floor(n_k * mr_k))
        count = min(count, n_k - 1)  # keep >= 1 ordinary instance per group
        if count <= 0:
            continue
        gen = rng.stream(seed, "mask", base.slide_id, k)
        local = gen.choice(n_k, size=count, replace=False)
        masked_parts.append(members[np.sort(local)])
    masked = (
        np.sort(np.concatenate(masked_parts)) if masked_parts else np.empty(0, dtype=np.int64)
    )
    return _finish(SG2M, seed, n_tokens, n_ordinary, masked, ratios)


def plan_full_random(bag: AugmentedBag | SlideBag, mr_target: float, seed: int) -> MaskPlan:
    """Uniform masking over the entire token set, group tokens included."""
    _check_mr(mr_target)
    base, n_ordinary, n_tokens = _pool(bag)
    count = min(int(math.floor(n_tokens * mr_target)), n_tokens - 1)
    gen = rng.stream(seed, "mask", base.slide_id, "full")
    masked = (
        np.sort(gen.choice(n_tokens, size=count, replace=False))
        if count > 0
        else np.empty(0, dtype=np.int64)
    )
    return _finish(FULL_RANDOM, seed, n_tokens, n_ordinary, masked, {})


def plan_nongroup_random(bag: AugmentedBag | SlideBag, mr_target: float, seed: int) -> MaskPlan:
    """Uniform masking over ordinary instances only; group tokens retained."""
    _check_mr(mr_target)
    base, n_ordinary, n_tokens = _pool(bag)
    count = min(int(math.floor(n_ordinary * mr_target)), n_ordinary - 1)
    gen = rng.stream(seed, "mask", base.slide_id, "nongroup")
    masked = (
        np.sort(gen.choice(n_ordinary, size=count, replace=False))
        if count > 0
        else np.empty(0, dtype=np.int64)
    )
    return _finish(NONGROUP_RANDOM, seed, n_tokens, n_ordinary, masked, {})


def _token_view(bag: AugmentedBag | SlideBag) -> tuple[SlideBag, np.ndarray, np.ndarray, np.ndarray]:
    base, _, _ = _pool(bag)
    if isinstance(bag, AugmentedBag):
        return base, bag.token_features(), bag.token_segments(), bag.token_kind
    features = np.asarray(bag.features, dtype=np.float64)
    kinds = np.full(bag.n_instances, KIND_ORDINARY, dtype=np.int8)
    return base, features, bag.segment_of, kinds


def apply_mask(bag: AugmentedBag | SlideBag, plan: MaskPlan) -> MaskedBag:
    """Drop the plan's masked tokens; keep the retained ones in order.

    The result is the token sequence the model actually consumes, with
    features widened to float64 and per-token segment ids and kind tags
    carried over.
    """
    base, features, segments, kinds = _token_view(bag)
    n_tokens = features.shape[0]
    if plan.n_tokens != n_tokens or plan.n_ordinary != base.n_instances:
        raise ValueError(
            f"plan covers {plan.n_tokens} tokens ({plan.n_ordinary} ordinary) but bag has "
            f"{n_tokens} ({base.n_instances} ordinary)"
        )
    idx = plan.retained
    return MaskedBag(
        slide_id=base.slide_id,
        label=base.label,
        features=features[idx],
        segment_ids=segments[idx],
        kinds=kinds[idx],
        source_indices=idx,
    )


def full_view(bag: AugmentedBag | SlideBag) -> MaskedBag:
    """All tokens retained — the no-masking view used at evaluation time."""
    base, features, segments, kinds = _token_view(bag)
    n_tokens = features.shape[0]
    return MaskedBag(
        slide_id=base.slide_id,
        label=base.label,
        features=features,
        segment_ids=segments,
        kinds=kinds,
        source_indices=np.arange(n_tokens, dtype=np.int64),
    )
