"""Per-segment representative features, appended to the bag as extra tokens.

Each segment category contributes one token holding the arithmetic mean of
its member instance features.  Means are accumulated in float64 regardless
of storage precision so the exact-mean contract holds for large groups.
"""

from __future__ import annotations

import numpy as np

from .bag_model import UNSEGMENTED, AugmentedBag, GroupToken, SlideBag, KIND_GROUP, KIND_ORDINARY


def compute_group_features(bag: SlideBag) -> list[GroupToken]:
    """One mean-feature token per distinct non-sentinel segment id, ascending.

    Unsegmented instances produce no token: there is no segment to summarize.
    """
    feats = np.asarray(bag.features, dtype=np.float64)
    tokens: list[GroupToken] = []
    for seg in bag.segment_ids():
        members = np.nonzero(bag.segment_of == seg)[0]
        tokens.append(
            GroupToken(
                segment_id=seg,
                feature=feats[members].mean(axis=0),
                member_count=int(members.size),
            )
        )
    return tokens


def augment_bag(bag: SlideBag) -> AugmentedBag:
    """Append group tokens after the ordinary instances.

    Token order is: ordinary instances in original order, then group tokens
    by ascending segment id.  Passing an already augmented bag is a
    ``TypeError`` rather than a silent double append.
    """
    if isinstance(bag, AugmentedBag):
        raise TypeError("bag is already augmented; augment_bag takes a SlideBag")
    if not isinstance(bag, SlideBag):
        raise TypeError(f"augment_bag takes a SlideBag, got {type(bag).__name__}")
    tokens = compute_group_features(bag)
    kinds = np.concatenate(
        [
            np.full(bag.n_instances, KIND_ORDINARY, dtype=np.int8),
            np.full(len(tokens), KIND_GROUP, dtype=np.int8),
        ]
    )
    return AugmentedBag(base=bag, group_tokens=tuple(tokens), token_kind=kinds)
