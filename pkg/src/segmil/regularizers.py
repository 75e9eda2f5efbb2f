"""Pseudo-bag augmentation and the attention-consistency regularizer.

A bag's retained tokens are shuffled and sliced into ``m`` disjoint
pseudo-bags of ``floor(N'/m)`` tokens each; every pseudo-bag inherits the
slide label and the pseudo loss is the mean cross-entropy over them.

The consistency loss pushes attention weights to agree within a segment
group.  Two modes exist because they capture the same premise from
opposite directions: ``variance`` (default) sums the within-group
population variance of the attention weights; ``pairwise`` sums
``-(attn_i - attn_j)^2`` over ordered cross-group pairs.  Group tokens and
unsegmented tokens are excluded from both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .bag_model import KIND_ORDINARY, UNSEGMENTED
from .mil_engine import Gradients, ModelParams, backward, cross_entropy, forward, zero_gradients

WITHIN_GROUP_VARIANCE = "variance"
CROSS_GROUP_PAIRWISE = "pairwise"
CONSISTENCY_MODES = (WITHIN_GROUP_VARIANCE, CROSS_GROUP_PAIRWISE)


@dataclass(frozen=True)
class PseudoBagSet:
    """m disjoint token-index subsets inheriting the parent slide's label."""

    parent_slide: str
    label: int
    bags: tuple[np.ndarray, ...]
    discarded: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self) -> None:
        bags = tuple(np.asarray(b, dtype=np.int64).reshape(-1) for b in self.bags)
        object.__setattr__(self, "bags", bags)
        object.__setattr__(
            self, "discarded", np.asarray(self.discarded, dtype=np.int64).reshape(-1)
        )
        if not bags:
            raise ValueError("need at least one pseudo-bag (m >= 1)")
        all_idx = np.concatenate(bags + (self.discarded,))
        if np.unique(all_idx).size != all_idx.size:
            raise ValueError("pseudo-bags and discarded indices must be pairwise disjoint")
        if len(bags) > 1:
            head_sizes = {b.size for b in bags[:-1]}
            # The final bag may absorb the remainder (remainder="last_bag");
            # all others must share one size and the final one be no smaller.
            if len(head_sizes) != 1 or bags[-1].size < next(iter(head_sizes)):
                raise ValueError("pseudo-bags must share one size (last may absorb the remainder)")

    @property
    def m(self) -> int:
        return len(self.bags)


def partition_pseudo_bags(
    n_tokens: int,
    m: int,
    seed: int,
    parent_slide: str = "",
    label: int = 0,
    remainder: str = "discard",
) -> PseudoBagSet:
    """Shuffle token indices and slice them into m blocks of floor(N'/m).

    Leftover indices are discarded by default; ``remainder="last_bag"``
    appends them to the final pseudo-bag instead (sizes are then allowed to
    differ for that bag only).  Deterministic per (seed, parent_slide).
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if n_tokens < m:
        raise ValueError(f"cannot split {n_tokens} tokens into {m} pseudo-bags")
    if remainder not in ("discard", "last_bag"):
        raise ValueError(f"remainder must be 'discard' or 'last_bag', got {remainder!r}")
    gen = rng.stream(seed, "pseudo", parent_slide)
    perm = gen.permutation(n_tokens).astype(np.int64)
    size = n_tokens // m
    bags = [perm[i * size : (i + 1) * size] for i in range(m)]
    leftovers = perm[m * size :]
    if remainder == "last_bag" and leftovers.size:
        bags[-1] = np.concatenate([bags[-1], leftovers])
        leftovers = np.empty(0, dtype=np.int64)
    return PseudoBagSet(
        parent_slide=parent_slide, label=int(label), bags=tuple(bags), discarded=leftovers
    )


def pseudo_bag_loss(
    params: ModelParams, tokens: np.ndarray, pbs: PseudoBagSet
) -> tuple[float, Gradients]:
    """Mean cross-entropy over the pseudo-bags, with mean-reduced gradients.

    Each pseudo-bag runs its own forward/backward against the inherited
    label; gradients are accumulated with upstream scale 1/m.  The token
    gradient is scattered back to the full token sequence.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    m = pbs.m
    total = zero_gradients(params, tokens.shape[0])
    loss = 0.0
    for bag_idx in pbs.bags:
        if bag_idx.size == 0:
            raise ValueError("pseudo-bag is empty")
        sub = tokens[bag_idx]
        trace = forward(params, sub)
        loss += cross_entropy(trace.logits, pbs.label) / m
        g = backward(params, trace, pbs.label, upstream_scale=1.0 / m)
        for name, arr in total.blocks():
            arr[...] += getattr(g, name)
        total.d_features[bag_idx] += g.d_features
    return loss, total


def _eligible(segment_ids: np.ndarray, kinds: np.ndarray | None) -> np.ndarray:
    segment_ids = np.asarray(segment_ids).reshape(-1)
    mask = segment_ids != UNSEGMENTED
    if kinds is not None:
        mask &= np.asarray(kinds).reshape(-1) == KIND_ORDINARY
    return mask


def consistency_loss(
    attn: np.ndarray,
    segment_of_tokens: np.ndarray,
    mode: str = WITHIN_GROUP_VARIANCE,
    kinds: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Consistency loss over attention weights, with its gradient w.r.t. attn.

    ``variance`` mode: sum over segment groups with >= 2 eligible members of
    the population variance of their attention weights (>= 0, zero iff attn
    is constant within every such group).  ``pairwise`` mode: sum of
    ``-(attn_i - attn_j)^2`` over ordered pairs from different groups.
    Group tokens (``kinds``) and unsegmented tokens are excluded.  The
    caller chains ``d_attn`` through the softmax Jacobian.
    """
    attn = np.asarray(attn, dtype=np.float64).reshape(-1)
    segment_ids = np.asarray(segment_of_tokens).reshape(-1)
    if attn.shape[0] != segment_ids.shape[0]:
        raise ValueError(
            f"attn has length {attn.shape[0]} but segment ids have {segment_ids.shape[0]}"
        )
    if mode not in CONSISTENCY_MODES:
        raise ValueError(f"unknown consistency mode {mode!r}; choose from {CONSISTENCY_MODES}")
    d_attn = np.zeros_like(attn)
    mask = _eligible(segment_ids, kinds)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return 0.0, d_attn
    a = attn[idx]
    segs = segment_ids[idx]

    if mode == WITHIN_GROUP_VARIANCE:
        loss = 0.0
        for seg in np.unique(segs):
            members = np.nonzero(segs == seg)[0]
            n = members.size
            if n < 2:
                continue
            vals = a[members]
            mu = vals.mean()
            loss += float(((vals - mu) ** 2).mean())
            d_attn[idx[members]] = (2.0 / n) * (vals - mu)
        return loss, d_attn

    # pairwise: sum over ordered (i, j), seg_i != seg_j, of -(a_i - a_j)^2.
    # Total over all ordered pairs minus the within-group part, in O(n).
    n = a.size
    s_all = a.sum()
    q_all = (a**2).sum()
    cross = 2.0 * n * q_all - 2.0 * s_all**2
    grad_cross = 4.0 * (n * a - s_all)
    for seg in np.unique(segs):
        members = np.nonzero(segs == seg)[0]
        vals = a[members]
        n_g = vals.size
        s_g = vals.sum()
        q_g = (vals**2).sum()
        cross -= 2.0 * n_g * q_g - 2.0 * s_g**2
        grad_cross[members] -= 4.0 * (n_g * vals - s_g)
    d_attn[idx] = -grad_cross
    return float(-cross), d_attn


def total_loss(cls: float, pseudo: float, consistency: float, alpha: float, beta: float) -> float:
    """The training objective: cls + alpha * pseudo + beta * consistency."""
    return cls + alpha * pseudo + beta * consistency
