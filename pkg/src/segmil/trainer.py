"""The full training scheme: mask, forward, pseudo-bag and consistency
losses, one Adam step per slide (batch size is fixed at 1), early stopping
on validation AUC, and checkpointing.

Every stochastic choice derives from (config seed, fold, epoch) via named
streams, so runs are bitwise reproducible and independent of evaluation
order.  With ``strategy="none"``, ``use_group_tokens=False``, ``m=1`` and
``alpha=beta=0`` the loop reduces exactly to a plain attention-MIL
trainer; zero-weight loss components are skipped outright (reported as
0.0) so the reduction is bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import rng
from .bag_model import SlideBag
from .data_io import DatasetManifest, read_slide_by_id
from .group_features import augment_bag
from .masking import (
    FULL_RANDOM,
    NONGROUP_RANDOM,
    SG2M,
    MaskPlan,
    RatioFunction,
    apply_mask,
    full_view,
    plan_full_random,
    plan_nongroup_random,
    plan_sg2m,
)
from .metrics import auc
from .mil_engine import (
    ModelParams,
    backward,
    backward_from_attn,
    cross_entropy,
    forward,
    init_params,
    save_checkpoint,
    softmax,
)
from .regularizers import (
    CONSISTENCY_MODES,
    WITHIN_GROUP_VARIANCE,
    consistency_loss,
    partition_pseudo_bags,
    pseudo_bag_loss,
    total_loss,
)

NO_MASKING = "none"
TRAIN_STRATEGIES = (NO_MASKING, FULL_RANDOM, NONGROUP_RANDOM, SG2M)

METRICS_HEADER = "epoch,cls,pseudo,consistency,total,val_auc"


@dataclass
class RunConfig:
    """Every knob the training scheme exposes.

    Defaults follow the described setup where one exists (200 epochs,
    patience 30, batch size 1, 1024->512 projection); optimizer and loss
    weights are unstated upstream and the values here are our defaults,
    fully exposed for override.
    """

    strategy: str = SG2M
    ratio_fn: RatioFunction = field(default_factory=RatioFunction)
    mr_target: float = 0.8
    m: int = 4
    alpha: float = 0.5
    beta: float = 0.1
    consistency_mode: str = WITHIN_GROUP_VARIANCE
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    epochs: int = 200
    patience: int = 30
    batch_size: int = 1
    seed: int = 0
    d_in: int = 1024
    d: int = 512
    h: int = 128
    c: int = 2
    use_group_tokens: bool = True
    pseudo_remainder: str = "discard"

    def __post_init__(self) -> None:
        if self.strategy not in TRAIN_STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {TRAIN_STRATEGIES}")
        if self.consistency_mode not in CONSISTENCY_MODES:
            raise ValueError(f"unknown consistency mode {self.consistency_mode!r}")
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1")
        if not 0.0 <= self.mr_target <= 1.0:
            raise ValueError(f"mr_target must lie in [0, 1], got {self.mr_target}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.lr < 0 or self.adam_eps <= 0:
            raise ValueError("lr must be >= 0 and adam_eps positive")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 1 or self.patience < 0:
            raise ValueError("epochs must be >= 1 and patience >= 0")
        for name in ("alpha", "beta", "mr_target", "lr", "weight_decay"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if min(self.d_in, self.d, self.h, self.c) < 1:
            raise ValueError("model dims must be positive")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.to_dict() if isinstance(value, RatioFunction) else value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RunConfig keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "ratio_fn" in kwargs and isinstance(kwargs["ratio_fn"], dict):
            kwargs["ratio_fn"] = RatioFunction.from_dict(kwargs["ratio_fn"])
        return cls(**kwargs)


@dataclass
class AdamState:
    """First/second moment accumulators, keyed by parameter block name."""

    step: int
    m1: dict[str, np.ndarray]
    m2: dict[str, np.ndarray]


def init_adam(params: ModelParams) -> AdamState:
    return AdamState(
        step=0,
        m1={name: np.zeros_like(arr) for name, arr in params.blocks()},
        m2={name: np.zeros_like(arr) for name, arr in params.blocks()},
    )


def adam_step(params: ModelParams, grads, state: AdamState, cfg: RunConfig):
    """Bias-corrected Adam with decoupled weight decay; returns new values."""
    t = state.step + 1
    bc1 = 1.0 - cfg.adam_beta1**t
    bc2 = 1.0 - cfg.adam_beta2**t
    new_params: dict[str, np.ndarray] = {}
    new_m1: dict[str, np.ndarray] = {}
    new_m2: dict[str, np.ndarray] = {}
    for name, theta in params.blocks():
        g = getattr(grads, name)
        if g.shape != theta.shape:
            raise ValueError(f"gradient block {name} has shape {g.shape}, expected {theta.shape}")
        m1 = cfg.adam_beta1 * state.m1[name] + (1.0 - cfg.adam_beta1) * g
        m2 = cfg.adam_beta2 * state.m2[name] + (1.0 - cfg.adam_beta2) * g * g
        m_hat = m1 / bc1
        v_hat = m2 / bc2
        new_params[name] = (
            theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps) - cfg.lr * cfg.weight_decay * theta
        )
        new_m1[name] = m1
        new_m2[name] = m2
    return ModelParams(**new_params), AdamState(step=t, m1=new_m1, m2=new_m2)


@dataclass(frozen=True)
class StepReport:
    """Loss components and masking summary of one training step."""

    slide_id: str
    cls: float
    pseudo: float
    consistency: float
    total: float
    n_retained: int
    per_group_ratio: dict[int, float]
    plan: MaskPlan | None = None


def _plan_for(tokens_obj, cfg: RunConfig, seed: int) -> MaskPlan | None:
    if cfg.strategy == NO_MASKING:
        return None
    if cfg.strategy == SG2M:
        return plan_sg2m(tokens_obj, cfg.ratio_fn, cfg.mr_target, seed)
    if cfg.strategy == FULL_RANDOM:
        return plan_full_random(tokens_obj, cfg.mr_target, seed)
    return plan_nongroup_random(tokens_obj, cfg.mr_target, seed)


def loss_components(
    params: ModelParams,
    features: np.ndarray,
    segment_ids: np.ndarray,
    kinds: np.ndarray | None,
    slide_id: str,
    label: int,
    cfg: RunConfig,
    seed: int,
):
    """The composite objective and its gradients on one token sequence.

    Returns (cls, pseudo, consistency, total, Gradients).  Components whose
    weight is zero are skipped and reported as 0.0, which keeps the
    baseline configuration bit-identical to a bare engine step.  The
    pseudo-bag partition derives from (seed, slide_id), so repeated calls
    are identical — which also makes this function finite-difference
    checkable end to end.
    """
    features = np.asarray(features, dtype=np.float64)
    trace = forward(params, features)
    cls = cross_entropy(trace.logits, label)
    grads = backward(params, trace, label, 1.0)

    pseudo = 0.0
    if cfg.alpha != 0.0:
        m_eff = min(cfg.m, features.shape[0])
        pbs = partition_pseudo_bags(
            features.shape[0],
            m_eff,
            seed,
            parent_slide=slide_id,
            label=label,
            remainder=cfg.pseudo_remainder,
        )
        pseudo, g_pseudo = pseudo_bag_loss(params, features, pbs)
        grads.add_scaled(g_pseudo, cfg.alpha)

    consistency = 0.0
    if cfg.beta != 0.0:
        consistency, d_attn = consistency_loss(
            trace.attn, segment_ids, cfg.consistency_mode, kinds=kinds
        )
        g_con = backward_from_attn(params, trace, d_attn)
        grads.add_scaled(g_con, cfg.beta)

    total = total_loss(cls, pseudo, consistency, cfg.alpha, cfg.beta)
    return cls, pseudo, consistency, total, grads


def train_step(
    params: ModelParams, state: AdamState, bag: SlideBag, cfg: RunConfig, epoch_seed: int
):
    """One slide: mask, forward, composite loss, one Adam update.

    Returns (StepReport, new params, new AdamState).
    """
    tokens_obj = augment_bag(bag) if cfg.use_group_tokens else bag
    plan = _plan_for(tokens_obj, cfg, epoch_seed)
    masked = apply_mask(tokens_obj, plan) if plan is not None else full_view(tokens_obj)

    cls, pseudo, consistency, total, grads = loss_components(
        params,
        masked.features,
        masked.segment_ids,
        masked.kinds,
        bag.slide_id,
        bag.label,
        cfg,
        epoch_seed,
    )
    if not math.isfinite(total):
        raise ArithmeticError(f"non-finite loss on slide {bag.slide_id!r}: total={total}")

    params, state = adam_step(params, grads, state, cfg)
    report = StepReport(
        slide_id=bag.slide_id,
        cls=cls,
        pseudo=pseudo,
        consistency=consistency,
        total=total,
        n_retained=masked.n_tokens,
        per_group_ratio=dict(plan.per_group_ratio) if plan is not None else {},
        plan=plan,
    )
    return report, params, state


def predict_proba(params: ModelParams, bag: SlideBag, use_group_tokens: bool) -> np.ndarray:
    """Class probabilities with masking disabled (the evaluation path)."""
    tokens_obj = augment_bag(bag) if use_group_tokens else bag
    trace = forward(params, full_view(tokens_obj).features)
    return softmax(trace.logits)


def predict_with_attention(params: ModelParams, bag: SlideBag, use_group_tokens: bool):
    """(probabilities, unmasked token view, ForwardTrace) for export paths."""
    tokens_obj = augment_bag(bag) if use_group_tokens else bag
    view = full_view(tokens_obj)
    trace = forward(params, view.features)
    return softmax(trace.logits), view, trace


@dataclass
class TrainReport:
    """One fold's training history and outcome."""

    fold: int
    epochs_run: int
    stop_epoch: int
    best_epoch: int
    best_val_auc: float
    checkpoint_path: str
    metrics_csv_path: str
    train_cls: list[float]
    train_pseudo: list[float]
    train_consistency: list[float]
    train_total: list[float]
    val_auc: list[float]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def train(
    manifest: DatasetManifest,
    dataset_dir: str | Path,
    folds: list[set[str]],
    cfg: RunConfig,
    out_dir: str | Path,
    val_fold: int = 0,
    mask_sink: Callable[[int, StepReport], None] | None = None,
) -> TrainReport:
    """Run the optimization loop with fold ``val_fold`` held out.

    Slides are visited in a per-epoch shuffled order; after each epoch the
    held-out fold's AUC (masking disabled) decides early stopping; the
    best-AUC checkpoint and a per-epoch metrics CSV are written to
    ``out_dir``.  ``mask_sink`` receives (epoch, StepReport) for mask
    auditing.
    """
    if not 0 <= val_fold < len(folds):
        raise ValueError(f"val_fold {val_fold} out of range for {len(folds)} folds")
    val_ids = sorted(folds[val_fold])
    train_ids = sorted(set().union(*(f for i, f in enumerate(folds) if i != val_fold)))
    if not val_ids:
        raise ValueError("validation fold is empty")
    if not train_ids:
        raise ValueError("training folds are empty")

    bags = {sid: read_slide_by_id(manifest, dataset_dir, sid) for sid in val_ids + train_ids}
    val_labels = [bags[sid].label for sid in val_ids]
    if len(set(val_labels)) < 2:
        raise ValueError("validation fold holds a single class; AUC is undefined")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / f"checkpoint_fold{val_fold}.ckpt"
    csv_path = out / f"metrics_fold{val_fold}.csv"

    params = init_params(cfg.d_in, cfg.d, cfg.h, cfg.c, rng.child_seed(cfg.seed, "init", val_fold))
    state = init_adam(params)

    history: dict[str, list[float]] = {k: [] for k in ("cls", "pseudo", "consistency", "total", "val_auc")}
    csv_rows = [METRICS_HEADER]
    best_auc = -np.inf
    best_epoch = -1
    stale = 0
    stop_epoch = cfg.epochs - 1

    for epoch in range(cfg.epochs):
        epoch_seed = rng.child_seed(cfg.seed, "fold", val_fold, "epoch", epoch)
        order = rng.stream(epoch_seed, "order").permutation(len(train_ids))
        sums = {"cls": 0.0, "pseudo": 0.0, "consistency": 0.0, "total": 0.0}
        for i in order:
            report, params, state = train_step(params, state, bags[train_ids[i]], cfg, epoch_seed)
            for key in sums:
                sums[key] += getattr(report, key)
            if mask_sink is not None:
                mask_sink(epoch, report)
        means = {k: v / len(train_ids) for k, v in sums.items()}

        scores = [float(predict_proba(params, bags[sid], cfg.use_group_tokens)[1]) for sid in val_ids]
        val_auc = auc(scores, val_labels)

        for key, value in means.items():
            history[key].append(value)
        history["val_auc"].append(val_auc)
        csv_rows.append(
            f"{epoch},{means['cls']!r},{means['pseudo']!r},{means['consistency']!r},"
            f"{means['total']!r},{val_auc!r}"
        )

        if val_auc > best_auc:
            best_auc = val_auc
            best_epoch = epoch
            stale = 0
            save_checkpoint(
                ckpt_path,
                params,
                seed=cfg.seed,
                step=state.step,
                extra={"use_group_tokens": cfg.use_group_tokens, "epoch": epoch, "val_auc": val_auc},
            )
        else:
            stale += 1
            if stale > cfg.patience:
                stop_epoch = epoch
                break
        stop_epoch = epoch

    csv_path.write_text("\n".join(csv_rows) + "\n", encoding="utf-8")
    report = TrainReport(
        fold=val_fold,
        epochs_run=len(history["val_auc"]),
        stop_epoch=stop_epoch,
        best_epoch=best_epoch,
        best_val_auc=float(best_auc),
        checkpoint_path=str(ckpt_path),
        metrics_csv_path=str(csv_path),
        train_cls=history["cls"],
        train_pseudo=history["pseudo"],
        train_consistency=history["consistency"],
        train_total=history["total"],
        val_auc=history["val_auc"],
    )
    (out / f"report_fold{val_fold}.json").write_text(
        json.dumps(report.to_dict(), indent=1), encoding="utf-8"
    )
    return report
