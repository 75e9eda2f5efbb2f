"""Attention-pooled MIL backbone with hand-derived gradients.

The network is: linear projection + ReLU, tanh attention scores pooled by
softmax, and a linear classifier on the attention-weighted bag embedding.
Everything runs in float64 (the interchange format's float32 features are
widened on load) so the finite-difference gradient checker can hold a
1e-4 relative tolerance comfortably.

The backward pass is derived by hand; :func:`grad_check` verifies any
loss-and-gradient function against central finite differences and is the
module's own acceptance oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import rng

PARAM_FIELDS = ("W_proj", "b_proj", "V", "w", "W_cls", "b_cls")


@dataclass
class ModelParams:
    """All trainable tensors, in checkpoint field order."""

    W_proj: np.ndarray  # D_in x D
    b_proj: np.ndarray  # D
    V: np.ndarray  # D x H
    w: np.ndarray  # H
    W_cls: np.ndarray  # D x C
    b_cls: np.ndarray  # C

    def __post_init__(self) -> None:
        for name in PARAM_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d_in, d = self.W_proj.shape
        h = self.V.shape[1]
        c = self.W_cls.shape[1]
        expected = {
            "b_proj": (d,),
            "V": (d, h),
            "w": (h,),
            "W_cls": (d, c),
            "b_cls": (c,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(D_in, D, H, C)."""
        return (
            self.W_proj.shape[0],
            self.W_proj.shape[1],
            self.V.shape[1],
            self.W_cls.shape[1],
        )

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in PARAM_FIELDS]

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: getattr(self, name).copy() for name in PARAM_FIELDS})


@dataclass
class Gradients:
    """Co-shaped with ModelParams, plus the gradient w.r.t. the input tokens."""

    W_proj: np.ndarray
    b_proj: np.ndarray
    V: np.ndarray
    w: np.ndarray
    W_cls: np.ndarray
    b_cls: np.ndarray
    d_features: np.ndarray  # N' x D_in

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in PARAM_FIELDS]

    def add_scaled(self, other: "Gradients", scale: float) -> None:
        """In-place: self += scale * other (including d_features, same shape)."""
        for name in PARAM_FIELDS + ("d_features",):
            getattr(self, name)[...] += scale * getattr(other, name)


def zero_gradients(params: ModelParams, n_tokens: int) -> Gradients:
    d_in = params.W_proj.shape[0]
    return Gradients(
        **{name: np.zeros_like(arr) for name, arr in params.blocks()},
        d_features=np.zeros((n_tokens, d_in)),
    )


@dataclass(frozen=True)
class ForwardTrace:
    """Every intermediate the backward pass needs."""

    tokens: np.ndarray  # N' x D_in
    pre_proj: np.ndarray  # N' x D (before ReLU)
    projected: np.ndarray  # N' x D
    tanh_out: np.ndarray  # N' x H
    pre_attn: np.ndarray  # N'
    attn: np.ndarray  # N'
    bag_embedding: np.ndarray  # D
    logits: np.ndarray  # C


def init_params(d_in: int, d: int, h: int, c: int, seed: int) -> ModelParams:
    """Uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out)); zero biases."""
    for name, value in (("d_in", d_in), ("d", d), ("h", h), ("c", c)):
        if value < 1:
            raise ValueError(f"{name} must be positive, got {value}")
    gen = rng.stream(seed, "init")

    def uniform(fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return gen.uniform(-s, s, size=shape)

    return ModelParams(
        W_proj=uniform(d_in, d, (d_in, d)),
        b_proj=np.zeros(d),
        V=uniform(d, h, (d, h)),
        w=uniform(h, 1, (h,)),
        W_cls=uniform(d, c, (d, c)),
        b_cls=np.zeros(c),
    )


def forward(params: ModelParams, tokens: np.ndarray) -> ForwardTrace:
    """Project, score, pool, classify; returns the full trace."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError(f"tokens must be a non-empty 2-D matrix, got shape {tokens.shape}")
    if tokens.shape[1] != params.W_proj.shape[0]:
        raise ValueError(
            f"token dim {tokens.shape[1]} does not match W_proj input dim {params.W_proj.shape[0]}"
        )
    pre_proj = tokens @ params.W_proj + params.b_proj
    projected = np.maximum(pre_proj, 0.0)
    tanh_out = np.tanh(projected @ params.V)
    pre_attn = tanh_out @ params.w
    shifted = pre_attn - pre_attn.max()
    e = np.exp(shifted)
    attn = e / e.sum()
    bag_embedding = attn @ projected
    logits = bag_embedding @ params.W_cls + params.b_cls
    return ForwardTrace(
        tokens=tokens,
        pre_proj=pre_proj,
        projected=projected,
        tanh_out=tanh_out,
        pre_attn=pre_attn,
        attn=attn,
        bag_embedding=bag_embedding,
        logits=logits,
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / e.sum()


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """Stabilized -log softmax(logits)[label]."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - logits[label])


def _attn_tail(
    params: ModelParams, trace: ForwardTrace, d_pre_attn: np.ndarray, grads: Gradients
) -> np.ndarray:
    """Backprop from pre-attention scores down to the inputs.

    Accumulates into ``grads`` (w, V, W_proj, b_proj, d_features) and
    returns the projection-path gradient d_projected contributed via the
    attention branch.
    """
    grads.w[...] += trace.tanh_out.T @ d_pre_attn
    d_tanh = np.outer(d_pre_attn, params.w)
    d_z = d_tanh * (1.0 - trace.tanh_out**2)
    grads.V[...] += trace.projected.T @ d_z
    return d_z @ params.V.T


def _projection_tail(
    params: ModelParams, trace: ForwardTrace, d_projected: np.ndarray, grads: Gradients
) -> None:
    d_pre_proj = d_projected * (trace.pre_proj > 0.0)
    grads.W_proj[...] += trace.tokens.T @ d_pre_proj
    grads.b_proj[...] += d_pre_proj.sum(axis=0)
    grads.d_features[...] += d_pre_proj @ params.W_proj.T


def backward(
    params: ModelParams, trace: ForwardTrace, label: int, upstream_scale: float = 1.0
) -> Gradients:
    """Analytic gradients of upstream_scale * cross_entropy(logits, label)."""
    n = trace.tokens.shape[0]
    if trace.projected.shape != (n, params.W_proj.shape[1]):
        raise ValueError("trace does not match params (stale or foreign trace)")
    grads = zero_gradients(params, n)
    if upstream_scale == 0.0:
        return grads
    p = softmax(trace.logits)
    d_logits = upstream_scale * p
    d_logits[label] -= upstream_scale
    grads.W_cls[...] = np.outer(trace.bag_embedding, d_logits)
    grads.b_cls[...] = d_logits
    d_bag = params.W_cls @ d_logits
    # bag_embedding = sum_i attn_i * projected_i
    d_attn = trace.projected @ d_bag
    d_projected = np.outer(trace.attn, d_bag)
    # softmax Jacobian: d_pre = attn * (d_attn - attn . d_attn)
    d_pre_attn = trace.attn * (d_attn - float(trace.attn @ d_attn))
    d_projected += _attn_tail(params, trace, d_pre_attn, grads)
    _projection_tail(params, trace, d_projected, grads)
    return grads


def backward_from_attn(params: ModelParams, trace: ForwardTrace, d_attn: np.ndarray) -> Gradients:
    """Gradients of a scalar whose only dependence on the model is via attn.

    Used by the attention-consistency regularizer: the upstream gradient
    w.r.t. the attention weights is chained through the softmax Jacobian and
    the attention branch only (the classifier path carries no gradient).
    """
    n = trace.tokens.shape[0]
    d_attn = np.asarray(d_attn, dtype=np.float64).reshape(-1)
    if d_attn.shape[0] != n:
        raise ValueError(f"d_attn has length {d_attn.shape[0]}, expected {n}")
    grads = zero_gradients(params, n)
    d_pre_attn = trace.attn * (d_attn - float(trace.attn @ d_attn))
    d_projected = _attn_tail(params, trace, d_pre_attn, grads)
    _projection_tail(params, trace, d_projected, grads)
    return grads


LossFn = Callable[[ModelParams, np.ndarray], tuple[float, Gradients]]


@dataclass(frozen=True)
class GradCheckReport:
    """Per-block max relative error of analytic vs numeric gradients."""

    per_block: dict[str, float]
    max_rel_error: float
    worst_block: str
    tolerance: float
    passed: bool

    def lines(self) -> list[str]:
        out = [
            f"  {name:<10s} max rel err {err:.3e}" for name, err in sorted(self.per_block.items())
        ]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(
            f"{verdict}: max relative error {self.max_rel_error:.3e} "
            f"(worst block {self.worst_block}, tolerance {self.tolerance:.1e})"
        )
        return out


def _rel_err(g_a: float, g_n: float) -> float:
    return abs(g_a - g_n) / max(abs(g_a), abs(g_n), 1e-8)


def check_loss_gradients(
    loss_fn: LossFn,
    params: ModelParams,
    tokens: np.ndarray,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    check_features: bool = True,
) -> GradCheckReport:
    """Central finite differences vs the analytic gradients of ``loss_fn``.

    ``loss_fn(params, tokens)`` must return (loss, Gradients).  Every scalar
    parameter (and, optionally, every token feature) is perturbed by ±h.
    """
    if h <= 0.0:
        raise ValueError(f"finite-difference step h must be positive, got {h}")
    tokens = np.asarray(tokens, dtype=np.float64)
    _, analytic = loss_fn(params, tokens)
    work = params.copy()
    per_block: dict[str, float] = {}

    def numeric_at(arr: np.ndarray, idx: tuple) -> float:
        orig = arr[idx]
        arr[idx] = orig + h
        lo_plus, _ = loss_fn(work, tokens)
        arr[idx] = orig - h
        lo_minus, _ = loss_fn(work, tokens)
        arr[idx] = orig
        return (lo_plus - lo_minus) / (2.0 * h)

    for name, arr in work.blocks():
        g_block = getattr(analytic, name)
        worst = 0.0
        for idx in np.ndindex(arr.shape):
            worst = max(worst, _rel_err(float(g_block[idx]), numeric_at(arr, idx)))
        per_block[name] = worst

    if check_features:
        tokens_work = tokens.copy()

        def numeric_tok(idx: tuple) -> float:
            orig = tokens_work[idx]
            tokens_work[idx] = orig + h
            lo_plus, _ = loss_fn(params, tokens_work)
            tokens_work[idx] = orig - h
            lo_minus, _ = loss_fn(params, tokens_work)
            tokens_work[idx] = orig
            return (lo_plus - lo_minus) / (2.0 * h)

        worst = 0.0
        for idx in np.ndindex(tokens.shape):
            worst = max(worst, _rel_err(float(analytic.d_features[idx]), numeric_tok(idx)))
        per_block["features"] = worst

    worst_block = max(per_block, key=per_block.get)
    max_err = per_block[worst_block]
    return GradCheckReport(
        per_block=per_block,
        max_rel_error=max_err,
        worst_block=worst_block,
        tolerance=tolerance,
        passed=max_err < tolerance,
    )


def grad_check(
    params: ModelParams,
    tokens: np.ndarray,
    label: int,
    h: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Check the plain cross-entropy backward pass against finite differences."""

    def loss_fn(p: ModelParams, toks: np.ndarray) -> tuple[float, Gradients]:
        trace = forward(p, toks)
        return cross_entropy(trace.logits, label), backward(p, trace, label)

    return check_loss_gradients(loss_fn, params, tokens, h=h, tolerance=tolerance)


# --- checkpoint format: one JSON header line, then raw little-endian float64
# --- blocks in ModelParams field order.


def save_checkpoint(
    path: str | Path, params: ModelParams, seed: int, step: int, extra: dict | None = None
) -> None:
    d_in, d, h, c = params.dims
    header = {
        "format": "segmil-checkpoint-v1",
        "dims": {"d_in": d_in, "d": d, "h": h, "c": c},
        "seed": int(seed),
        "step": int(step),
    }
    if extra:
        header.update(extra)
    payload = json.dumps(header).encode("utf-8") + b"\n"
    for _, arr in params.blocks():
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(payload)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: missing checkpoint header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
        dims = header["dims"]
        d_in, d, h, c = (int(dims[k]) for k in ("d_in", "d", "h", "c"))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed checkpoint header: {exc}") from exc
    shapes = {
        "W_proj": (d_in, d),
        "b_proj": (d,),
        "V": (d, h),
        "w": (h,),
        "W_cls": (d, c),
        "b_cls": (c,),
    }
    blob = raw[newline + 1 :]
    expected = 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(blob) != expected:
        raise ValueError(
            f"{path}: parameter payload is {len(blob)} bytes, expected {expected} for dims {dims}"
        )
    offset = 0
    arrays = {}
    for name in PARAM_FIELDS:
        shape = shapes[name]
        size = 8 * int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(blob[offset : offset + size], dtype="<f8").reshape(shape).copy()
        )
        offset += size
    return ModelParams(**arrays), header
