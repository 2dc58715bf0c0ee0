"""Reference kernels for temporal-view attention and the multi-style
low-rank adapter.

These are plain numpy implementations meant to be checked numerically; no
diffusion model is involved. Token matrices are (N, d) with one token per
row; projections act on the right (``Q = X @ Wq``).
"""
from __future__ import annotations

import math
from types import MappingProxyType
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import UnknownStyleError, ValidationError


def _matrix(x, name) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValidationError(f"{name} must be a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite entries")
    return a


def attention_weights(Q, K) -> np.ndarray:
    """Row-stochastic softmax(Q K^T / sqrt(d)), shape (N, M)."""
    Q, K = _matrix(Q, "Q"), _matrix(K, "K")
    if Q.shape[1] != K.shape[1]:
        raise ValidationError(f"Q and K disagree on d: {Q.shape[1]} vs {K.shape[1]}")
    logits = Q @ K.T / math.sqrt(Q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def scaled_dot_attention(Q, K, V) -> np.ndarray:
    V = _matrix(V, "V")
    K = _matrix(K, "K")
    if K.shape[0] != V.shape[0]:
        raise ValidationError(f"K has {K.shape[0]} rows but V has {V.shape[0]}")
    return attention_weights(Q, K) @ V


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    tokens: np.ndarray
    view_id: int
    frame_index: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", _matrix(self.tokens, f"grid ({self.frame_index}, {self.view_id})"))


@dataclass(eq=False)
class AttentionBatch:
    """Token grids for every (frame, view) plus shared projections.

    ``lam`` weighs self-attention against the cross-view + temporal terms.
    Missing projections default to identity.
    """

    grids: Mapping[tuple[int, int], FeatureGrid]
    center_view: int
    lam: float = 0.5
    wq: Optional[np.ndarray] = None
    wk: Optional[np.ndarray] = None
    wv: Optional[np.ndarray] = None

    def __post_init__(self):
        grids = {}
        for key, g in self.grids.items():
            if not isinstance(g, FeatureGrid):
                g = FeatureGrid(g, view_id=key[1], frame_index=key[0])
            grids[(int(key[0]), int(key[1]))] = g
        if not grids:
            raise ValidationError("attention batch has no grids")
        self.grids = grids
        shapes = {g.tokens.shape for g in grids.values()}
        if len(shapes) != 1:
            raise ValidationError(f"all grids must share (N, d); found {sorted(shapes)}")
        d = next(iter(shapes))[1]
        for f in {f for f, _ in grids}:
            if (f, self.center_view) not in grids:
                raise ValidationError(f"frame {f} has no center-view ({self.center_view}) grid")
        if not (0.0 <= self.lam <= 1.0):
            raise ValidationError(f"lambda must lie in [0, 1], got {self.lam}")
        for name in ("wq", "wk", "wv"):
            w = getattr(self, name)
            w = np.eye(d) if w is None else _matrix(w, name)
            if w.shape != (d, d):
                raise ValidationError(f"{name} must be {d}x{d}, got {w.shape}")
            setattr(self, name, w)

    def tokens(self, frame: int, view: int) -> np.ndarray:
        try:
            return self.grids[(frame, view)].tokens
        except KeyError:
            raise ValidationError(f"no grid for frame {frame}, view {view}") from None


def self_attn(batch: AttentionBatch, frame: int, view: int) -> np.ndarray:
    X = batch.tokens(frame, view)
    return scaled_dot_attention(X @ batch.wq, X @ batch.wk, X @ batch.wv)


def view_attn(batch: AttentionBatch, frame: int, view: int) -> np.ndarray:
    """Side-view queries against center-view keys and values."""
    if view == batch.center_view:
        raise ValidationError("view attention is defined for side views only")
    X = batch.tokens(frame, view)
    C = batch.tokens(frame, batch.center_view)
    return scaled_dot_attention(X @ batch.wq, C @ batch.wk, C @ batch.wv)


def temporal_neighbors(batch: AttentionBatch, frame: int, view: int) -> list[int]:
    return [t for t in (frame - 1, frame + 1) if (t, view) in batch.grids]


def temporal_attn(batch: AttentionBatch, frame: int, view: int) -> np.ndarray:
    """Queries from ``frame`` against the stacked grids of frames t-1 and t+1.

    At sequence ends only the neighbor that exists is used.
    """
    X = batch.tokens(frame, view)
    nbrs = temporal_neighbors(batch, frame, view)
    if not nbrs:
        raise ValidationError(f"frame {frame}, view {view} has no temporal neighbors")
    ctx = np.concatenate([batch.tokens(t, view) for t in nbrs], axis=0)
    return scaled_dot_attention(X @ batch.wq, ctx @ batch.wk, ctx @ batch.wv)


def tv_attn(batch: AttentionBatch, frame: int, view: int) -> np.ndarray:
    """lam * self + (1 - lam) * (view + temporal), unnormalized.

    For the center view the view term falls back to self-attention.
    """
    s = self_attn(batch, frame, view)
    v = s if view == batch.center_view else view_attn(batch, frame, view)
    t = temporal_attn(batch, frame, view)
    return batch.lam * s + (1.0 - batch.lam) * (v + t)


@dataclass(frozen=True, eq=False)
class AdapterStack:
    """One frozen base weight plus a low-rank update per style.

    Each style stores ``A`` (d_out x r) and ``B`` (r x d_in); the update
    ``A @ B`` is never materialized in the forward pass.
    """

    base: np.ndarray
    styles: Mapping[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        base = _matrix(self.base, "base")
        if base.flags.writeable:
            base = base.copy()
            base.flags.writeable = False
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "styles", MappingProxyType(dict(self.styles)))

    @property
    def rank(self) -> Optional[int]:
        for A, _ in self.styles.values():
            return A.shape[1]
        return None

    def delta(self, style: str) -> np.ndarray:
        A, B = self._lookup(style)
        return A @ B

    def _lookup(self, style):
        try:
            return self.styles[style]
        except KeyError:
            raise UnknownStyleError(
                f"style {style!r} is not registered (known: {sorted(self.styles)})"
            ) from None


def adapter_register_style(stack: AdapterStack, style_id: str, A, B) -> AdapterStack:
    """Return a new stack with ``style_id`` added; the input stack is untouched."""
    if style_id in stack.styles:
        raise ValidationError(f"style {style_id!r} is already registered")
    A = _matrix(A, "A").copy()
    B = _matrix(B, "B").copy()
    d_out, d_in = stack.base.shape
    r = A.shape[1]
    if A.shape[0] != d_out or B.shape != (r, d_in):
        raise ValidationError(
            f"style factors must be ({d_out}, r) and (r, {d_in}); got A {A.shape}, B {B.shape}"
        )
    if r > min(d_out, d_in):
        raise ValidationError(f"rank {r} exceeds min(d_out, d_in) = {min(d_out, d_in)}")
    if stack.rank is not None and r != stack.rank:
        raise ValidationError(f"all styles must share rank {stack.rank}, got {r}")
    A.flags.writeable = False
    B.flags.writeable = False
    return AdapterStack(stack.base, {**stack.styles, style_id: (A, B)})


def adapter_forward(stack: AdapterStack, style: str, x) -> np.ndarray:
    """``W0 x + A (B x)`` for a vector ``x`` or a batch with one sample per row."""
    A, B = stack._lookup(style)
    x = np.asarray(x, dtype=np.float64)
    d_in = stack.base.shape[1]
    if x.shape[-1] != d_in or x.ndim not in (1, 2):
        raise ValidationError(f"input must have trailing dimension {d_in}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("input has non-finite entries")
    if x.ndim == 1:
        return stack.base @ x + A @ (B @ x)
    return x @ stack.base.T + (x @ B.T) @ A.T
