"""Consistency and alignment metrics over frames, flow fields and embeddings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, ValidationError
from .splatter import check_frame

BC_FLOOR = 1e-12
DEFAULT_BINS = 256


@dataclass(frozen=True, eq=False)
class ColorHistogram:
    bins: np.ndarray  # (channels, bin_count), each row sums to 1

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=np.float64)
        if b.ndim == 1:
            b = b[None, :]
        if b.ndim != 2 or b.shape[1] < 1:
            raise ValidationError(f"histogram must be (channels, bins), got {b.shape}")
        if np.any(b < 0) or not np.all(np.isfinite(b)):
            raise ValidationError("histogram bins must be finite and nonnegative")
        if np.any(np.abs(b.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError("each histogram channel must sum to 1")
        object.__setattr__(self, "bins", b)

    @property
    def bin_count(self) -> int:
        return self.bins.shape[1]


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement from frame t to t+1, arrays shaped (height, width)."""

    u: np.ndarray
    v: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        valid = np.ones(u.shape, bool) if self.valid is None else np.asarray(self.valid, bool)
        if u.ndim != 2 or u.shape != v.shape or u.shape != valid.shape:
            raise ValidationError(
                f"flow planes must share a 2-D shape; got u {u.shape}, v {v.shape}, valid {valid.shape}"
            )
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))


def histogram_of(frame, bin_count: int = DEFAULT_BINS, crop: Optional[Sequence[int]] = None) -> ColorHistogram:
    """Per-channel normalized histogram with uniform bins over [0, 1].

    ``crop`` is an optional ``(x0, y0, x1, y1)`` half-open pixel rectangle.
    A value of exactly 1.0 lands in the top bin.
    """
    if int(bin_count) != bin_count or bin_count < 2:
        raise ValidationError(f"bin_count must be an integer >= 2, got {bin_count}")
    img = check_frame(frame)
    if crop is not None:
        x0, y0, x1, y1 = (int(c) for c in crop)
        img = img[y0:y1, x0:x1]
        if img.size == 0:
            raise ValidationError(f"crop {tuple(crop)} selects no pixels")
    bins = np.empty((3, int(bin_count)))
    for c in range(3):
        counts, _ = np.histogram(img[..., c], bins=int(bin_count), range=(0.0, 1.0))
        total = counts.sum()
        if total == 0:
            raise ValidationError("frame has no pixel values inside [0, 1]")
        bins[c] = counts / total
    return ColorHistogram(bins)


def _as_hist(h) -> np.ndarray:
    return h.bins if isinstance(h, ColorHistogram) else ColorHistogram(h).bins


def bhattacharyya_distance(p, q) -> float:
    """Mean over channels of ``-ln(max(sum sqrt(p q), 1e-12))``."""
    p, q = _as_hist(p), _as_hist(q)
    if p.shape != q.shape:
        raise ValidationError(f"histogram shapes differ: {p.shape} vs {q.shape}")
    # dividing by the channel masses only absorbs rounding in the normalization,
    # and makes BC(p, p) exactly 1
    bc = np.sqrt(p * q).sum(axis=1) / np.sqrt(p.sum(axis=1) * q.sum(axis=1))
    # rounding can push BC a hair above 1; the distance is never negative
    d = -np.log(np.clip(bc, BC_FLOOR, 1.0))
    return float(d.mean())


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W, C) at float coordinates already inside the image."""
    h, w = img.shape[:2]
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def warp_error(frame_t, frame_t1, flow: FlowField) -> float:
    """Mean absolute RGB difference between ``frame_t`` and ``frame_t1``
    warped back along ``flow``.

    Only pixels flagged valid whose flow target lands inside the image count.
    """
    a = check_frame(frame_t, where="frame_t")
    b = check_frame(frame_t1, where="frame_t1")
    if a.shape != b.shape:
        raise ValidationError(f"frame sizes differ: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    if flow.u.shape != (h, w):
        raise ValidationError(f"flow is {flow.u.shape[1]}x{flow.u.shape[0]}, frames are {w}x{h}")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tx = xs + flow.u
    ty = ys + flow.v
    use = flow.valid & (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    if not use.any():
        raise ValidationError("no valid in-bounds flow pixels")
    warped = bilinear_sample(b, tx[use], ty[use])
    return float(np.abs(a[use] - warped).mean())


def _vector(x, name) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} must be a finite non-empty vector")
    return v


def _unit(v: np.ndarray, name: str) -> np.ndarray:
    n = np.linalg.norm(v)
    if n <= 1e-9:
        raise DegenerateInputError(f"{name} has near-zero norm ({n:.3g})")
    return v / n


def clip_s(a, b) -> float:
    """Cosine similarity of two image embeddings."""
    a, b = _vector(a, "a"), _vector(b, "b")
    if a.shape != b.shape:
        raise ValidationError(f"embedding dimensions differ: {a.size} vs {b.size}")
    return float(np.clip(_unit(a, "a") @ _unit(b, "b"), -1.0, 1.0))


def clip_ds(img_src, img_edit, txt_src, txt_target) -> float:
    """Cosine between the image edit direction and the text edit direction."""
    vecs = [_vector(x, n) for x, n in ((img_src, "img_src"), (img_edit, "img_edit"),
                                        (txt_src, "txt_src"), (txt_target, "txt_target"))]
    if len({v.size for v in vecs}) != 1:
        raise ValidationError(f"embedding dimensions differ: {[v.size for v in vecs]}")
    d_img = _unit(vecs[1] - vecs[0], "image direction")
    d_txt = _unit(vecs[3] - vecs[2], "text direction")
    return float(np.clip(d_img @ d_txt, -1.0, 1.0))
