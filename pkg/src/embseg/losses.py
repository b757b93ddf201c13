"""Supervision tiers: dense cross-entropy, rejection-masked noisy loss, box distillation.

All three losses read the same cosine-softmax head: pixel embeddings are
L2-normalized, dotted against the normalized label matrix, and tempered by
a learnable tau. The noisy-data loss ranks per-pixel losses within one
image, keeps the floor(keep_fraction * M) lowest (ties by row-major pixel
index), and divides by M; the ranking itself never carries gradient.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from embseg.autodiff import NORM_EPS, ShapeError, Tensor, gather_rows, l2_normalize, matmul, softmax_with_temperature
from embseg.labels import LabelSpace
from embseg.model import Box, EmbeddingMap, SegModel, roi_embed

CSV_HEADER = "step,l_hd,l_ld,l_wd,total,kept_fraction,tau"


class EmptySupervisionError(ValueError):
    """A loss term was requested with no valid pixels or boxes."""


class EmptyBatchError(ValueError):
    """No loss term present at all."""


@dataclass(frozen=True)
class PixelSupervision:
    """H x W integer label map; -1 marks ignored pixels."""

    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.labels.ndim != 2:
            raise ValueError(f"labels must be 2-D, got shape {self.labels.shape}")

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.labels >= 0))

    def check_range(self, n_labels: int) -> None:
        valid = self.labels[self.labels >= 0]
        if valid.size and int(valid.max()) >= n_labels:
            raise ValueError(f"label id {int(valid.max())} out of range for {n_labels} labels")


@dataclass(frozen=True)
class BoxSupervision:
    """Per-box teacher embeddings; box list and teacher list run in parallel."""

    boxes: tuple[Box, ...]
    teachers: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.boxes) != len(self.teachers):
            raise ValueError("boxes and teachers differ in length")
        object.__setattr__(self, "teachers", tuple(np.asarray(t, dtype=np.float64) for t in self.teachers))

    @property
    def count(self) -> int:
        return len(self.boxes)


@dataclass
class LossBreakdown:
    """Scalar summary of one step; absent terms are zero."""

    l_hd: float = 0.0
    l_ld: float = 0.0
    l_wd: float = 0.0
    total: float = 0.0
    kept_fraction: float = 0.0
    per_pixel: np.ndarray | None = field(default=None, repr=False)

    def csv_row(self, step: int, tau: float) -> str:
        cells = [str(step)] + [
            repr(float(v)) for v in (self.l_hd, self.l_ld, self.l_wd, self.total, self.kept_fraction, tau)
        ]
        return ",".join(cells)


def pixel_probs(emb_map: EmbeddingMap, space: LabelSpace, tau) -> Tensor:
    """H x W x N label distribution per pixel: softmax of cosines over tau."""
    if emb_map.channels != space.dim:
        raise ShapeError(f"pixel_probs: map has C={emb_map.channels}, space dim {space.dim}")
    flat = emb_map.values.reshape(emb_map.height * emb_map.width, emb_map.channels)
    cosines = matmul(l2_normalize(flat), Tensor(space.E.T))
    probs = softmax_with_temperature(cosines, tau)
    return probs.reshape(emb_map.height, emb_map.width, len(space))


def _valid_pixel_ce(emb_map: EmbeddingMap, sup: PixelSupervision, space: LabelSpace, tau):
    """Cross-entropy per valid pixel, in row-major pixel order.

    Returns (ce Tensor of shape (M,), flat indices of the valid pixels).
    """
    if sup.labels.shape != (emb_map.height, emb_map.width):
        raise ShapeError(
            f"supervision shape {sup.labels.shape} does not match map {emb_map.height}x{emb_map.width}"
        )
    sup.check_range(len(space))
    flat_labels = sup.labels.ravel()
    valid_idx = np.flatnonzero(flat_labels >= 0)
    if valid_idx.size == 0:
        raise EmptySupervisionError("no valid pixels (all ignore)")
    n = len(space)
    probs = pixel_probs(emb_map, space, tau).reshape(emb_map.height * emb_map.width, n)
    picked = gather_rows(probs, valid_idx)
    onehot = np.zeros((valid_idx.size, n))
    onehot[np.arange(valid_idx.size), flat_labels[valid_idx]] = 1.0
    ce = -((picked.log() * Tensor(onehot)).sum(axis=1))
    return ce, valid_idx


def _diag_map(ce: Tensor, valid_idx: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = np.full(shape[0] * shape[1], np.nan)
    out[valid_idx] = ce.data
    return out.reshape(shape)


def loss_hd(emb_map: EmbeddingMap, sup: PixelSupervision, space: LabelSpace, tau) -> Tensor:
    """Mean over valid pixels of -log(prob of the annotated label)."""
    ce, _ = _valid_pixel_ce(emb_map, sup, space, tau)
    return ce.mean()


def loss_ld(
    emb_map: EmbeddingMap,
    sup: PixelSupervision,
    space: LabelSpace,
    tau,
    keep_fraction: float = 0.7,
    kept_index: np.ndarray | None = None,
) -> tuple[Tensor, float]:
    """Rejection-masked cross-entropy: keep the lowest-loss pixels, divide by M.

    ``kept_index`` (positions into the valid-pixel vector) bypasses the
    ranking; gradient checks use it to hold the mask fixed while probing.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    ce, _ = _valid_pixel_ce(emb_map, sup, space, tau)
    m = ce.data.size
    if kept_index is None:
        k = int(np.floor(keep_fraction * m))
        if k == 0:
            warnings.warn("loss_ld: keep_fraction rejects every pixel", stacklevel=2)
            return Tensor(0.0), 0.0
        # stable sort: equal losses keep row-major pixel order
        kept_index = np.argsort(ce.data, kind="stable")[:k]
    mask = np.zeros(m)
    mask[kept_index] = 1.0
    return (ce * Tensor(mask)).sum() / m, float(kept_index.size) / m


def loss_wd(model: SegModel, emb_map: EmbeddingMap, sup: BoxSupervision) -> Tensor:
    """Mean L1 gap between normalized pooled predictions and normalized teachers."""
    if sup.count == 0:
        raise EmptySupervisionError("no boxes")
    total = None
    for box, teacher in zip(sup.boxes, sup.teachers):
        if teacher.shape != (emb_map.channels,):
            raise ShapeError(f"teacher shape {teacher.shape} does not match C={emb_map.channels}")
        norm = np.linalg.norm(teacher)
        if norm < NORM_EPS:
            raise ValueError("zero-norm teacher embedding")
        target = teacher / (norm + NORM_EPS)
        pooled = l2_normalize(roi_embed(model, emb_map, box))
        gap = (Tensor(target) - pooled).abs().sum()
        total = gap if total is None else total + gap
    return total / sup.count


def total_loss(
    l_hd_term: Tensor | None = None,
    l_ld_term: Tensor | None = None,
    l_wd_term: Tensor | None = None,
    kept_fraction: float = 0.0,
    per_pixel: np.ndarray | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Sum the present terms; report every component (absent ones as 0)."""
    terms = [t for t in (l_hd_term, l_ld_term, l_wd_term) if t is not None]
    if not terms:
        raise EmptyBatchError("no loss terms present")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    breakdown = LossBreakdown(
        l_hd=float(l_hd_term.data) if l_hd_term is not None else 0.0,
        l_ld=float(l_ld_term.data) if l_ld_term is not None else 0.0,
        l_wd=float(l_wd_term.data) if l_wd_term is not None else 0.0,
        total=float(total.data),
        kept_fraction=kept_fraction,
        per_pixel=per_pixel,
    )
    return total, breakdown


def per_pixel_ce_map(emb_map: EmbeddingMap, sup: PixelSupervision, space: LabelSpace, tau) -> np.ndarray:
    """Detached H x W loss map for diagnostics; NaN on ignored pixels."""
    ce, valid_idx = _valid_pixel_ce(emb_map, sup, space, tau)
    return _diag_map(ce, valid_idx, (emb_map.height, emb_map.width))
