"""SGD training loop, retrieval inference, mIoU, and zero-shot evaluation.

The loop is single-threaded and fully determined by the config seed:
model init, batching, and data draws each use a named substream. Per-step
loss terms are averaged per tier inside the batch, then summed, so a tier
contributes the same gradient scale regardless of how many samples of it
landed in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from embseg.autodiff import NORM_EPS, DomainError, Tensor, backward
from embseg.labels import LabelSpace, extend
from embseg.losses import (
    CSV_HEADER,
    BoxSupervision,
    EmptyBatchError,
    LossBreakdown,
    PixelSupervision,
    loss_hd,
    loss_ld,
    loss_wd,
    total_loss,
)
from embseg.model import SegModel, forward, init_model
from embseg.synth import SynthWorld, balanced_batches, substream


class TrainingAbortError(RuntimeError):
    """Optimization hit a non-finite value and cannot continue."""


class UndefinedMetricError(ValueError):
    """Metric requested on an input with no valid pixels."""


@dataclass
class TrainConfig:
    total_steps: int
    batch_size: int
    lr0: float = 0.01
    momentum: float = 0.9
    poly_power: float = 0.9
    keep_fraction: float = 0.7
    tau_init: float = 0.07
    hidden: tuple[int, ...] = (32,)
    use_hd: bool = True
    use_ld: bool = False
    use_wd: bool = False
    seed: int = 0

    def problems(self) -> list[str]:
        """Every constraint violation, not just the first."""
        out = []
        if self.total_steps < 1:
            out.append(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 <= 0:
            out.append(f"lr0 must be > 0, got {self.lr0}")
        if self.momentum < 0 or self.momentum >= 1:
            out.append(f"momentum must be in [0, 1), got {self.momentum}")
        if self.poly_power <= 0:
            out.append(f"poly_power must be > 0, got {self.poly_power}")
        if not 0 < self.keep_fraction <= 1:
            out.append(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.tau_init <= 0:
            out.append(f"tau_init must be > 0, got {self.tau_init}")
        if any(int(h) < 1 for h in self.hidden):
            out.append(f"hidden widths must be >= 1, got {self.hidden}")
        return out

    def validated(self) -> "TrainConfig":
        issues = self.problems()
        if issues:
            raise ValueError("; ".join(issues))
        return self


@dataclass
class MetricsReport:
    rows: list[str] = field(default_factory=list)  # formatted CSV rows, one per step
    miou: float = float("nan")
    per_class_iou: list[float] = field(default_factory=list)
    zero_shot: dict | None = None


def poly_lr(step: int, cfg: TrainConfig) -> float:
    """lr0 * (1 - step/total)^power, clamped to 0 past the end."""
    if step < 0:
        raise ValueError(f"poly_lr: step must be >= 0, got {step}")
    if step >= cfg.total_steps:
        return 0.0
    return cfg.lr0 * (1.0 - step / cfg.total_steps) ** cfg.poly_power


def sgd_step(model: SegModel, lr: float, momentum: float, velocities: dict[str, np.ndarray]) -> None:
    """Momentum update on every parameter, then clear gradients."""
    for name, p in model.parameters().items():
        if not np.all(np.isfinite(p.grad)):
            raise TrainingAbortError(f"non-finite gradient in parameter {name}")
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + p.grad
        velocities[name] = v
        p.data = p.data - lr * v
    model.zero_grad()


def _batch_terms(model: SegModel, batch, space: LabelSpace, cfg: TrainConfig):
    """Per-tier mean losses over one batch; returns (hd, ld, wd, kept_fraction)."""
    enabled = {"HD": cfg.use_hd, "LD": cfg.use_ld, "WD": cfg.use_wd}
    tau = model.tau()
    tier_losses: dict[str, list[Tensor]] = {"HD": [], "LD": [], "WD": []}
    kepts: list[float] = []
    for sample in batch:
        if not enabled[sample.tier]:
            continue
        emb = forward(model, sample.features)
        if sample.tier == "HD":
            tier_losses["HD"].append(loss_hd(emb, sample.payload, space, tau))
        elif sample.tier == "LD":
            value, kept = loss_ld(emb, sample.payload, space, tau, cfg.keep_fraction)
            tier_losses["LD"].append(value)
            kepts.append(kept)
        else:
            tier_losses["WD"].append(loss_wd(model, emb, sample.payload))

    def tier_mean(values: list[Tensor]) -> Tensor | None:
        if not values:
            return None
        acc = values[0]
        for v in values[1:]:
            acc = acc + v
        return acc / len(values)

    hd = tier_mean(tier_losses["HD"])
    ld = tier_mean(tier_losses["LD"])
    wd = tier_mean(tier_losses["WD"])
    kept = float(np.mean(kepts)) if kepts else 0.0
    return hd, ld, wd, kept


def train(cfg: TrainConfig, world: SynthWorld, pools, model: SegModel | None = None) -> tuple[SegModel, MetricsReport]:
    """Optimize on balanced batches; returns the model and per-step metrics.

    ``pools`` is a list of sample lists (one per synthetic dataset). The
    final report carries training-set mIoU over every pool's retained truth.
    Passing ``model`` fine-tunes it in place instead of initializing fresh.
    """
    cfg.validated()
    space = world.space
    if model is None:
        init_seed = int(substream(cfg.seed, "init").integers(2**63))
        model = init_model(world.feature_dim, list(cfg.hidden), space.dim, init_seed, cfg.tau_init)
    elif model.feature_dim != world.feature_dim or model.embed_dim != space.dim:
        raise ValueError(
            f"train: model dims F={model.feature_dim}, C={model.embed_dim} do not match "
            f"world F={world.feature_dim}, C={space.dim}"
        )
    stream = balanced_batches(pools, cfg.batch_size, cfg.seed)
    velocities: dict[str, np.ndarray] = {}
    report = MetricsReport()

    for step in range(cfg.total_steps):
        batch = next(stream)
        hd, ld, wd, kept = _batch_terms(model, batch, space, cfg)
        try:
            total, breakdown = total_loss(hd, ld, wd, kept_fraction=kept)
        except EmptyBatchError:
            raise EmptyBatchError(f"step {step}: no enabled supervision tier in batch") from None
        if not np.isfinite(breakdown.total):
            raise TrainingAbortError(f"step {step}: non-finite total loss {breakdown.total}")
        backward(total)
        sgd_step(model, poly_lr(step, cfg), cfg.momentum, velocities)
        report.rows.append(breakdown.csv_row(step, float(model.tau().data)))

    report.miou, report.per_class_iou = evaluate_pools(model, pools, space)
    return model, report


# -- inference and metrics --------------------------------------------------------


def infer(model: SegModel, features, space: LabelSpace) -> np.ndarray:
    """Per-pixel nearest label by cosine; ties resolve to the lowest id."""
    emb = forward(model, features).values.data
    norms = np.linalg.norm(emb, axis=-1, keepdims=True)
    if np.any(norms < NORM_EPS):
        raise DomainError("infer: zero-norm predicted embedding")
    scores = (emb / (norms + NORM_EPS)) @ space.E.T
    return scores.argmax(axis=-1).astype(np.int64)


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, n_labels: int) -> np.ndarray:
    """n x n counts over non-ignore pixels; rows = truth, cols = prediction."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"confusion_matrix: shapes differ, {pred.shape} vs {truth.shape}")
    valid = truth >= 0
    if pred[valid].size and (pred[valid].min() < 0 or pred[valid].max() >= n_labels):
        raise ValueError("confusion_matrix: prediction id out of range")
    if valid.any() and truth[valid].max() >= n_labels:
        raise ValueError("confusion_matrix: truth id out of range")
    flat = truth[valid] * n_labels + pred[valid]
    return np.bincount(flat, minlength=n_labels * n_labels).reshape(n_labels, n_labels)


def iou_from_confusion(cm: np.ndarray) -> tuple[float, list[float]]:
    """(mIoU, per-class IoU); classes untouched by both sides hold NaN."""
    if cm.sum() == 0:
        raise UndefinedMetricError("no valid pixels")
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    per_class = np.full(cm.shape[0], np.nan)
    touched = union > 0
    per_class[touched] = inter[touched] / union[touched]
    return float(np.nanmean(per_class)), [float(v) for v in per_class]


def miou(pred: np.ndarray, truth: np.ndarray, n_labels: int) -> tuple[float, list[float]]:
    """Single-map mIoU; ignore pixels (truth -1) are excluded everywhere."""
    return iou_from_confusion(confusion_matrix(pred, truth, n_labels))


def evaluate_pools(model: SegModel, pools, space: LabelSpace) -> tuple[float, list[float]]:
    """Confusion accumulated across every sample in every pool."""
    cm = np.zeros((len(space), len(space)), dtype=np.int64)
    for pool in pools:
        for sample in pool:
            cm += confusion_matrix(infer(model, sample.features, space), sample.truth, len(space))
    return iou_from_confusion(cm)


def zero_shot_eval(model: SegModel, base_space: LabelSpace, heldout, test_scenes) -> MetricsReport:
    """Extend the space with unseen labels, then score scenes containing them.

    ``heldout`` is a list of (name, description, embedding) triples; ids
    continue after the base space. Scenes are (features, truth) pairs with
    truth ids in the extended space.
    """
    space = base_space
    heldout_ids = []
    for name, description, embedding in heldout:
        space = extend(space, name, description, embedding)
        heldout_ids.append(len(space) - 1)
    cm = np.zeros((len(space), len(space)), dtype=np.int64)
    for features, truth in test_scenes:
        cm += confusion_matrix(infer(model, features, space), truth, len(space))
    overall, per_class = iou_from_confusion(cm)
    report = MetricsReport(miou=overall, per_class_iou=per_class)
    report.zero_shot = {
        "heldout_iou": {space.records[i].name: per_class[i] for i in heldout_ids},
        "heldout_miou": float(np.nanmean([per_class[i] for i in heldout_ids])) if heldout_ids else overall,
    }
    return report


# -- serialization -----------------------------------------------------------------


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in report.rows:
            fh.write(row + "\n")


def _denan(obj):
    if isinstance(obj, float) and np.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _denan(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_denan(v) for v in obj]
    return obj


def report_payload(report: MetricsReport, cfg: TrainConfig | None = None) -> dict:
    """JSON-ready report body; NaN IoUs (untouched classes) encode as null."""
    payload = {
        "miou": _denan(report.miou),
        "per_class_iou": [None if np.isnan(v) else v for v in report.per_class_iou],
        "zero_shot": _denan(report.zero_shot),
    }
    if cfg is not None:
        echo = asdict(cfg)
        echo["hidden"] = list(echo["hidden"])
        payload["config"] = echo
    return payload
