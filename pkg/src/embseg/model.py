"""Per-pixel embedding predictor plus the box-distillation branch.

The backbone is a per-pixel affine/relu stack (no spatial mixing), so the
H x W grid is flattened to rows for every pass. The distillation branch is
a 1x1 projection (a C->C matmul, identity at init) followed by average
pooling over an exact box crop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from embseg.autodiff import ShapeError, Tensor, add_bias, load_tensor, matmul, save_tensor


@dataclass(frozen=True)
class Box:
    """Half-open pixel rectangle: rows [row0, row1), cols [col0, col1)."""

    row0: int
    col0: int
    row1: int
    col1: int

    def validate(self, height: int, width: int) -> None:
        if not (0 <= self.row0 < self.row1 <= height and 0 <= self.col0 < self.col1 <= width):
            raise ValueError(f"box {self} invalid for {height}x{width} map")

    @property
    def area(self) -> int:
        return (self.row1 - self.row0) * (self.col1 - self.col0)


@dataclass(frozen=True)
class EmbeddingMap:
    """H x W x C grid of predicted embeddings, kept on the tape."""

    height: int
    width: int
    channels: int
    values: Tensor


class SegModel:
    """Affine/relu stack over feature vectors, projection head, log temperature."""

    def __init__(self, widths: list[int], layers: list[tuple[Tensor, Tensor]], proj: Tensor, log_tau: Tensor):
        self.widths = list(widths)
        self.layers = layers
        self.proj = proj
        self.log_tau = log_tau

    @property
    def feature_dim(self) -> int:
        return self.widths[0]

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]

    def tau(self) -> Tensor:
        """Temperature as exp(log_tau); positive by construction."""
        return self.log_tau.exp()

    def parameters(self) -> dict[str, Tensor]:
        """Stable name -> Tensor mapping; iteration order fixes update order."""
        params: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(self.layers):
            params[f"layers.{i}.weight"] = w
            params[f"layers.{i}.bias"] = b
        params["proj"] = self.proj
        params["log_tau"] = self.log_tau
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


def init_model(feature_dim: int, hidden: list[int], embed_dim: int, seed: int, tau_init: float = 0.07) -> SegModel:
    """Uniform(-s, s) weights with s = sqrt(6/(fan_in+fan_out)), zero biases.

    The projection starts as identity and tau at ``tau_init``; an empty
    ``hidden`` list gives a single affine map.
    """
    if feature_dim < 1 or embed_dim < 1:
        raise ValueError(f"init_model: dims must be >= 1, got F={feature_dim}, C={embed_dim}")
    if tau_init <= 0.0:
        raise ValueError(f"init_model: tau_init must be positive, got {tau_init}")
    widths = [int(feature_dim), *[int(h) for h in hidden], int(embed_dim)]
    rng = np.random.default_rng(seed)
    layers: list[tuple[Tensor, Tensor]] = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        w = Tensor(rng.uniform(-s, s, size=(fan_in, fan_out)), requires_grad=True)
        b = Tensor(np.zeros(fan_out), requires_grad=True)
        layers.append((w, b))
    proj = Tensor(np.eye(embed_dim), requires_grad=True)
    log_tau = Tensor(np.log(tau_init), requires_grad=True)
    return SegModel(widths, layers, proj, log_tau)


def forward(model: SegModel, features) -> EmbeddingMap:
    """Apply the stack to every pixel independently; relu between layers only."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.data.ndim != 3 or feats.data.shape[2] != model.feature_dim:
        raise ShapeError(
            f"forward: expected H x W x {model.feature_dim} features, got {feats.data.shape}"
        )
    h, w = feats.data.shape[:2]
    x = feats.reshape(h * w, model.feature_dim)
    last = len(model.layers) - 1
    for i, (weight, bias) in enumerate(model.layers):
        x = add_bias(matmul(x, weight), bias)
        if i != last:
            x = x.relu()
    return EmbeddingMap(h, w, model.embed_dim, x.reshape(h, w, model.embed_dim))


def roi_embed(model: SegModel, emb_map: EmbeddingMap, box: Box) -> Tensor:
    """Project the crop through the 1x1 head, then average over its pixels."""
    box.validate(emb_map.height, emb_map.width)
    crop = emb_map.values[box.row0 : box.row1, box.col0 : box.col1, :]
    flat = crop.reshape(box.area, emb_map.channels)
    return matmul(flat, model.proj).mean(axis=0)


# -- checkpoints ---------------------------------------------------------------


def save_model(model: SegModel, directory) -> None:
    """Write one tensor file per parameter plus a manifest of names and shapes."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    manifest = {
        "widths": model.widths,
        "params": {name: list(p.data.shape) for name, p in params.items()},
    }
    (out / "model.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    for name, p in params.items():
        save_tensor(out / f"{name}.tnsr", p.data)


def load_model(directory) -> SegModel:
    src = Path(directory)
    manifest = json.loads((src / "model.json").read_text(encoding="utf-8"))
    widths = [int(v) for v in manifest["widths"]]
    model = init_model(widths[0], widths[1:-1], widths[-1], seed=0)
    for name, p in model.parameters().items():
        shape = tuple(manifest["params"][name])
        data = load_tensor(src / f"{name}.tnsr")
        if data.shape != shape or shape != p.data.shape:
            raise ValueError(f"checkpoint {name}: shape {data.shape} does not match manifest {shape}")
        p.data = data
        p.grad = np.zeros_like(p.data)
    return model
