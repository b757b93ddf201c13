"""Synthetic corpus: block-structured embeddings, rectangle scenes, annotation tiers.

Everything here is a deterministic function of one seed. Feature vectors
are linear in the label embedding (feature = A e + noise), so retrieval
back to the label is learnable by the per-pixel stack and exact when the
noise is zero. Scenes are recursive rectangle splits; each region's tight
bounding box is the rectangle itself, which the box tier uses verbatim.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from embseg.autodiff import load_tensor, save_tensor
from embseg.labels import LabelSpace, make_label_space
from embseg.losses import BoxSupervision, PixelSupervision
from embseg.model import Box

TIERS = ("HD", "LD", "WD")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named use of a run seed."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng([int(seed), tag])


@dataclass(frozen=True)
class SynthWorld:
    """Generative ground truth: label space, linear feature map, noise level."""

    space: LabelSpace
    A: np.ndarray
    noise_sigma: float
    blocks: np.ndarray  # label id -> block id

    @property
    def feature_dim(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class Scene:
    """One generated image: features, dense truth, and its region rectangles."""

    features: np.ndarray
    truth: np.ndarray
    regions: tuple[tuple[Box, int], ...]


@dataclass(frozen=True)
class AnnotatedSample:
    features: np.ndarray
    truth: np.ndarray
    tier: str
    payload: PixelSupervision | BoxSupervision
    dataset_id: int = 0


def make_embeddings(n_blocks: int, per_block: int, dim: int, within_corr: float, seed: int) -> LabelSpace:
    """Labels clustered into blocks; within_corr 0 gives unrelated directions.

    Each embedding mixes its block's unit center with an independent unit
    gaussian direction: sqrt(within_corr) * center + sqrt(1 - within_corr) * u.
    """
    if dim < n_blocks:
        raise ValueError(f"make_embeddings: dim {dim} < n_blocks {n_blocks}")
    if not 0.0 <= within_corr < 1.0:
        raise ValueError(f"make_embeddings: within_corr must be in [0, 1), got {within_corr}")
    if n_blocks < 1 or per_block < 1:
        raise ValueError("make_embeddings: need at least one block and one label per block")
    rng = substream(seed, "embeddings")

    def unit(v: np.ndarray) -> np.ndarray:
        return v / np.linalg.norm(v)

    centers = np.stack([unit(rng.standard_normal(dim)) for _ in range(n_blocks)])
    names, descriptions, vectors = [], [], []
    for b in range(n_blocks):
        for i in range(per_block):
            u = unit(rng.standard_normal(dim))
            vec = np.sqrt(within_corr) * centers[b] + np.sqrt(1.0 - within_corr) * u
            names.append(f"block{b}_label{i}")
            descriptions.append(f"synthetic label {i} of group {b}")
            vectors.append(unit(vec))
    return make_label_space(names, descriptions, vectors)


def block_assignment(n_blocks: int, per_block: int) -> np.ndarray:
    """Label id -> block id for spaces built by make_embeddings."""
    return np.repeat(np.arange(n_blocks), per_block)


def make_world(space: LabelSpace, feature_dim: int, noise_sigma: float, seed: int, blocks=None) -> SynthWorld:
    """Draw the linear feature map A; redraw if numerically rank-deficient."""
    if noise_sigma < 0.0:
        raise ValueError("make_world: noise_sigma must be >= 0")
    rng = substream(seed, "world")
    for _ in range(16):
        a = rng.standard_normal((feature_dim, space.dim)) / np.sqrt(space.dim)
        if np.linalg.svd(a, compute_uv=False).min() > 1e-6:
            break
    else:
        raise RuntimeError("make_world: could not draw a well-conditioned feature map")
    if blocks is None:
        blocks = np.zeros(len(space), dtype=np.int64)
    return SynthWorld(space, a, float(noise_sigma), np.asarray(blocks, dtype=np.int64))


def prototypes(world: SynthWorld) -> np.ndarray:
    """Per-label noise-free feature vectors, N x F."""
    return world.space.E @ world.A.T


def gen_scene(world: SynthWorld, height: int, width: int, n_regions: int, active, seed: int) -> Scene:
    """Split the grid into rectangles and fill each with one active label.

    Labels are assigned by cycling a shuffled copy of ``active``, so every
    active label appears whenever n_regions >= len(active).
    """
    active = np.asarray(active, dtype=np.int64)
    if active.size == 0:
        raise ValueError("gen_scene: active label list is empty")
    if active.min() < 0 or active.max() >= len(world.space):
        raise ValueError("gen_scene: active label out of range")
    if n_regions < 1 or n_regions > height * width:
        raise ValueError(f"gen_scene: n_regions {n_regions} not in [1, {height * width}]")
    rng = substream(seed, "scene")

    rects: list[tuple[int, int, int, int]] = [(0, 0, height, width)]
    while len(rects) < n_regions:
        areas = [(r1 - r0) * (c1 - c0) for r0, c0, r1, c1 in rects]
        i = int(np.argmax(areas))  # ties go to the lowest index
        r0, c0, r1, c1 = rects.pop(i)
        h, w = r1 - r0, c1 - c0
        if h >= w and h > 1:
            cut = r0 + int(rng.integers(1, h))
            halves = [(r0, c0, cut, c1), (cut, c0, r1, c1)]
        else:
            cut = c0 + int(rng.integers(1, w))
            halves = [(r0, c0, r1, cut), (r0, cut, r1, c1)]
        rects[i:i] = halves

    order = rng.permutation(active.size)
    labels = [int(active[order[k % active.size]]) for k in range(n_regions)]
    truth = np.empty((height, width), dtype=np.int64)
    regions = []
    for (r0, c0, r1, c1), label in zip(rects, labels):
        truth[r0:r1, c0:c1] = label
        regions.append((Box(r0, c0, r1, c1), label))

    protos = prototypes(world)
    features = protos[truth]
    if world.noise_sigma > 0.0:
        features = features + world.noise_sigma * rng.standard_normal(features.shape)
    return Scene(np.ascontiguousarray(features, dtype=np.float64), truth, tuple(regions))


def _boundary_spill_candidates(truth: np.ndarray, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """(row, col, neighbor label) for pixels bordering a different region."""
    h, w = truth.shape
    candidates = []
    for r in range(h):
        for c in range(w):
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                nr, nc = r + dr, c + dc
                if 0 <= nr < h and 0 <= nc < w and truth[nr, nc] != truth[r, c]:
                    candidates.append((r, c, int(truth[nr, nc])))
    rng.shuffle(candidates)
    return candidates


def annotate(
    world: SynthWorld,
    scene: Scene,
    tier: str,
    corrupt_frac: float = 0.0,
    teacher_sigma: float = 0.0,
    seed: int = 0,
    dataset_id: int = 0,
) -> AnnotatedSample:
    """Attach one supervision tier; features and truth are never modified.

    LD corruption is boundary-biased: labels first spill one pixel across
    region borders, then interior pixels flip to random other scene labels
    until round(corrupt_frac * H * W) pixels differ (capped when the scene
    has a single label and nothing to flip to).
    """
    if tier not in TIERS:
        raise ValueError(f"annotate: tier must be one of {TIERS}, got {tier!r}")
    truth = scene.truth.copy()
    features = scene.features.copy()

    if tier == "HD":
        return AnnotatedSample(features, truth, tier, PixelSupervision(truth.copy()), dataset_id)

    if tier == "LD":
        if not 0.0 <= corrupt_frac < 1.0:
            raise ValueError(f"annotate: corrupt_frac must be in [0, 1), got {corrupt_frac}")
        rng = substream(seed, "corrupt")
        noisy = truth.copy()
        target = int(round(corrupt_frac * truth.size))
        present = np.unique(truth)
        if target and present.size >= 2:
            corrupted: set[tuple[int, int]] = set()
            for r, c, spill in _boundary_spill_candidates(truth, rng):
                if len(corrupted) >= target:
                    break
                if (r, c) not in corrupted:
                    noisy[r, c] = spill
                    corrupted.add((r, c))
            if len(corrupted) < target:
                flat = [(r, c) for r in range(truth.shape[0]) for c in range(truth.shape[1]) if (r, c) not in corrupted]
                idx = rng.permutation(len(flat))
                for k in idx:
                    if len(corrupted) >= target:
                        break
                    r, c = flat[k]
                    others = present[present != truth[r, c]]
                    noisy[r, c] = int(others[rng.integers(0, others.size)])
                    corrupted.add((r, c))
        return AnnotatedSample(features, truth, tier, PixelSupervision(noisy), dataset_id)

    # WD: the rectangles are exact tight boxes; P=0 only for empty region lists
    if teacher_sigma < 0.0:
        raise ValueError("annotate: teacher_sigma must be >= 0")
    rng = substream(seed, "teacher")
    boxes, teachers = [], []
    for box, label in scene.regions:
        e = world.space.E[label]
        if teacher_sigma == 0.0:
            teacher = e.copy()
        else:
            noisy_e = e + teacher_sigma * rng.standard_normal(e.shape)
            teacher = noisy_e / np.linalg.norm(noisy_e)
        boxes.append(box)
        teachers.append(teacher)
    return AnnotatedSample(features, truth, tier, BoxSupervision(tuple(boxes), tuple(teachers)), dataset_id)


def balanced_batches(datasets, batch_size: int, seed: int):
    """Endless batch stream holding every dataset at a near-equal share.

    Each batch takes floor(batch_size / D) samples per dataset; the
    remainder rotates across datasets batch by batch. Sampling is without
    replacement per epoch, reshuffled each epoch.
    """
    pools = [list(d) for d in datasets]
    if not pools or any(len(p) == 0 for p in pools):
        raise ValueError("balanced_batches: every dataset must be nonempty")
    d = len(pools)
    if batch_size < d:
        raise ValueError(f"balanced_batches: batch_size {batch_size} < dataset count {d}")
    rng = substream(seed, "batching")
    queues: list[list[int]] = [[] for _ in pools]

    def draw(di: int):
        if not queues[di]:
            queues[di] = list(rng.permutation(len(pools[di])))
        return pools[di][queues[di].pop()]

    base, extra = divmod(batch_size, d)
    t = 0
    while True:
        counts = [base] * d
        for j in range(extra):
            counts[(t * extra + j) % d] += 1
        batch = [draw(di) for di in range(d) for _ in range(counts[di])]
        yield batch
        t += 1


# -- sample archives -------------------------------------------------------------


def write_pgm(path, ids: np.ndarray) -> None:
    """16-bit P5 mask; stored value = label id + 1, 0 = ignore."""
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.min() < -1 or ids.max() > 65534:
        raise ValueError("write_pgm: need a 2-D id map within [-1, 65534]")
    h, w = ids.shape
    payload = (ids.astype(np.int64) + 1).astype(">u2").tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(payload)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a P5 PGM")
        dims = fh.readline().split()
        maxval = int(fh.readline())
        if maxval != 65535:
            raise ValueError(f"{path}: expected 16-bit maxval, got {maxval}")
        w, h = int(dims[0]), int(dims[1])
        raw = np.frombuffer(fh.read(2 * h * w), dtype=">u2").reshape(h, w)
        return raw.astype(np.int64) - 1


def save_samples(directory, samples) -> None:
    """Archive samples: features as tensor files, masks as PGM, boxes as JSONL."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, s in enumerate(samples):
        stem = f"{i:04d}"
        save_tensor(out / f"{stem}.features.tnsr", s.features)
        write_pgm(out / f"{stem}.truth.pgm", s.truth)
        if isinstance(s.payload, PixelSupervision):
            write_pgm(out / f"{stem}.payload.pgm", s.payload.labels)
        else:
            with open(out / f"{stem}.boxes.jsonl", "w", encoding="utf-8") as fh:
                for box, teacher in zip(s.payload.boxes, s.payload.teachers):
                    fh.write(
                        json.dumps(
                            {
                                "box": [box.row0, box.col0, box.row1, box.col1],
                                "teacher": [float(x) for x in teacher],
                            }
                        )
                        + "\n"
                    )
        index.append({"stem": stem, "tier": s.tier, "dataset_id": s.dataset_id})
    (out / "samples.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")


def load_samples(directory) -> list[AnnotatedSample]:
    src = Path(directory)
    index = json.loads((src / "samples.json").read_text(encoding="utf-8"))
    samples = []
    for entry in index:
        stem, tier = entry["stem"], entry["tier"]
        features = load_tensor(src / f"{stem}.features.tnsr")
        truth = read_pgm(src / f"{stem}.truth.pgm")
        if tier in ("HD", "LD"):
            payload: PixelSupervision | BoxSupervision = PixelSupervision(read_pgm(src / f"{stem}.payload.pgm"))
        else:
            boxes, teachers = [], []
            with open(src / f"{stem}.boxes.jsonl", encoding="utf-8") as fh:
                for line in fh:
                    obj = json.loads(line)
                    boxes.append(Box(*obj["box"]))
                    teachers.append(np.array(obj["teacher"], dtype=np.float64))
            payload = BoxSupervision(tuple(boxes), tuple(teachers))
        samples.append(AnnotatedSample(features, truth, tier, payload, int(entry["dataset_id"])))
    return samples
