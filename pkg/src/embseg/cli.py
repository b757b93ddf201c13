"""Command-line surface: label analysis, data generation, training, evaluation.

Usage:
    embseg labels sim --embeddings labels.jsonl --out OUTDIR [--blocks blocks.json]
    embseg labels export --embeddings labels.jsonl --out OUTDIR
    embseg synth --config cfg.json [--seed S] --out OUTDIR
    embseg train --config cfg.json [--seed S] --out OUTDIR
    embseg eval --config cfg.json --checkpoint DIR [--seed S] --out OUTDIR
    embseg zeroshot --config cfg.json [--seed S] --out OUTDIR
    embseg gradcheck [--module all|losses|head] [--trials K] [--eps E] [--seed S] [--out OUTDIR]

Every run writes a manifest with the fully resolved config, the seed, and
sha256 hashes of each artifact; re-running a manifest reproduces the metric
files byte for byte. EMBSEG_SEED in the environment overrides --seed.

Exit codes: 0 success, 1 gradient-check exceedance, 2 config or input
error (every offending key listed), 3 training abort.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from embseg.autodiff import (
    Tensor,
    add_bias,
    check_gradients,
    concat,
    gather_rows,
    l2_normalize,
    matmul,
    softmax_with_temperature,
)
from embseg.labels import (
    block_similarity_summary,
    export_label_space,
    export_similarity_csv,
    extend,
    load_label_space,
    make_label_space,
)
from embseg.losses import (
    BoxSupervision,
    EmptyBatchError,
    PixelSupervision,
    loss_hd,
    loss_ld,
    loss_wd,
    per_pixel_ce_map,
    pixel_probs,
)
from embseg.model import Box, EmbeddingMap, init_model, load_model, roi_embed, save_model
from embseg.synth import (
    SynthWorld,
    annotate,
    block_assignment,
    gen_scene,
    make_embeddings,
    make_world,
    save_samples,
    substream,
)
from embseg.training import (
    MetricsReport,
    TrainConfig,
    TrainingAbortError,
    confusion_matrix,
    infer,
    iou_from_confusion,
    report_payload,
    train,
    write_metrics_csv,
    zero_shot_eval,
)

GRAD_TOL = 1e-4


class ConfigError(ValueError):
    """Invalid config or input; carries every problem found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# -- config schema ----------------------------------------------------------------

_DEFAULTS = {
    "seed": 0,
    "world": {
        "n_blocks": 2,
        "per_block": 3,
        "dim": 16,
        "within_corr": 0.5,
        "feature_dim": 8,
        "noise_sigma": 0.0,
    },
    "scenes": {"height": 12, "width": 12, "n_regions": 8, "per_dataset": 8},
    "datasets": [{"tier": "HD", "corrupt_frac": 0.0, "teacher_sigma": 0.0}],
    "train": {
        "lr0": 0.01,
        "momentum": 0.9,
        "poly_power": 0.9,
        "keep_fraction": 0.7,
        "tau_init": 0.07,
        "hidden": [32],
        "use_hd": True,
        "use_ld": False,
        "use_wd": False,
    },
    "eval": {"n_scenes": 4, "checkpoint": None},
    "zeroshot": {"heldout_per_block": 2, "n_scenes": 6},
}
_TRAIN_REQUIRED = ("total_steps", "batch_size")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def resolve_config(raw: dict, require_train: bool = False, require_zeroshot: bool = False) -> dict:
    """Materialize every default and collect every violation before failing."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    known = set(_DEFAULTS)
    for key in raw:
        if key not in known:
            problems.append(f"unknown key: {key}")

    cfg = copy.deepcopy(_DEFAULTS)
    for section in ("world", "scenes", "train", "eval", "zeroshot"):
        given = raw.get(section, {})
        if not isinstance(given, dict):
            problems.append(f"{section}: must be an object")
            continue
        for key, value in given.items():
            if key not in cfg[section] and not (section == "train" and key in _TRAIN_REQUIRED):
                problems.append(f"unknown key: {section}.{key}")
            else:
                cfg[section][key] = value
    if "seed" in raw:
        cfg["seed"] = raw["seed"]
    if "datasets" in raw:
        cfg["datasets"] = raw["datasets"]

    def need(cond: bool, msg: str):
        if not cond:
            problems.append(msg)

    w = cfg["world"]
    need(_is_int(w["n_blocks"]) and w["n_blocks"] >= 1, "world.n_blocks: integer >= 1 required")
    need(_is_int(w["per_block"]) and w["per_block"] >= 1, "world.per_block: integer >= 1 required")
    need(_is_int(w["dim"]) and w["dim"] >= 1, "world.dim: integer >= 1 required")
    if _is_int(w["n_blocks"]) and _is_int(w["dim"]):
        need(w["dim"] >= w["n_blocks"], "world.dim: must be >= world.n_blocks")
    need(_is_num(w["within_corr"]) and 0 <= w["within_corr"] < 1, "world.within_corr: number in [0, 1) required")
    need(_is_int(w["feature_dim"]) and w["feature_dim"] >= 1, "world.feature_dim: integer >= 1 required")
    need(_is_num(w["noise_sigma"]) and w["noise_sigma"] >= 0, "world.noise_sigma: number >= 0 required")

    s = cfg["scenes"]
    need(_is_int(s["height"]) and s["height"] >= 1, "scenes.height: integer >= 1 required")
    need(_is_int(s["width"]) and s["width"] >= 1, "scenes.width: integer >= 1 required")
    need(_is_int(s["per_dataset"]) and s["per_dataset"] >= 1, "scenes.per_dataset: integer >= 1 required")
    if _is_int(s["height"]) and _is_int(s["width"]):
        need(
            _is_int(s["n_regions"]) and 1 <= s["n_regions"] <= s["height"] * s["width"],
            "scenes.n_regions: integer in [1, height*width] required",
        )

    ds = cfg["datasets"]
    if not isinstance(ds, list) or not ds:
        problems.append("datasets: nonempty list required")
    else:
        for i, d in enumerate(ds):
            if not isinstance(d, dict):
                problems.append(f"datasets[{i}]: must be an object")
                continue
            full = {"tier": "HD", "corrupt_frac": 0.0, "teacher_sigma": 0.0}
            for key, value in d.items():
                if key not in full:
                    problems.append(f"unknown key: datasets[{i}].{key}")
                else:
                    full[key] = value
            need(full["tier"] in ("HD", "LD", "WD"), f"datasets[{i}].tier: one of HD, LD, WD required")
            need(
                _is_num(full["corrupt_frac"]) and 0 <= full["corrupt_frac"] < 1,
                f"datasets[{i}].corrupt_frac: number in [0, 1) required",
            )
            need(
                _is_num(full["teacher_sigma"]) and full["teacher_sigma"] >= 0,
                f"datasets[{i}].teacher_sigma: number >= 0 required",
            )
            ds[i] = full

    t = cfg["train"]
    for key in _TRAIN_REQUIRED:
        if require_train and key not in t:
            problems.append(f"train.{key}: required key missing")
    if "total_steps" in t:
        need(_is_int(t["total_steps"]) and t["total_steps"] >= 1, "train.total_steps: integer >= 1 required")
    if "batch_size" in t:
        need(_is_int(t["batch_size"]) and t["batch_size"] >= 1, "train.batch_size: integer >= 1 required")
        if isinstance(ds, list) and ds and _is_int(t["batch_size"]):
            need(t["batch_size"] >= len(ds), "train.batch_size: must be >= number of datasets")
    need(_is_num(t["lr0"]) and t["lr0"] > 0, "train.lr0: number > 0 required")
    need(_is_num(t["momentum"]) and 0 <= t["momentum"] < 1, "train.momentum: number in [0, 1) required")
    need(_is_num(t["poly_power"]) and t["poly_power"] > 0, "train.poly_power: number > 0 required")
    need(_is_num(t["keep_fraction"]) and 0 < t["keep_fraction"] <= 1, "train.keep_fraction: number in (0, 1] required")
    need(_is_num(t["tau_init"]) and t["tau_init"] > 0, "train.tau_init: number > 0 required")
    need(
        isinstance(t["hidden"], list) and all(_is_int(h) and h >= 1 for h in t["hidden"]),
        "train.hidden: list of integers >= 1 required",
    )
    for key in ("use_hd", "use_ld", "use_wd"):
        need(isinstance(t[key], bool), f"train.{key}: boolean required")

    e = cfg["eval"]
    need(_is_int(e["n_scenes"]) and e["n_scenes"] >= 1, "eval.n_scenes: integer >= 1 required")
    need(e["checkpoint"] is None or isinstance(e["checkpoint"], str), "eval.checkpoint: string path or null required")

    z = cfg["zeroshot"]
    need(_is_int(z["heldout_per_block"]) and z["heldout_per_block"] >= 1, "zeroshot.heldout_per_block: integer >= 1 required")
    if require_zeroshot and _is_int(z["heldout_per_block"]) and _is_int(w["per_block"]):
        need(z["heldout_per_block"] < w["per_block"], "zeroshot.heldout_per_block: must leave at least one seen label per block")
    need(_is_int(z["n_scenes"]) and z["n_scenes"] >= 1, "zeroshot.n_scenes: integer >= 1 required")

    need(_is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed: integer >= 0 required")

    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path}: {exc.strerror or exc}"]) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config: {path} is not valid JSON ({exc.msg} at line {exc.lineno})"]) from exc


def _resolve_seed(cli_seed, cfg_seed: int) -> int:
    env = os.environ.get("EMBSEG_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError([f"EMBSEG_SEED: integer required, got {env!r}"]) from None
    if cli_seed is not None:
        return int(cli_seed)
    return int(cfg_seed)


# -- manifests ----------------------------------------------------------------------


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config, seed, inputs: dict) -> dict:
    """Hash every artifact under out_dir and record the resolved run recipe."""
    outputs = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            outputs[str(p.relative_to(out_dir))] = sha256_file(p)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": outputs,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest


# -- world construction ---------------------------------------------------------------


def build_world(cfg: dict, seed: int) -> SynthWorld:
    w = cfg["world"]
    space = make_embeddings(w["n_blocks"], w["per_block"], w["dim"], w["within_corr"], seed)
    blocks = block_assignment(w["n_blocks"], w["per_block"])
    return make_world(space, w["feature_dim"], w["noise_sigma"], seed, blocks)


def build_pools(cfg: dict, world: SynthWorld, seed: int, active) -> list[list]:
    sc = cfg["scenes"]
    pools = []
    for d_idx, d in enumerate(cfg["datasets"]):
        stream = substream(seed, f"data-{d_idx}")
        pool = []
        for _ in range(sc["per_dataset"]):
            scene_seed = int(stream.integers(2**63))
            ann_seed = int(stream.integers(2**63))
            scene = gen_scene(world, sc["height"], sc["width"], sc["n_regions"], active, scene_seed)
            pool.append(
                annotate(world, scene, d["tier"], d["corrupt_frac"], d["teacher_sigma"], ann_seed, d_idx)
            )
        pools.append(pool)
    return pools


def build_eval_scenes(cfg: dict, world: SynthWorld, seed: int, active, n_scenes: int, stream: str):
    sc = cfg["scenes"]
    gen = substream(seed, stream)
    return [
        gen_scene(world, sc["height"], sc["width"], sc["n_regions"], active, int(gen.integers(2**63)))
        for _ in range(n_scenes)
    ]


def fresh_eval(model, cfg, world, seed: int, stream: str = "eval"):
    scenes = build_eval_scenes(cfg, world, seed, range(len(world.space)), cfg["eval"]["n_scenes"], stream)
    cm = np.zeros((len(world.space), len(world.space)), dtype=np.int64)
    for scene in scenes:
        cm += confusion_matrix(infer(model, scene.features, world.space), scene.truth, len(world.space))
    return iou_from_confusion(cm)


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        total_steps=t["total_steps"],
        batch_size=t["batch_size"],
        lr0=t["lr0"],
        momentum=t["momentum"],
        poly_power=t["poly_power"],
        keep_fraction=t["keep_fraction"],
        tau_init=t["tau_init"],
        hidden=tuple(t["hidden"]),
        use_hd=t["use_hd"],
        use_ld=t["use_ld"],
        use_wd=t["use_wd"],
        seed=seed,
    )


def _write_report(out: Path, payload: dict) -> None:
    (out / "report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8"
    )


# -- command bodies (shared by argparse entry points and manifest replay) --------------


def run_labels(mode: str, embeddings, out_dir, blocks_path=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        space = load_label_space(embeddings)
    except (OSError, ValueError) as exc:
        raise ConfigError([f"embeddings: {exc}"]) from exc
    if mode == "sim":
        export_similarity_csv(space, out / "similarity.csv")
        if blocks_path is not None:
            try:
                blocks = json.loads(Path(blocks_path).read_text(encoding="utf-8"))
                within, cross = block_similarity_summary(space, blocks)
            except (OSError, ValueError) as exc:
                raise ConfigError([f"blocks: {exc}"]) from exc
            summary = {"within_mean": within, "cross_mean": cross}
            (out / "blocks_summary.json").write_text(
                json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
            )
            print(f"within-block mean similarity {within:.6f}, cross-block {cross:.6f}")
    else:
        export_label_space(space, out / "labels.jsonl")
    return write_manifest(
        out, f"labels {mode}", None, None, {"embeddings": embeddings, "blocks": blocks_path}
    )


def run_synth(cfg: dict, seed: int, out_dir, config_path=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(cfg, seed)
    pools = build_pools(cfg, world, seed, range(len(world.space)))
    for d_idx, pool in enumerate(pools):
        save_samples(out / f"dataset_{d_idx}", pool)
    export_label_space(world.space, out / "labels.jsonl")
    return write_manifest(out, "synth", cfg, seed, {"config": config_path})


def run_train(cfg: dict, seed: int, out_dir, config_path=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(cfg, seed)
    pools = build_pools(cfg, world, seed, range(len(world.space)))
    tcfg = _train_config(cfg, seed)
    model, report = train(tcfg, world, pools)
    eval_miou, eval_per_class = fresh_eval(model, cfg, world, seed)
    save_model(model, out / "checkpoint")
    write_metrics_csv(report, out / "metrics.csv")
    final = MetricsReport(miou=eval_miou, per_class_iou=eval_per_class)
    payload = report_payload(final, tcfg)
    payload["train_miou"] = report.miou
    _write_report(out, payload)
    print(f"train: {tcfg.total_steps} steps, fresh-scene miou {eval_miou:.4f}")
    return write_manifest(out, "train", cfg, seed, {"config": config_path})


def run_eval(cfg: dict, seed: int, out_dir, checkpoint, config_path=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = checkpoint or cfg["eval"]["checkpoint"]
    if ckpt is None:
        raise ConfigError(["eval.checkpoint: required (or pass --checkpoint)"])
    try:
        model = load_model(ckpt)
    except (OSError, ValueError) as exc:
        raise ConfigError([f"checkpoint: {exc}"]) from exc
    world = build_world(cfg, seed)
    if model.feature_dim != world.feature_dim or model.embed_dim != world.space.dim:
        raise ConfigError(
            [
                f"checkpoint: model dims F={model.feature_dim}, C={model.embed_dim} do not match "
                f"world F={world.feature_dim}, C={world.space.dim}"
            ]
        )
    eval_miou, eval_per_class = fresh_eval(model, cfg, world, seed)
    payload = report_payload(MetricsReport(miou=eval_miou, per_class_iou=eval_per_class))
    payload["config"] = cfg
    _write_report(out, payload)
    print(f"eval: fresh-scene miou {eval_miou:.4f}")
    return write_manifest(out, "eval", cfg, seed, {"config": config_path, "checkpoint": ckpt})


def split_heldout(cfg: dict) -> tuple[list[int], list[int]]:
    """Seen/heldout label ids: the last heldout_per_block per block are unseen."""
    w = cfg["world"]
    k = cfg["zeroshot"]["heldout_per_block"]
    seen, heldout = [], []
    for b in range(w["n_blocks"]):
        ids = list(range(b * w["per_block"], (b + 1) * w["per_block"]))
        seen.extend(ids[: -k])
        heldout.extend(ids[-k:])
    return seen, heldout


def run_zeroshot(cfg: dict, seed: int, out_dir, config_path=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(cfg, seed)
    seen, heldout = split_heldout(cfg)
    records = world.space.records
    seen_space = make_label_space(
        [records[i].name for i in seen],
        [records[i].description for i in seen],
        [records[i].embedding for i in seen],
    )
    train_world = SynthWorld(seen_space, world.A, world.noise_sigma, world.blocks[seen])
    pools = build_pools(cfg, train_world, seed, range(len(seen_space)))
    tcfg = _train_config(cfg, seed)
    model, report = train(tcfg, train_world, pools)

    triples = [(records[i].name, records[i].description, records[i].embedding) for i in heldout]
    ext_space = seen_space
    for name, description, embedding in triples:
        ext_space = extend(ext_space, name, description, embedding)
    ext_world = SynthWorld(ext_space, world.A, world.noise_sigma, np.zeros(len(ext_space), dtype=np.int64))
    heldout_ids = list(range(len(seen_space), len(ext_space)))
    scenes = build_eval_scenes(cfg, ext_world, seed, heldout_ids, cfg["zeroshot"]["n_scenes"], "zeroshot-eval")

    zs = zero_shot_eval(model, seen_space, triples, [(s.features, s.truth) for s in scenes])
    save_model(model, out / "checkpoint")
    write_metrics_csv(report, out / "metrics.csv")
    payload = report_payload(zs, tcfg)
    payload["train_miou"] = report.miou
    payload["heldout_labels"] = [records[i].name for i in heldout]
    _write_report(out, payload)
    print(f"zeroshot: heldout miou {zs.zero_shot['heldout_miou']:.4f}")
    return write_manifest(out, "zeroshot", cfg, seed, {"config": config_path})


# -- gradient verification ---------------------------------------------------------------


def _smooth(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.uniform(0.3, 1.7, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _loss_instance(rng: np.random.Generator, h=4, w=4, n=4, c=6):
    space = make_label_space([f"l{i}" for i in range(n)], ["d"] * n, rng.normal(size=(n, c)))
    values = _smooth(rng, (h, w, c))
    labels = rng.integers(0, n, size=(h, w))
    labels[rng.random(size=(h, w)) < 0.2] = -1
    if np.all(labels < 0):
        labels[0, 0] = 0
    return space, values, PixelSupervision(labels)


def _gradcheck_targets(module: str):
    """(name, builder) pairs; builder(rng) -> (f, x) for check_gradients."""
    core = [
        ("matmul_lhs", lambda r: ((lambda c: lambda t: matmul(t, Tensor(c)).sum())(r.normal(size=(4, 3))), Tensor(r.normal(size=(5, 4))))),
        ("matmul_rhs", lambda r: ((lambda c: lambda t: matmul(Tensor(c), t).sum())(r.normal(size=(3, 5))), Tensor(r.normal(size=(5, 4))))),
        ("add", lambda r: ((lambda c: lambda t: (t + Tensor(c)).sum())(r.normal(size=(4, 4))), Tensor(r.normal(size=(4, 4))))),
        ("sub", lambda r: ((lambda c: lambda t: (Tensor(c) - t).mean())(r.normal(size=(4, 4))), Tensor(r.normal(size=(4, 4))))),
        ("mul", lambda r: ((lambda c: lambda t: (t * Tensor(c)).sum())(r.normal(size=(6,))), Tensor(r.normal(size=(6,))))),
        ("scalar_mul", lambda r: (lambda t: (t * 3.7).sum(), Tensor(r.normal(size=(3, 3))))),
        ("relu", lambda r: (lambda t: t.relu().sum(), Tensor(_smooth(r, (4, 5))))),
        ("exp", lambda r: (lambda t: t.exp().sum(), Tensor(r.normal(size=(3, 4))))),
        ("log", lambda r: (lambda t: (t.abs() + 0.5).log().sum(), Tensor(_smooth(r, (3, 4))))),
        ("abs", lambda r: (lambda t: t.abs().sum(), Tensor(_smooth(r, (4, 4))))),
        ("sum_axis", lambda r: ((lambda c: lambda t: (t.sum(axis=0) * Tensor(c)).sum())(r.normal(size=(3,))), Tensor(r.normal(size=(5, 3))))),
        ("mean_axis", lambda r: ((lambda c: lambda t: (t.mean(axis=1) * Tensor(c)).sum())(r.normal(size=(5,))), Tensor(r.normal(size=(5, 3))))),
        ("slice", lambda r: (lambda t: t[1:3, ::2].sum(), Tensor(r.normal(size=(4, 5))))),
        ("gather_rows", lambda r: ((lambda i: lambda t: gather_rows(t, i).sum())(r.integers(0, 4, size=6)), Tensor(r.normal(size=(4, 3))))),
        ("concat", lambda r: ((lambda c: lambda t: concat([t, Tensor(c)]).mean())(r.normal(size=(2, 3))), Tensor(r.normal(size=(3, 3))))),
        ("reshape", lambda r: ((lambda c: lambda t: (t.reshape(2, 6) * Tensor(c)).sum())(r.normal(size=(2, 6))), Tensor(r.normal(size=(3, 4))))),
        ("add_bias_x", lambda r: ((lambda c: lambda t: add_bias(t, Tensor(c)).sum())(r.normal(size=(4,))), Tensor(r.normal(size=(5, 4))))),
        ("add_bias_b", lambda r: ((lambda c: lambda t: add_bias(Tensor(c), t).sum())(r.normal(size=(5, 3))), Tensor(r.normal(size=(3,))))),
        ("l2_normalize", lambda r: ((lambda c: lambda t: (l2_normalize(t) * Tensor(c)).sum())(r.normal(size=(4, 6))), Tensor(_smooth(r, (4, 6))))),
        ("softmax_x", lambda r: ((lambda c: lambda t: (softmax_with_temperature(t, 0.7) * Tensor(c)).sum())(r.normal(size=(3, 5))), Tensor(r.normal(size=(3, 5))))),
        (
            "softmax_tau",
            lambda r: (
                (lambda x, c: lambda t: (softmax_with_temperature(Tensor(x), t) * Tensor(c)).sum())(
                    r.normal(size=(3, 5)), r.normal(size=(3, 5))
                ),
                Tensor(0.3 + r.random()),
            ),
        ),
    ]

    def head_stack(r):
        w0, b0 = _smooth(r, (3, 8)), r.normal(size=8) * 0.1
        w1, b1 = _smooth(r, (8, 4)), r.normal(size=4) * 0.1
        weights = r.normal(size=(2, 2, 4))

        def f(t: Tensor) -> Tensor:
            h = add_bias(matmul(t.reshape(4, 3), Tensor(w0)), Tensor(b0)).relu()
            out = add_bias(matmul(h, Tensor(w1)), Tensor(b1))
            return (out.reshape(2, 2, 4) * Tensor(weights)).sum()

        return f, Tensor(_smooth(r, (2, 2, 3)))

    def head_roi(r):
        model = init_model(3, [], 4, seed=int(r.integers(2**31)))
        model.proj.data = r.normal(size=(4, 4))

        def f(t: Tensor) -> Tensor:
            emb = EmbeddingMap(4, 4, 4, t.reshape(4, 4, 4))
            v = roi_embed(model, emb, Box(1, 0, 3, 3))
            return (v * v).sum()

        return f, Tensor(r.normal(size=(4, 4, 4)))

    def head_probs(r):
        space, values, _ = _loss_instance(r)
        weights = r.normal(size=(4, 4, len(space)))

        def f(t: Tensor) -> Tensor:
            emb = EmbeddingMap(4, 4, 6, t.reshape(4, 4, 6))
            return (pixel_probs(emb, space, 0.5) * Tensor(weights)).sum()

        return f, Tensor(values.reshape(-1))

    head = [("head_stack", head_stack), ("head_roi", head_roi), ("head_probs", head_probs)]

    def hd_case(r):
        space, values, sup = _loss_instance(r)

        def f(t: Tensor) -> Tensor:
            return loss_hd(EmbeddingMap(4, 4, 6, t.reshape(4, 4, 6)), sup, space, 0.5)

        return f, Tensor(values.reshape(-1))

    def ld_case(r):
        space, values, sup = _loss_instance(r)
        base = per_pixel_ce_map(EmbeddingMap(4, 4, 6, Tensor(values)), sup, space, 0.5)
        flat = base[~np.isnan(base)]
        kept = np.argsort(flat, kind="stable")[: int(np.floor(0.7 * flat.size))]

        def f(t: Tensor) -> Tensor:
            emb = EmbeddingMap(4, 4, 6, t.reshape(4, 4, 6))
            value, _ = loss_ld(emb, sup, space, 0.5, keep_fraction=0.7, kept_index=kept)
            return value

        return f, Tensor(values.reshape(-1))

    def wd_case(r):
        model = init_model(3, [], 6, seed=int(r.integers(2**31)))
        model.proj.data = r.normal(size=(6, 6))
        sup = BoxSupervision(
            (Box(0, 0, 2, 4), Box(2, 1, 4, 3)),
            (r.normal(size=6), r.normal(size=6)),
        )

        def f(t: Tensor) -> Tensor:
            return loss_wd(model, EmbeddingMap(4, 4, 6, t.reshape(4, 4, 6)), sup)

        return f, Tensor(_smooth(r, (4, 4, 6)).reshape(-1))

    def hd_tau_case(r):
        space, values, sup = _loss_instance(r)
        emb = EmbeddingMap(4, 4, 6, Tensor(values))

        def f(t: Tensor) -> Tensor:
            return loss_hd(emb, sup, space, t)

        return f, Tensor(0.3 + r.random())

    losses = [
        ("loss_hd", hd_case),
        ("loss_ld_frozen", ld_case),
        ("loss_wd", wd_case),
        ("loss_hd_tau", hd_tau_case),
    ]

    if module == "losses":
        return losses
    if module == "head":
        return head
    return core + head + losses


def run_gradcheck(module: str, trials: int, eps: float, seed: int, out_dir=None) -> tuple[int, dict]:
    if trials < 1:
        raise ConfigError(["--trials: integer >= 1 required"])
    if eps <= 0:
        raise ConfigError(["--eps: number > 0 required"])
    results: dict[str, float] = {}
    for name, builder in _gradcheck_targets(module):
        worst = 0.0
        for trial in range(trials):
            rng = substream(seed, f"gradcheck-{name}-{trial}")
            f, x = builder(rng)
            worst = max(worst, check_gradients(f, x, eps=eps))
        results[name] = worst
        flag = "ok" if worst <= GRAD_TOL else "EXCEEDS"
        print(f"{name}: max_rel_err={worst:.3e} {flag}")
    offenders = sorted(k for k, v in results.items() if v > GRAD_TOL)
    if offenders:
        print("exceeded tolerance: " + ", ".join(offenders))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(
            json.dumps(results, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        write_manifest(
            out,
            "gradcheck",
            {"module": module, "trials": trials, "eps": eps},
            seed,
            {},
        )
    return (1 if offenders else 0), results


# -- manifest replay ----------------------------------------------------------------------


def replay_manifest(manifest_path, out_dir) -> dict:
    """Re-run a recorded command into out_dir; returns the fresh manifest."""
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    command = manifest["command"]
    cfg = manifest["config"]
    seed = manifest["seed"]
    inputs = manifest.get("inputs", {})
    if command.startswith("labels"):
        mode = command.split()[1]
        return run_labels(mode, inputs["embeddings"], out_dir, inputs.get("blocks"))
    if command == "synth":
        return run_synth(cfg, seed, out_dir, inputs.get("config"))
    if command == "train":
        return run_train(cfg, seed, out_dir, inputs.get("config"))
    if command == "eval":
        return run_eval(cfg, seed, out_dir, inputs.get("checkpoint"), inputs.get("config"))
    if command == "zeroshot":
        return run_zeroshot(cfg, seed, out_dir, inputs.get("config"))
    raise ConfigError([f"manifest: unknown command {command!r}"])


# -- argparse ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embseg", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("labels", help="similarity analysis and label-space export")
    p.add_argument("mode", choices=("sim", "export"))
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--blocks", default=None, help="JSON list: block id per label")

    for name, desc in (
        ("synth", "generate and archive synthetic datasets"),
        ("train", "train a model and write checkpoint/metrics/report"),
        ("eval", "evaluate a checkpoint on fresh scenes"),
        ("zeroshot", "train on seen labels, test on heldout labels"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        if name == "eval":
            p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("gradcheck", help="verify gradients against central differences")
    p.add_argument("--module", choices=("all", "losses", "head"), default="all")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "labels":
            run_labels(args.mode, args.embeddings, args.out, args.blocks)
            return 0
        if args.command == "gradcheck":
            seed = _resolve_seed(args.seed, 0)
            code, _ = run_gradcheck(args.module, args.trials, args.eps, seed, args.out)
            return code
        raw = load_config(args.config)
        cfg = resolve_config(
            raw,
            require_train=args.command in ("train", "zeroshot"),
            require_zeroshot=args.command == "zeroshot",
        )
        seed = _resolve_seed(args.seed, cfg["seed"])
        cfg["seed"] = seed
        if args.command == "synth":
            run_synth(cfg, seed, args.out, args.config)
        elif args.command == "train":
            run_train(cfg, seed, args.out, args.config)
        elif args.command == "eval":
            run_eval(cfg, seed, args.out, args.checkpoint, args.config)
        else:
            run_zeroshot(cfg, seed, args.out, args.config)
        return 0
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    except (TrainingAbortError, EmptyBatchError) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
