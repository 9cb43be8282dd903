"""Training, evaluation and verification drivers."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, dump_config, load_config
from .data import (ClipPair, CropSpec, ManifestEntry, manifest_num_classes, prepare_clip, read_clip,
                   read_manifest)
from .model import ConfigError, ModelConfig, Trear
from .optim import Adam
from .rng import RngStream

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "lr", "train_loss", "train_acc", "test_acc", "seconds")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: Trear
    optimizer: Adam
    metrics: list[dict] = field(default_factory=list)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows: true class, columns: predicted class
    predictions: list[int]


# ------------------------------------------------------------- checkpoints

def config_path_for(checkpoint) -> Path:
    return Path(f"{checkpoint}.cfg")


def save_training_state(path, cfg: TrainConfig, model: Trear, optimizer: Adam | None = None) -> None:
    """Write parameters (and Adam moments when given) plus a key=value config sidecar."""
    arrays = model.state_dict()
    if optimizer is not None:
        st = optimizer.state
        arrays["adam.t"] = np.asarray(float(st.t))
        for name in model.params:
            if name in st.m:
                arrays[f"adam.m/{name}"] = st.m[name]
                arrays[f"adam.v/{name}"] = st.v[name]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, arrays)
    config_path_for(path).write_text(dump_config(cfg))


def load_model(path) -> tuple[Trear, TrainConfig]:
    cfg_file = config_path_for(path)
    if not cfg_file.exists():
        raise ConfigError(f"{path}: missing config sidecar {cfg_file.name}")
    cfg = load_config(cfg_file)
    model = Trear(cfg.model, seed=cfg.seed)
    model.load_state_dict(load_checkpoint(path))
    return model, cfg


# --------------------------------------------------------------- training

def _load_split(entries: list[ManifestEntry], split: str) -> list[ClipPair]:
    clips = []
    for e in entries:
        if e.split != split:
            continue
        try:
            clip = read_clip(e.path)
        except OSError as exc:
            raise OSError(f"cannot read clip {e.path}: {exc}") from exc
        if clip.label != e.label:
            raise ConfigError(f"{e.path}: clip label {clip.label} disagrees with manifest label {e.label}")
        clips.append(clip)
    return clips


def _resolve_classes(cfg: TrainConfig, entries: list[ManifestEntry]) -> TrainConfig:
    n = manifest_num_classes(entries)
    if cfg.model.num_classes == 0:
        return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, num_classes=n))
    if cfg.model.num_classes != n:
        raise ConfigError(f"config has num_classes={cfg.model.num_classes}, manifest has {n}")
    return cfg


def _inputs(model: Trear, clip: ClipPair, spec: CropSpec, rng: RngStream | None):
    rgb, depth = prepare_clip(clip, model.config.k, spec, rng)
    streams = model.config.streams
    return (rgb if "rgb" in streams else None), (depth if "depth" in streams else None)


def clip_loss(model: Trear, rgb, depth, label: int, training: bool, rng: RngStream | None):
    out = model.forward(rgb, depth, training=training, rng=rng)
    return T.cross_entropy(out.clip_logits, label), out


def evaluate_clips(model: Trear, clips: list[ClipPair], spec: CropSpec | None = None) -> EvalResult:
    """Eval mode (no dropout) with a centre crop; deterministic."""
    spec = CropSpec("center", spec.resize_side, spec.crop_side) if spec else CropSpec("center")
    c = model.config.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    preds = []
    for clip in clips:
        rgb, depth = _inputs(model, clip, spec, None)
        logits = model.forward(rgb, depth, training=False).clip_logits.data
        p = int(np.argmax(logits))
        preds.append(p)
        confusion[clip.label, p] += 1
    acc = float(np.trace(confusion) / len(clips)) if clips else math.nan
    return EvalResult(acc, confusion, preds)


def _write_metrics(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for r in rows:
            writer.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["train_acc"]),
                             repr(r["test_acc"]), f"{r['seconds']:.3f}"])


def train(cfg: TrainConfig, write_outputs: bool = True) -> TrainResult:
    """Train on the manifest's train split; evaluates the test split after every epoch."""
    if not cfg.manifest:
        raise ConfigError("config has no manifest")
    entries = read_manifest(cfg.manifest)
    cfg = _resolve_classes(cfg, entries)
    train_clips = _load_split(entries, "train")
    test_clips = _load_split(entries, "test")
    if not train_clips:
        raise ConfigError(f"{cfg.manifest}: train split is empty")

    model = Trear(cfg.model, seed=cfg.seed)
    opt = Adam(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    shuffle_rng = RngStream(cfg.seed, "shuffle")
    crop_rng = RngStream(cfg.seed, "crop")
    drop_rng = RngStream(cfg.seed, "dropout")
    rows: list[dict] = []

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        opt.lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(len(train_clips))
        total_loss, correct = 0.0, 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_clips[i] for i in order[lo:lo + cfg.batch_size]]
            opt.zero_grad()
            losses = []
            for clip in batch:
                rgb, depth = _inputs(model, clip, cfg.crop, crop_rng)
                loss, out = clip_loss(model, rgb, depth, clip.label, True, drop_rng)
                losses.append(loss)
                correct += int(np.argmax(out.clip_logits.data) == clip.label)
            batch_loss = losses[0]
            for extra in losses[1:]:
                batch_loss = batch_loss + extra
            batch_loss = batch_loss * (1.0 / len(batch))
            value = batch_loss.item()
            if not math.isfinite(value):
                ids = ", ".join(c.clip_id for c in batch)
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b} (clips {ids})")
            batch_loss.backward()
            opt.step()
            total_loss += value * len(batch)
        test_acc = evaluate_clips(model, test_clips, cfg.crop).accuracy if test_clips else math.nan
        row = {"epoch": epoch, "lr": opt.lr, "train_loss": total_loss / len(train_clips),
               "train_acc": correct / len(train_clips), "test_acc": test_acc,
               "seconds": time.perf_counter() - start}
        rows.append(row)
        log.info("epoch %d lr %.3g loss %.4f train %.3f test %.3f", epoch, row["lr"],
                 row["train_loss"], row["train_acc"], test_acc)
        if write_outputs and cfg.metrics:
            _write_metrics(cfg.metrics, rows)

    if write_outputs:
        if cfg.metrics:
            _write_metrics(cfg.metrics, rows)
        if cfg.checkpoint:
            save_training_state(cfg.checkpoint, cfg, model, opt)
    return TrainResult(model, opt, rows)


def evaluate(checkpoint, manifest, split: str = "test") -> EvalResult:
    model, cfg = load_model(checkpoint)
    entries = read_manifest(manifest)
    n = manifest_num_classes(entries)
    if n != model.config.num_classes:
        raise ConfigError(f"checkpoint predicts {model.config.num_classes} classes, manifest has {n}")
    clips = _load_split(entries, split)
    if not clips:
        raise ConfigError(f"{manifest}: split {split!r} is empty")
    return evaluate_clips(model, clips, cfg.crop)


# --------------------------------------------------------- gradient check

GRAD_CHECK_MODEL = dict(d_model=16, k=4, heads_encoder=2, heads_mutual=2, num_classes=3)


@dataclass
class GradCheckReport:
    rows: list[tuple[str, float, int]]  # (block, max relative error, entries checked)
    threshold: float

    @property
    def failed(self) -> list[str]:
        return [name for name, err, _ in self.rows if not err < self.threshold]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(err for _, err, _ in self.rows)

    def format(self) -> str:
        lines = [f"{'block':40s} {'max_rel_err':>12s} {'checked':>8s}"]
        for name, err, n in self.rows:
            flag = "" if err < self.threshold else "  FAIL"
            lines.append(f"{name:40s} {err:12.3e} {n:8d}{flag}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'}: max relative error {self.max_error:.3e} "
                     f"(threshold {self.threshold:g})")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(seed: int = 0, config: ModelConfig | None = None, side: int = 16,
               max_entries: int = 24, step: float = 1e-5, threshold: float = 1e-4) -> GradCheckReport:
    """Compare backward() with central differences through forward + cross-entropy.

    Up to ``max_entries`` randomly chosen entries of every parameter block are
    perturbed (all of them when ``max_entries`` is 0).
    """
    cfg = config or ModelConfig(**GRAD_CHECK_MODEL)
    rng = RngStream(seed, "gradcheck")
    model = Trear(cfg, seed=seed)
    rgb = rng.random((cfg.k, 3, side, side))
    depth = rng.random((cfg.k, 3, side, side))
    label = int(rng.integers(0, cfg.num_classes))

    def loss_value() -> float:
        return clip_loss(model, rgb, depth, label, False, None)[0].item()

    model.zero_grad()
    loss, _ = clip_loss(model, rgb, depth, label, False, None)
    loss.backward()
    rows = []
    for name, p in model.params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if (max_entries == 0 or n <= max_entries) else \
            np.sort(rng.permutation(n)[:max_entries])
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value()
            flat[i] = orig - step
            down = loss_value()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, relative_error(analytic.reshape(-1)[i], numeric))
        rows.append((name, worst, len(picks)))
    return GradCheckReport(rows, threshold)


# ------------------------------------------------------ attention export

def write_attention_csv(path, matrix: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(range(matrix.shape[1]))
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


def read_attention_csv(path) -> np.ndarray:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]])


def attention_files(model: Trear, rgb, depth) -> dict[str, np.ndarray]:
    """Filename -> map for every self-attention head and both cross-attention directions.

    The two ``mutual_*.csv`` maps average the heads; per-head cross maps are
    written alongside as ``mutual_<direction>_<head>.csv``.
    """
    maps = model.forward(rgb, depth, training=False).attention
    out = {}
    for (stream, layer), heads in maps.self_attention.items():
        for h, m in enumerate(heads):
            out[f"{stream}_{layer}_{h}.csv"] = m
    for direction, heads in maps.mutual.items():
        out[f"mutual_{direction}.csv"] = heads.mean(axis=0)
        for h, m in enumerate(heads):
            out[f"mutual_{direction}_{h}.csv"] = m
    return out


def export_attention(checkpoint, clip_dir, out_dir) -> list[Path]:
    model, cfg = load_model(checkpoint)
    clip = read_clip(clip_dir)
    spec = CropSpec("center", cfg.crop.resize_side, cfg.crop.crop_side)
    rgb, depth = _inputs(model, clip, spec, None)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, m in attention_files(model, rgb, depth).items():
        write_attention_csv(out_dir / name, m)
        written.append(out_dir / name)
    return written


# --------------------------------------------------------------- ablation

VARIANTS: dict[str, dict] = {
    "single-depth": dict(modalities="depth"),
    "single-rgb": dict(modalities="rgb"),
    "direct-concat": dict(modalities="both", fusion_block="direct", fusion_mode="concat"),
    "direct-multiply": dict(modalities="both", fusion_block="direct", fusion_mode="multiply"),
    "direct-add": dict(modalities="both", fusion_block="direct", fusion_mode="add"),
    "mutual-concat": dict(modalities="both", fusion_block="mutual", fusion_mode="concat"),
    "mutual-multiply": dict(modalities="both", fusion_block="mutual", fusion_mode="multiply"),
    "mutual-add": dict(modalities="both", fusion_block="mutual", fusion_mode="add"),
    "rgb-no-encoder": dict(modalities="rgb", use_encoder=False),
}

FUSION_TABLE = ("single-depth", "single-rgb", "direct-concat", "direct-multiply", "direct-add",
                "mutual-concat", "mutual-multiply", "mutual-add")
CROP_TABLE = ("single-depth", "single-rgb", "mutual-add")
CROP_ABLATION_MODES = ("random_per_frame", "same_region")


@dataclass
class AblationRow:
    table: str
    variant: str
    crop_mode: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))


def variant_config(cfg: TrainConfig, variant: str, crop_mode: str, run: int) -> TrainConfig:
    model = dataclasses.replace(cfg.model, **VARIANTS[variant])
    crop = CropSpec(crop_mode, cfg.crop.resize_side, cfg.crop.crop_side)
    return dataclasses.replace(cfg, model=model, crop=crop, seed=cfg.seed + run)


def run_variant(cfg: TrainConfig, variant: str, crop_mode: str, run: int = 0) -> float:
    """Train one variant and return its test accuracy (train accuracy if there is no test split)."""
    vcfg = variant_config(cfg, variant, crop_mode, run)
    result = train(vcfg, write_outputs=False)
    if cfg.ablation_out:
        out = Path(cfg.ablation_out)
        stem = f"{variant}_{crop_mode}_run{run}"
        save_training_state(out / f"{stem}.ckpt", dataclasses.replace(vcfg, model=result.model.config),
                            result.model)
        _write_metrics(out / f"{stem}_metrics.csv", result.metrics)
    final = result.metrics[-1] if result.metrics else {"test_acc": math.nan, "train_acc": math.nan}
    return final["test_acc"] if not math.isnan(final["test_acc"]) else final["train_acc"]


def ablate(cfg: TrainConfig, variants=None, crop_modes=None, runs: int | None = None) -> list[AblationRow]:
    """Fusion-mode and crop-mode ablation grid.

    The default grid gives eight fusion rows under random per-frame cropping
    and three rows under each of the two crop modes. Identical
    (variant, crop mode) cells are trained once and shared between tables.
    """
    runs = runs or cfg.ablation_runs
    crop_modes = tuple(crop_modes or CROP_ABLATION_MODES)
    plan: list[tuple[str, str, str]] = []
    if variants is None:
        plan += [("fusion", v, "random_per_frame") for v in FUSION_TABLE]
        plan += [("crop", v, m) for v in CROP_TABLE for m in crop_modes]
        if cfg.ablate_encoder:
            plan += [("encoder", v, "random_per_frame") for v in ("rgb-no-encoder", "single-rgb")]
    else:
        plan += [("custom", v, m) for v in variants for m in crop_modes]
    cache: dict[tuple[str, str], list[float]] = {}
    rows = []
    for table, variant, mode in plan:
        if (variant, mode) not in cache:
            cache[variant, mode] = [run_variant(cfg, variant, mode, r) for r in range(runs)]
            log.info("%s / %s: %s", variant, mode, cache[variant, mode])
        rows.append(AblationRow(table, variant, mode, cache[variant, mode]))
    return rows


def format_ablation(rows: list[AblationRow]) -> str:
    titles = {"fusion": "Fusion ablation (random per-frame crop)",
              "crop": "Crop ablation", "encoder": "Encoder ablation", "custom": "Variants"}
    lines = []
    for table in dict.fromkeys(r.table for r in rows):
        lines.append(titles[table])
        lines.append(f"  {'variant':18s} {'crop':18s} {'mean acc':>9s}  runs")
        for r in rows:
            if r.table == table:
                runs = " ".join(f"{a:.3f}" for a in r.accuracies)
                lines.append(f"  {r.variant:18s} {r.crop_mode:18s} {100 * r.mean:8.2f}%  {runs}")
        lines.append("")
    return "\n".join(lines)

