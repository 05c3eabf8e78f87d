"""Training loop, checkpoints and millimetre-level prediction."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .classical import MatchResult
from .geometry import Displacement, PolylineIndex, Profile, read_profile, translate
from .model import ModelConfig, build_model, model_inputs
from .raster import ImageSpec, denormalize_label, render_sample
from .synthetic import DatasetManifest, ManifestRecord

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0
    # tolerance (mm) for the per-epoch success rate in the history
    success_tol_mm: float = 0.4
    # random whole-image shifts (px); the label is unchanged by a joint shift
    shift_augment_px: int = 0
    eval_batch_size: int = 100
    # "constant" or "cosine" (per batch step, from learning_rate down to 0)
    lr_schedule: str = "constant"

    def __post_init__(self) -> None:
        self.betas = tuple(float(b) for b in self.betas)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.shift_augment_px < 0:
            raise ValueError("shift_augment_px must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")

    def lr_at(self, step: int, total_steps: int) -> float:
        """Learning rate for optimizer step ``step`` (0-based) of ``total_steps``."""
        if self.lr_schedule == "constant" or total_steps <= 0:
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        return cls(**data)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class RenderedSplit:
    """Pre-rendered uint8 images for one split; ``images`` holds one array per branch."""

    ids: list[str]
    images: tuple[np.ndarray, ...]
    labels: np.ndarray  # (N, 2) normalised
    labels_mm: np.ndarray  # (N, 2)

    def __len__(self) -> int:
        return len(self.ids)


def render_records(
    records: Sequence[ManifestRecord],
    root: Path,
    spec: ImageSpec,
    mode: str,
    l_norm: float,
) -> RenderedSplit:
    per_branch: list[list[np.ndarray]] = [[] for _ in range(1 if mode == "single" else 2)]
    labels, labels_mm = [], []
    for rec in records:
        designed = read_profile(root / rec.designed_path)
        measured = read_profile(root / rec.measured_path)
        rs = render_sample(designed, measured, rec.label, spec, mode, l_norm, rec.id)
        for branch, im in zip(per_branch, rs.images):
            branch.append(im)
        labels.append(rs.label_norm)
        labels_mm.append((rec.dx_mm, rec.dy_mm))
    side = spec.output_px
    images = tuple(
        np.stack(b) if b else np.empty((0, side, side, 3), dtype=np.uint8) for b in per_branch
    )
    return RenderedSplit(
        [r.id for r in records],
        images,
        np.asarray(labels, dtype=np.float32).reshape(-1, 2),
        np.asarray(labels_mm, dtype=np.float64).reshape(-1, 2),
    )


def render_manifest_split(manifest: DatasetManifest, split: str, spec: ImageSpec, mode: str) -> RenderedSplit:
    return render_records(manifest.split(split), manifest.root, spec, mode, manifest.l_norm_mm)


@dataclass
class Checkpoint:
    state_dict: dict
    metadata: dict

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.metadata["model_config"])

    @property
    def image_spec(self) -> ImageSpec:
        return ImageSpec.from_dict(self.metadata["image_spec"])

    @property
    def l_norm(self) -> float:
        return float(self.metadata["l_norm_mm"])

    def build(self) -> nn.Module:
        cfg = self.model_config
        cfg.init = "random"
        model = build_model(cfg)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def save(self, path: str | Path) -> Path:
        """Write ``<path>.pt`` (weights) and ``<path>.json`` (metadata)."""
        path = Path(path)
        if path.suffix in (".pt", ".json"):
            path = path.with_suffix("")
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict, path.with_suffix(".pt"))
        path.with_suffix(".json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n")
        return path.with_suffix(".pt")

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        path = Path(path)
        if path.suffix in (".pt", ".json"):
            path = path.with_suffix("")
        weights, meta = path.with_suffix(".pt"), path.with_suffix(".json")
        for p in (weights, meta):
            if not p.exists():
                raise FileNotFoundError(f"checkpoint file missing: {p}")
        state = torch.load(weights, map_location="cpu", weights_only=True)
        return cls(state, json.loads(meta.read_text()))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    final_state_dict: dict | None = None


def _success_rate(pred_norm: np.ndarray, label_norm: np.ndarray, l_norm: float, tol_mm: float) -> float:
    err = np.abs(pred_norm - label_norm) * l_norm
    return float(np.mean(np.all(err < tol_mm, axis=1))) if len(err) else float("nan")


@torch.no_grad()
def predict_split(model: nn.Module, config: ModelConfig, data: RenderedSplit, batch_size: int = 100) -> np.ndarray:
    """Normalised predictions ``(N, 2)`` in inference mode."""
    model.eval()
    out = []
    for i in range(0, len(data), batch_size):
        batch = tuple(im[i : i + batch_size] for im in data.images)
        out.append(model(*model_inputs(batch, config)).numpy())
    return np.concatenate(out).astype(np.float64) if out else np.empty((0, 2))


def _shift_batch(tensors: tuple[torch.Tensor, ...], rng: np.random.Generator, max_px: int) -> tuple[torch.Tensor, ...]:
    """Shift every image of the batch by the same random integer offset, filling with background."""
    dx, dy = (int(v) for v in rng.integers(-max_px, max_px + 1, size=2))
    if dx == 0 and dy == 0:
        return tensors
    out = []
    for t in tensors:
        fill = t[:, :, :1, :1]  # top-left pixel is background on every rendered canvas
        shifted = fill.expand_as(t).clone()
        h, w = t.shape[-2:]
        src_r = slice(max(0, -dy), h - max(0, dy))
        dst_r = slice(max(0, dy), h - max(0, -dy))
        src_c = slice(max(0, -dx), w - max(0, dx))
        dst_c = slice(max(0, dx), w - max(0, -dx))
        shifted[:, :, dst_r, dst_c] = t[:, :, src_r, src_c]
        out.append(shifted)
    return tuple(out)


def train(
    model: nn.Module,
    model_config: ModelConfig,
    train_data: RenderedSplit,
    val_data: RenderedSplit,
    tcfg: TrainConfig,
    spec: ImageSpec,
    l_norm: float = 40.0,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Adam on MSE of normalised labels; keeps the epoch with the lowest val MSE.

    Batch composition depends only on ``(tcfg.seed, epoch)``. Ties in val MSE
    keep the earliest epoch.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training needs non-empty train and val splits")
    torch.manual_seed(tcfg.seed)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=tcfg.learning_rate,
        betas=tcfg.betas,
        eps=tcfg.eps,
        weight_decay=tcfg.weight_decay,
    )
    targets = torch.from_numpy(train_data.labels)
    out_dir = Path(out_dir) if out_dir is not None else None

    def metadata(epoch: int, history: list[dict]) -> dict:
        return {
            "model_config": model_config.to_dict(),
            "train_config": tcfg.to_dict(),
            "epoch": epoch,
            "history": history,
            "l_norm_mm": l_norm,
            "image_spec": spec.to_dict(),
            "image_spec_digest": spec.digest(),
            "render_mode": model_config.render_mode,
            "resize": "bilinear" if spec.resize_to is not None else None,
        }

    history: list[dict] = []
    best_val = math.inf
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    n = len(train_data)
    total_steps = tcfg.epochs * math.ceil(n / tcfg.batch_size)
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        model.train()
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(n)
        aug_rng = np.random.default_rng([tcfg.seed, epoch, 1])
        losses, weights, hits = [], [], 0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            inputs = model_inputs(tuple(im[idx] for im in train_data.images), model_config)
            if tcfg.shift_augment_px:
                inputs = _shift_batch(inputs, aug_rng, tcfg.shift_augment_px)
            pred = model(*inputs)
            loss = nn.functional.mse_loss(pred, targets[idx])
            if not torch.isfinite(loss):
                snapshot = {"epoch": epoch, "batch_start": int(start), "loss": loss.item(), "history": history}
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch offset {start}", snapshot)
            for group in optimizer.param_groups:
                group["lr"] = tcfg.lr_at(step, total_steps)
            step += 1
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            weights.append(len(idx))
            err = (pred.detach() - targets[idx]).abs().numpy() * l_norm
            hits += int(np.all(err < tcfg.success_tol_mm, axis=1).sum())

        val_pred = predict_split(model, model_config, val_data, tcfg.eval_batch_size)
        val_loss = float(np.mean((val_pred - val_data.labels) ** 2))
        record = {
            "epoch": epoch,
            "train_loss": float(np.average(losses, weights=weights)),
            "val_loss": val_loss,
            "train_accuracy": hits / n,
            "val_accuracy": _success_rate(val_pred, val_data.labels, l_norm, tcfg.success_tol_mm),
        }
        history.append(record)
        log.info(
            "epoch %d train_loss %.6g val_loss %.6g val_acc %.4f",
            epoch, record["train_loss"], val_loss, record["val_accuracy"],
        )
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
        if out_dir is not None and tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            Checkpoint(copy.deepcopy(model.state_dict()), metadata(epoch, list(history))).save(
                out_dir / f"epoch_{epoch:04d}"
            )

    final_state = copy.deepcopy(model.state_dict())
    checkpoint = Checkpoint(best_state, metadata(best_epoch, history))
    if out_dir is not None:
        checkpoint.save(out_dir / "best")
        write_history_csv(history, out_dir / "history.csv")
    return TrainResult(checkpoint, history, final_state)


def write_history_csv(history: list[dict], path: str | Path) -> Path:
    path = Path(path)
    cols = ["epoch", "train_loss", "val_loss", "train_accuracy", "val_accuracy"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({c: row[c] for c in cols})
    return path


class NeuralMatcher:
    """Loaded checkpoint that maps profile pairs to mm displacements."""

    method = "neural"

    def __init__(self, checkpoint: Checkpoint | str | Path):
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = Checkpoint.load(checkpoint)
        self.checkpoint = checkpoint
        self.config = checkpoint.model_config
        self.spec = checkpoint.image_spec
        self.l_norm = checkpoint.l_norm
        self.model = checkpoint.build()

    def predict_norm(self, pairs: Sequence[tuple[Profile, Profile]], sample_ids: Sequence[str] | None = None) -> np.ndarray:
        ids = list(sample_ids) if sample_ids is not None else [""] * len(pairs)
        branches: list[list[np.ndarray]] = [[] for _ in range(1 if self.config.architecture == "single" else 2)]
        for (designed, measured), sid in zip(pairs, ids):
            rs = render_sample(designed, measured, None, self.spec, self.config.render_mode, self.l_norm, sid)
            for b, im in zip(branches, rs.images):
                b.append(im)
        images = tuple(np.stack(b) for b in branches)
        data = RenderedSplit(ids, images, np.zeros((len(pairs), 2), np.float32), np.zeros((len(pairs), 2)))
        return predict_split(self.model, self.config, data)

    def match(self, designed: Profile, measured: Profile) -> MatchResult:
        return self.match_many([(designed, measured)])[0]

    def match_many(self, pairs: Sequence[tuple[Profile, Profile]], sample_ids: Sequence[str] | None = None) -> list[MatchResult]:
        preds = self.predict_norm(pairs, sample_ids)
        return [
            _neural_result(denormalize_label(p, self.l_norm), designed, measured)
            for p, (designed, measured) in zip(preds, pairs)
        ]


def _neural_result(d: Displacement, designed: Profile, measured: Profile, method: str = "neural") -> MatchResult:
    dist, _ = PolylineIndex(designed).query(translate(measured, d).points)
    return MatchResult(d, float(np.sqrt(np.mean(dist * dist))), 0, True, method=method)


def predict_mm(checkpoint: Checkpoint | str | Path | NeuralMatcher, designed: Profile, measured: Profile) -> MatchResult:
    matcher = checkpoint if isinstance(checkpoint, NeuralMatcher) else NeuralMatcher(checkpoint)
    return matcher.match(designed, measured)
