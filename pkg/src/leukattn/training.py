"""Focal loss, one-cycle schedule, early stopping, checkpoint selection, train loop."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .evaluation import MetricsReport, evaluate_predictions
from .model import Checkpoint, LeukemiaClassifier, fingerprint

log = logging.getLogger(__name__)

SELECTION_F1_FLOOR = 0.85


@dataclass(frozen=True)
class TrainConfig:
    init_lr: float = 1e-4
    max_lr: float = 1e-3
    final_lr: float = 1e-8
    warmup_fraction: float = 0.3
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 0.002
    grad_clip_norm: float = 1.0
    loss: str = "focal"  # or "ce"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    mixed_precision: bool = True
    selection_f1_floor: float = SELECTION_F1_FLOOR
    num_workers: int = 0
    device: str = "auto"
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("init_lr", "max_lr", "final_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.focal_alpha < 1:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0 < self.warmup_fraction <= 1:
            raise ValueError("warmup_fraction must lie in (0, 1]")
        if self.loss not in ("focal", "ce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class TrainingDiverged(RuntimeError):
    def __init__(self, diagnostic: dict):
        super().__init__(f"non-finite loss: {diagnostic}")
        self.diagnostic = diagnostic


def focal_loss(
    logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0,
    reduction: str = "mean",
) -> torch.Tensor:
    """-alpha_t (1 - p_t)^gamma log p_t, averaged over the batch unless ``reduction="none"``.

    p_t is the softmax probability of the true class; alpha_t is ``alpha`` for
    class 1 (ALL) and ``1 - alpha`` for class 0 (HEM).
    """
    if reduction not in ("mean", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if logits.shape[0] == 0:
        raise ValueError("focal_loss of an empty batch")
    if not torch.isfinite(logits).all():
        raise ValueError("focal_loss received non-finite logits")
    log_pt = F.log_softmax(logits, dim=1).gather(1, targets.view(-1, 1)).squeeze(1)
    pt = log_pt.exp()
    alpha_t = torch.where(targets == 1, alpha, 1.0 - alpha).to(logits.dtype)
    per_sample = -alpha_t * (1.0 - pt).pow(gamma) * log_pt
    return per_sample.mean() if reduction == "mean" else per_sample


def make_loss(cfg: TrainConfig):
    if cfg.loss == "ce":
        return F.cross_entropy
    return lambda z, y: focal_loss(z, y, cfg.focal_alpha, cfg.focal_gamma)


def lr_at(step: int, total_steps: int, cfg: TrainConfig = TrainConfig()) -> float:
    """One-cycle learning rate: cosine ramp init->max, then cosine anneal max->final.

    The peak sits at ``round(warmup_fraction * total_steps)`` and equals
    ``max_lr`` exactly.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak = min(total_steps, max(1, round(cfg.warmup_fraction * total_steps)))
    if step == peak:
        return cfg.max_lr
    if step < peak:
        t = step / peak
        return cfg.init_lr + (cfg.max_lr - cfg.init_lr) / 2.0 * (1.0 - math.cos(math.pi * t))
    t = (step - peak) / (total_steps - peak)
    return cfg.final_lr + (cfg.max_lr - cfg.final_lr) / 2.0 * (1.0 + math.cos(math.pi * t))


def early_stop_check(val_f1: Sequence[float], patience: int = 10, min_delta: float = 0.002) -> bool:
    """True when no improvement of at least ``min_delta`` happened in the last ``patience`` epochs.

    The reference value only moves on an improvement, so a slow drift of
    sub-threshold gains does not reset the counter.
    """
    if not val_f1:
        raise ValueError("empty history")
    best = val_f1[0]
    since = 0
    for f in val_f1[1:]:
        # tolerance keeps an exact +min_delta step an improvement despite rounding
        if f - best >= min_delta - 1e-12:
            best, since = f, 0
        else:
            since += 1
    return since >= patience


def selection_key(epoch: int, val_f1: float, train_f1: float,
                  floor: float = SELECTION_F1_FLOOR) -> tuple:
    """Larger is better. Above the floor: smallest train/val gap, then higher
    val F1, then earlier epoch. Below it: higher val F1, then earlier epoch."""
    if val_f1 > floor:
        return (1, -abs(train_f1 - val_f1), val_f1, -epoch)
    return (0, val_f1, 0.0, -epoch)


def select_checkpoint(checkpoints: Sequence[Checkpoint], floor: float = SELECTION_F1_FLOOR) -> Checkpoint:
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    return max(checkpoints, key=lambda c: selection_key(c.epoch, c.val_f1, c.train_f1, floor))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    train_f1: float
    val_loss: float
    val_accuracy: float
    val_f1: float
    val_auc: float | None
    grad_norm_max: float
    grad_norm_clipped_max: float


@dataclass
class EpochHistory:
    records: list[EpochRecord] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    stopped_early: bool = False
    selected_epoch: int | None = None

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "lr_trace": self.lr_trace,
            "stopped_early": self.stopped_early,
            "selected_epoch": self.selected_epoch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpochHistory":
        return cls(
            [EpochRecord(**r) for r in d["records"]],
            list(d.get("lr_trace", [])),
            bool(d.get("stopped_early", False)),
            d.get("selected_epoch"),
        )

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "history.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        names = list(EpochRecord.__dataclass_fields__)
        with open(out_dir / "history.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(names)
            for r in self.records:
                w.writerow([getattr(r, n) for n in names])

    @classmethod
    def load(cls, path: str | Path) -> "EpochHistory":
        path = Path(path)
        if path.is_dir():
            path = path / "history.json"
        return cls.from_dict(json.loads(path.read_text()))


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def _collate(batch):
    images, labels, idx = zip(*batch)
    return torch.stack(images), torch.tensor(labels), torch.tensor(idx)


@torch.no_grad()
def predict(
    model: nn.Module, dataset: Dataset, batch_size: int = 32, device: torch.device | str = "cpu",
    loss_fn=None,
) -> dict:
    """Eval-mode pass: labels, argmax predictions, P(ALL), mean loss."""
    device = torch.device(device)
    was_training = model.training
    model.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, collate_fn=_collate)
    labels, preds, scores, losses = [], [], [], []
    for x, y, _ in loader:
        logits = model(x.to(device)).float()
        y = y.to(device)
        if loss_fn is not None:
            losses.append(float(loss_fn(logits, y)) * len(y))
        prob = torch.softmax(logits, dim=1)
        labels.append(y.cpu())
        preds.append(prob.argmax(1).cpu())
        scores.append(prob[:, 1].cpu())
    model.train(was_training)
    labels_t = torch.cat(labels).numpy()
    return {
        "labels": labels_t,
        "predictions": torch.cat(preds).numpy(),
        "scores": torch.cat(scores).double().numpy(),
        "loss": (sum(losses) / len(labels_t)) if losses else float("nan"),
    }


def evaluate_model(model: nn.Module, dataset: Dataset, batch_size: int = 32,
                   device: torch.device | str = "cpu") -> MetricsReport:
    out = predict(model, dataset, batch_size, device)
    return evaluate_predictions(out["predictions"], out["labels"], out["scores"])


def _grad_norm(params) -> float:
    norms = [p.grad.detach().norm(2) for p in params if p.grad is not None]
    if not norms:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack(norms), 2))


def train(
    model: LeukemiaClassifier,
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: TrainConfig = TrainConfig(),
    out_dir: str | Path | None = None,
    extra_fingerprint: object = None,
) -> tuple[Checkpoint, EpochHistory]:
    """Full training loop; returns the selected checkpoint and the epoch history.

    Checkpoints go to ``out_dir/best.pt`` whenever the selection key improves
    and ``out_dir/final.pt`` at the end. The history is written as
    ``history.json`` and ``history.tsv``.
    """
    if cfg.max_epochs < 1:
        raise ValueError("max_epochs must be >= 1")
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation sets must be non-empty")
    train_labels = set(getattr(train_ds, "labels", torch.tensor([])).tolist())
    if train_labels and train_labels != {0, 1}:
        raise ValueError("training set must contain both classes")

    out_dir = Path(out_dir) if out_dir is not None else None
    device = resolve_device(cfg.device)
    use_amp = cfg.mixed_precision and device.type == "cuda"
    if cfg.mixed_precision and not use_amp:
        log.info("mixed precision unavailable on %s; using full precision", device.type)
    seed_everything(cfg.seed)
    model.to(device)

    fp = fingerprint(model.config.to_dict(), cfg.to_dict(), extra_fingerprint)
    loss_fn = make_loss(cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.init_lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    scaler = torch.amp.GradScaler("cuda", enabled=use_amp)
    loader = DataLoader(
        train_ds,
        batch_size=cfg.batch_size,
        shuffle=True,
        drop_last=len(train_ds) > cfg.batch_size,  # BN needs >1 sample per batch
        num_workers=cfg.num_workers,
        generator=torch.Generator().manual_seed(cfg.seed),
        collate_fn=_collate,
    )
    steps_per_epoch = len(loader)
    total_steps = cfg.max_epochs * steps_per_epoch
    params = [p for p in model.parameters() if p.requires_grad]

    history = EpochHistory()
    best: Checkpoint | None = None
    best_key = None
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        if hasattr(train_ds, "set_epoch"):
            train_ds.set_epoch(epoch)
        model.train()
        seen, loss_sum = 0, 0.0
        y_all, p_all = [], []
        gmax = gmax_clipped = 0.0
        lr = cfg.init_lr
        for x, y, _ in loader:
            lr = lr_at(step, total_steps, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            history.lr_trace.append(lr)
            x, y = x.to(device), y.to(device)
            optimizer.zero_grad(set_to_none=True)
            with torch.autocast(device.type, dtype=torch.float16, enabled=use_amp):
                logits = model(x)
                loss = loss_fn(logits.float(), y)
            if not torch.isfinite(loss):
                diag = {"epoch": epoch, "step": step, "lr": lr, "loss": float(loss.detach())}
                if out_dir is not None:
                    out_dir.mkdir(parents=True, exist_ok=True)
                    (out_dir / "divergence.json").write_text(json.dumps(diag, indent=2))
                raise TrainingDiverged(diag)
            scaler.scale(loss).backward()
            scaler.unscale_(optimizer)
            pre = float(nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm))
            gmax = max(gmax, pre)
            gmax_clipped = max(gmax_clipped, _grad_norm(params))
            scaler.step(optimizer)
            scaler.update()
            step += 1
            n = len(y)
            seen += n
            loss_sum += float(loss.detach()) * n
            y_all.append(y.cpu())
            p_all.append(logits.detach().argmax(1).cpu())

        y_tr = torch.cat(y_all).numpy()
        p_tr = torch.cat(p_all).numpy()
        train_report = evaluate_predictions(p_tr, y_tr)
        val_out = predict(model, val_ds, max(cfg.batch_size, 32), device, loss_fn)
        val_report = evaluate_predictions(val_out["predictions"], val_out["labels"], val_out["scores"])
        rec = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=loss_sum / max(seen, 1),
            train_accuracy=train_report.accuracy,
            train_f1=train_report.f1_weighted,
            val_loss=val_out["loss"],
            val_accuracy=val_report.accuracy,
            val_f1=val_report.f1_weighted,
            val_auc=val_report.auc,
            grad_norm_max=gmax,
            grad_norm_clipped_max=gmax_clipped,
        )
        history.append(rec)
        log.info(
            "epoch %3d lr=%.2e train_loss=%.4f train_f1=%.4f val_loss=%.4f val_f1=%.4f",
            epoch, lr, rec.train_loss, rec.train_f1, rec.val_loss, rec.val_f1,
        )

        key = selection_key(epoch, rec.val_f1, rec.train_f1, cfg.selection_f1_floor)
        if best_key is None or key > best_key:
            best_key = key
            best = Checkpoint(
                state_dict={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
                model_config=model.config,
                epoch=epoch,
                val_f1=rec.val_f1,
                train_f1=rec.train_f1,
                config_fingerprint=fp,
                extra={"val_metrics": val_report.to_dict()},
            )
            if out_dir is not None:
                best.save(out_dir / "best.pt")

        if early_stop_check(history.column("val_f1"), cfg.patience, cfg.min_delta):
            history.stopped_early = True
            log.info("early stopping at epoch %d", epoch)
            break

    assert best is not None
    history.selected_epoch = best.epoch
    if out_dir is not None:
        Checkpoint(
            state_dict=copy.deepcopy({k: v.detach().cpu() for k, v in model.state_dict().items()}),
            model_config=model.config,
            epoch=history.records[-1].epoch,
            val_f1=history.records[-1].val_f1,
            train_f1=history.records[-1].train_f1,
            config_fingerprint=fp,
        ).save(out_dir / "final.pt")
        history.save(out_dir)
    return best, history
