"""Attention heatmaps and training-curve figures.

SE weights are per channel, so a spatial map is obtained as the
channel-weighted mean of the feature maps that enter the SE block, min-max
normalised and bilinearly upsampled to the input size. This is a display
choice; it does not claim to reproduce any particular published figure.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402
from PIL import Image  # noqa: E402

from .model import LeukemiaClassifier  # noqa: E402
from .training import EpochHistory  # noqa: E402
from .transforms import normalize, resize  # noqa: E402

OVERLAY_CMAP = "jet"
OVERLAY_ALPHA = 0.45


class NoAttentionError(RuntimeError):
    pass


@dataclass
class AttentionArtifact:
    channel_weights: np.ndarray  # (C,)
    heatmap: np.ndarray  # (H, W) in [0, 1], input resolution
    overlay: np.ndarray  # (H, W, 3) uint8
    image: np.ndarray  # (H, W, 3) uint8, the resized input


def spatial_map(features: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """(C, h, w) features and (C,) weights -> (h, w) weighted channel mean."""
    return (features * weights[:, None, None]).sum(0) / features.shape[0]


def minmax(x: torch.Tensor) -> torch.Tensor:
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return torch.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def overlay_heatmap(image: np.ndarray, heatmap: np.ndarray,
                    cmap: str = OVERLAY_CMAP, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    colours = matplotlib.colormaps[cmap](heatmap)[..., :3]
    blended = (1 - alpha) * image.astype(np.float64) / 255.0 + alpha * colours
    return (np.clip(blended, 0, 1) * 255).round().astype(np.uint8)


@torch.no_grad()
def attention_heatmap(model: LeukemiaClassifier, image: torch.Tensor,
                      cmap: str = OVERLAY_CMAP, alpha: float = OVERLAY_ALPHA) -> AttentionArtifact:
    """``image``: 3xHxW in [0, 1] (un-normalised). The model is left untouched."""
    if model.se is None:
        raise NoAttentionError("model has no SE block (ablation variant); no attention available")
    was_training = model.training
    model.eval()
    try:
        size = model.config.input_size
        pixels = resize(image, size)
        feats = model.features(normalize(pixels).unsqueeze(0))
        weights = model.se.attention(feats)[0]
        smap = minmax(spatial_map(feats[0], weights))
        up = F.interpolate(smap[None, None], size=(size, size), mode="bilinear",
                           align_corners=False)[0, 0]
        heat = minmax(up)
    finally:
        model.train(was_training)
    rgb = (pixels.permute(1, 2, 0).clamp(0, 1).numpy() * 255).round().astype(np.uint8)
    heat_np = heat.numpy()
    return AttentionArtifact(
        channel_weights=weights.numpy(),
        heatmap=heat_np,
        overlay=overlay_heatmap(rgb, heat_np, cmap, alpha),
        image=rgb,
    )


def save_attention(artifact: AttentionArtifact, out_dir: str | Path, stem: str) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "image": out_dir / f"{stem}_image.png",
        "overlay": out_dir / f"{stem}_attention.png",
        "weights": out_dir / f"{stem}_channel_weights.tsv",
        "heatmap": out_dir / f"{stem}_heatmap.tsv",
    }
    Image.fromarray(artifact.image).save(paths["image"])
    Image.fromarray(artifact.overlay).save(paths["overlay"])
    with open(paths["weights"], "w") as fh:
        fh.write("channel\tweight\n")
        for c, w in enumerate(artifact.channel_weights):
            fh.write(f"{c}\t{float(w)!r}\n")
    np.savetxt(paths["heatmap"], artifact.heatmap, delimiter="\t", fmt="%.6f")
    return paths


CURVES = {
    "loss": ("train_loss", "val_loss", "Loss"),
    "accuracy": ("train_accuracy", "val_accuracy", "Accuracy"),
    "f1": ("train_f1", "val_f1", "F1-score"),
}


def plot_history(history: EpochHistory, out_dir: str | Path,
                 best_epoch: int | None = None) -> dict[str, Path]:
    """One PNG per curve (train and validation) plus a TSV of the plotted values."""
    if len(history) == 0:
        raise ValueError("empty history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best = best_epoch if best_epoch is not None else history.selected_epoch
    epochs = history.column("epoch")
    written = {}
    for key, (tr, va, title) in CURVES.items():
        y_tr, y_va = history.column(tr), history.column(va)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(epochs, y_tr, marker="o", ms=3, label="Training")
        ax.plot(epochs, y_va, marker="o", ms=3, label="Validation")
        if best is not None:
            ax.axvline(best, color="grey", ls="--", lw=1, label=f"selected (epoch {best})")
        ax.set_xlabel("Epoch")
        ax.set_ylabel(title)
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        png = out_dir / f"curve_{key}.png"
        fig.savefig(png, dpi=120)
        plt.close(fig)
        with open(out_dir / f"curve_{key}.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["epoch", "train", "validation", "selected"])
            for e, a, b in zip(epochs, y_tr, y_va):
                w.writerow([e, repr(a), repr(b), int(e == best)])
        written[key] = png
    return written


def render_report(run_dir: str | Path) -> Path:
    """Collect a training run's metrics and curves into a Markdown report."""
    import json

    run_dir = Path(run_dir)
    lines = [f"# Run report: {run_dir.name}", ""]
    hist_path = run_dir / "history.json"
    if hist_path.exists():
        history = EpochHistory.load(hist_path)
        figs = plot_history(history, run_dir / "figures")
        lines += [
            f"Epochs trained: {len(history)} (early stop: {history.stopped_early}); "
            f"selected epoch: {history.selected_epoch}",
            "",
        ]
        lines += [f"![{k}](figures/{p.name})" for k, p in figs.items()] + [""]
    for name in ("val_metrics.json", "test_metrics.json"):
        p = run_dir / name
        if not p.exists():
            continue
        m = json.loads(p.read_text())
        lines += [f"## {name[:-5].replace('_', ' ')}", "", "| metric | value |", "|---|---|"]
        for k in ("accuracy", "precision_weighted", "recall_weighted", "f1_weighted",
                  "f1_macro", "sensitivity", "specificity", "auc"):
            v = m.get(k)
            lines.append(f"| {k} | {'n/a' if v is None else f'{v:.4f}'} |")
        lines += ["", f"Confusion [true][pred] (HEM, ALL): {m['confusion']}", ""]
    summary = run_dir / "summary.json"
    if summary.exists():
        s = json.loads(summary.read_text())
        lines += ["## Monte Carlo summary", "",
                  f"completed {s['n_completed']}/{s['n_requested']}, failed {len(s['failed'])}", "",
                  "| metric | mean | std | CI low | CI high |", "|---|---|---|---|---|"]
        for k, v in s["metrics"].items():
            std = "n/a" if v["std"] is None else f"{v['std']:.4f}"
            lines.append(f"| {k} | {v['mean']:.4f} | {std} | {v['ci_low']:.4f} | {v['ci_high']:.4f} |")
        lines.append("")
    out = run_dir / "report.md"
    out.write_text("\n".join(lines))
    return out
