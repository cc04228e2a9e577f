"""Training pipeline on a split, Monte Carlo resplits, variant comparison, ablation."""

from __future__ import annotations

import csv
import json
import logging
import multiprocessing
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .evaluation import MetricsReport, evaluate_predictions
from .ingest import DatasetManifest, write_manifest
from .model import Checkpoint, ModelConfig, build_model
from .splitter import (
    DEFAULT_TARGETS,
    ClassCounts,
    Split,
    SplitAssignment,
    check_split,
    materialize,
    random_resplit,
    write_split,
)
from .training import EpochHistory, TrainConfig, predict, seed_everything, train
from .transforms import AugmentPolicy, CellImageDataset, balance_minority

log = logging.getLogger(__name__)

SUMMARY_METRICS = (
    "accuracy",
    "precision_weighted",
    "recall_weighted",
    "f1_weighted",
    "auc",
    "sensitivity",
    "specificity",
)


@dataclass(frozen=True)
class DataConfig:
    balance: bool = True
    augment: bool = True
    augment_all: bool = False
    policy: AugmentPolicy = AugmentPolicy()
    cache_images: bool = False

    @classmethod
    def from_dict(cls, d: Mapping) -> "DataConfig":
        d = dict(d)
        if "policy" in d:
            d["policy"] = AugmentPolicy(**d["policy"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Settings:
    """Everything that defines one training run apart from data and split."""

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": self.data.to_dict()}


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    history: EpochHistory
    val_report: MetricsReport
    test_report: MetricsReport | None


def make_datasets(manifest: DatasetManifest, split: SplitAssignment, settings: Settings):
    train_recs, val_recs, test_recs = materialize(manifest, split)
    if settings.data.balance:
        train_recs = balance_minority(train_recs)
    size = settings.model.input_size
    cache = settings.data.cache_images
    train_ds = CellImageDataset(
        train_recs, size, train=settings.data.augment, policy=settings.data.policy,
        augment_all=settings.data.augment_all, cache=cache,
    )
    val_ds = CellImageDataset(val_recs, size, cache=cache)
    test_ds = CellImageDataset(test_recs, size, cache=cache)
    return train_ds, val_ds, test_ds


def write_predictions(path: Path, dataset: CellImageDataset, out: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["image_id", "patient_id", "label", "prediction", "score_all"])
        for rec, y, p, s in zip(dataset.records, out["labels"], out["predictions"], out["scores"]):
            w.writerow([rec.image_id, rec.patient_id, int(y), int(p), repr(float(s))])
    return path


def run_training(
    manifest: DatasetManifest,
    split: SplitAssignment,
    settings: Settings,
    out_dir: str | Path | None = None,
    evaluate_test: bool = True,
) -> TrainingResult:
    """Materialize, balance, train, then score the selected checkpoint."""
    check_split(split, manifest)
    out_dir = Path(out_dir) if out_dir is not None else None
    train_ds, val_ds, test_ds = make_datasets(manifest, split, settings)
    seed_everything(settings.train.seed)
    model = build_model(settings.model)
    ckpt, history = train(model, train_ds, val_ds, settings.train, out_dir,
                          extra_fingerprint=settings.data.to_dict())
    best = ckpt.build_model()
    val_report = MetricsReport.from_dict(ckpt.extra["val_metrics"])
    test_report = None
    if evaluate_test and len(test_ds):
        out = predict(best, test_ds)
        test_report = evaluate_predictions(out["predictions"], out["labels"], out["scores"])
        if out_dir is not None:
            write_predictions(out_dir / "test_predictions.tsv", test_ds, out)
            test_report.save(out_dir / "test_metrics.json")
    if out_dir is not None:
        val_report.save(out_dir / "val_metrics.json")
        write_split(split, out_dir / "split.tsv")
    return TrainingResult(ckpt, history, val_report, test_report)


@dataclass(frozen=True)
class RunSummary:
    mean: float
    std: float | None
    ci_low: float
    ci_high: float
    n: int


def summarize_runs(values: Sequence[float], ci: float = 0.95) -> RunSummary:
    """Sample mean, sample std (n-1) and a percentile interval (linear interpolation).

    With a single value the std is undefined and reported as None.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("summarize_runs of an empty sequence")
    tail = (1.0 - ci) / 2.0 * 100.0
    lo, hi = np.percentile(x, [tail, 100.0 - tail], method="linear")
    return RunSummary(
        mean=float(x.mean()),
        std=float(x.std(ddof=1)) if x.size > 1 else None,
        ci_low=float(lo),
        ci_high=float(hi),
        n=int(x.size),
    )


@dataclass
class ComparisonResult:
    variant_a: str
    variant_b: str
    deltas: list[float]
    test: str
    statistic: float | None
    p_value: float
    t_statistic: float | None
    t_p_value: float
    no_difference: bool = False


def compare_variants(
    runs_a: Sequence[float],
    runs_b: Sequence[float],
    names: tuple[str, str] = ("a", "b"),
    seeds_a: Sequence[int] | None = None,
    seeds_b: Sequence[int] | None = None,
) -> ComparisonResult:
    """Paired Wilcoxon signed-rank test (primary) and paired t-test on a - b."""
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError(f"paired comparison needs equal-length runs, got {a.shape} vs {b.shape}")
    if seeds_a is not None and seeds_b is not None and list(seeds_a) != list(seeds_b):
        raise ValueError("runs are not iteration-aligned (seed lists differ)")
    d = a - b
    if np.all(d == 0):
        return ComparisonResult(*names, d.tolist(), "wilcoxon", None, 1.0, None, 1.0, True)
    w = stats.wilcoxon(a, b)
    if np.ptp(d) == 0:
        t_stat, t_p = (float("inf") * np.sign(d[0]), 0.0) if a.size > 1 else (None, 1.0)
    else:
        t = stats.ttest_rel(a, b)
        t_stat, t_p = float(t.statistic), float(t.pvalue)
    return ComparisonResult(*names, d.tolist(), "wilcoxon", float(w.statistic),
                            float(w.pvalue), t_stat, t_p)


@dataclass
class MonteCarloSummary:
    reports: list[dict]
    seeds: list[int]
    metrics: dict[str, RunSummary]
    failed: list[dict] = field(default_factory=list)
    n_requested: int = 0

    def values(self, metric: str) -> list[float]:
        return [r[metric] for r in self.reports]

    def to_dict(self) -> dict:
        return {
            "n_requested": self.n_requested,
            "n_completed": len(self.reports),
            "failed": self.failed,
            "seeds": self.seeds,
            "metrics": {k: asdict(v) for k, v in self.metrics.items()},
            "reports": self.reports,
        }


def _iteration(i: int, seed: int, manifest: DatasetManifest, targets, settings: Settings,
               it_dir: Path) -> dict:
    split = random_resplit(manifest, targets, seed)
    check_split(split, manifest)
    write_split(split, it_dir / "split.tsv")
    it_settings = replace(settings, train=replace(settings.train, seed=seed))
    result = run_training(manifest, split, it_settings, it_dir)
    report = result.test_report.to_dict()
    report["iteration"] = i
    report["seed"] = seed
    report["selected_epoch"] = result.checkpoint.epoch
    return report


def _iteration_safe(args) -> tuple[int, dict | None, dict | None]:
    i, seed, manifest, targets, settings, it_dir = args
    it_dir.mkdir(parents=True, exist_ok=True)
    try:
        report = _iteration(i, seed, manifest, targets, settings, it_dir)
    except Exception as exc:  # recorded per iteration, never silently dropped
        err = {"iteration": i, "seed": seed, "error": repr(exc),
               "traceback": traceback.format_exc()}
        (it_dir / "error.json").write_text(json.dumps(err, indent=2))
        return i, None, err
    (it_dir / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return i, report, None


def run_monte_carlo(
    manifest: DatasetManifest,
    settings: Settings,
    out_dir: str | Path,
    n: int = 100,
    base_seed: int = 0,
    targets: Mapping[Split, ClassCounts] = DEFAULT_TARGETS,
    workers: int = 1,
) -> MonteCarloSummary:
    """Resplit with seed ``base_seed + i``, retrain, evaluate on the test patients.

    Iterations whose ``metrics.json`` already exists are loaded, not rerun, so
    an interrupted run can be resumed by calling this again.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, out_dir / "manifest.tsv")
    results: dict[int, dict] = {}
    failed: dict[int, dict] = {}
    todo = []
    for i in range(n):
        it_dir = out_dir / f"iter_{i:03d}"
        done = it_dir / "metrics.json"
        if done.exists():
            results[i] = json.loads(done.read_text())
            continue
        todo.append((i, base_seed + i, manifest, targets, settings, it_dir))

    if workers > 1 and len(todo) > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            outcomes = list(pool.map(_iteration_safe, todo))
    else:
        outcomes = []
        for args in todo:
            log.info("monte carlo iteration %d/%d (seed %d)", args[0] + 1, n, args[1])
            outcomes.append(_iteration_safe(args))
    for i, report, err in outcomes:
        if report is not None:
            results[i] = report
        else:
            failed[i] = err
            log.error("iteration %d failed: %s", i, err["error"])

    reports = [results[i] for i in sorted(results)]
    metrics = {}
    for name in SUMMARY_METRICS:
        vals = [r[name] for r in reports if r.get(name) is not None]
        if vals:
            metrics[name] = summarize_runs(vals)
    summary = MonteCarloSummary(
        reports=reports,
        seeds=[r["seed"] for r in reports],
        metrics=metrics,
        failed=[{k: v for k, v in failed[i].items() if k != "traceback"} for i in sorted(failed)],
        n_requested=n,
    )
    (out_dir / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    return summary


ABLATION_VARIANTS = ("no-augmentation", "no-attention", "no-focal-loss")


def apply_variant(settings: Settings, name: str) -> Settings:
    if name == "no-augmentation":
        return replace(settings, data=replace(settings.data, balance=False, augment=False))
    if name == "no-attention":
        return replace(settings, model=replace(settings.model, use_attention=False))
    if name == "no-focal-loss":
        return replace(settings, train=replace(settings.train, loss="ce"))
    raise ValueError(f"unknown ablation variant {name!r}; known: {list(ABLATION_VARIANTS)}")


@dataclass
class AblationRow:
    name: str
    f1: float
    delta: float


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def __post_init__(self) -> None:
        if not self.rows or self.rows[0].name != "full":
            raise ValueError("first ablation row must be the full model")
        full = self.rows[0].f1
        for r in self.rows:
            if r.delta != r.f1 - full:
                raise ValueError(f"row {r.name!r}: delta {r.delta} != f1 - full f1")

    @classmethod
    def from_f1(cls, full_f1: float, variants: Sequence[tuple[str, float]]) -> "AblationTable":
        rows = [AblationRow("full", full_f1, 0.0)]
        rows += [AblationRow(name, f1, f1 - full_f1) for name, f1 in variants]
        return cls(rows)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["configuration", "val_f1", "delta"])
            for r in self.rows:
                w.writerow([r.name, repr(r.f1), repr(r.delta)])
        return path


def run_ablation(
    manifest: DatasetManifest,
    split: SplitAssignment,
    settings: Settings,
    variants: Sequence[str] = ABLATION_VARIANTS,
    out_dir: str | Path | None = None,
) -> AblationTable:
    """Train the full model and each variant on one split; compare validation F1."""
    variant_settings = [(v, apply_variant(settings, v)) for v in variants]  # fail fast
    out_dir = Path(out_dir) if out_dir is not None else None

    def sub(name):
        return out_dir / name if out_dir is not None else None

    full = run_training(manifest, split, settings, sub("full"), evaluate_test=False)
    scores = []
    for name, s in variant_settings:
        res = run_training(manifest, split, s, sub(name), evaluate_test=False)
        scores.append((name, res.checkpoint.val_f1))
    table = AblationTable.from_f1(full.checkpoint.val_f1, scores)
    if out_dir is not None:
        table.write(out_dir / "ablation.tsv")
    return table
