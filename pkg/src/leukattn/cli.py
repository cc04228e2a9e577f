"""Command-line entry point: ``leukattn <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .evaluation import evaluate_predictions
from .experiments import (
    compare_variants,
    apply_variant,
    make_datasets,
    run_ablation,
    run_monte_carlo,
    run_training,
    write_predictions,
)
from .ingest import DatasetManifest, read_manifest, scan_dataset, summarize, write_manifest
from .model import Checkpoint
from .reporting import attention_heatmap, plot_history, render_report, save_attention
from .splitter import Split, SplitAssignment, fixed_split, random_resplit, read_split, write_split
from .training import predict
from .transforms import load_rgb

log = logging.getLogger("leukattn")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


class CommandError(RuntimeError):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


# -- shared helpers -----------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "data_root", None):
        cfg = replace(cfg, dataset_root=args.data_root)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "tiny", False):
        cfg = cfg.with_tiny_backbone()
    return cfg


def _manifest(cfg: RunConfig, path: str | None) -> DatasetManifest:
    path = path or cfg.manifest
    if path:
        return read_manifest(path)
    if not cfg.dataset_root:
        raise ConfigError("no dataset: set dataset.root, LEUKATTN_DATA_ROOT, --data-root or --manifest")
    return scan_dataset(cfg.dataset_root, cfg.naming_rule)


def _split(cfg: RunConfig, manifest: DatasetManifest, path: str | None) -> SplitAssignment:
    if path:
        return read_split(path)
    return fixed_split(manifest, cfg.split.resolve_targets(manifest), cfg.split.seed)


class RunDir:
    """Output directory for one command; moved under ``failed/`` if the command raises."""

    def __init__(self, cfg: RunConfig, command: str, out: str | None, resume: bool = False):
        root = Path(cfg.output_root)
        self.path = Path(out) if out else root / f"{command}-{cfg.fingerprint()}"
        self.failed_root = (self.path.parent if out else root) / "failed"
        self.cfg = cfg
        self.resume = resume

    def __enter__(self) -> Path:
        if self.path.exists() and any(self.path.iterdir()) and not self.resume:
            if (self.path / "resolved_config.yaml").exists():
                raise CommandError(f"{self.path} already holds a run; pass --resume or --out")
        self.path.mkdir(parents=True, exist_ok=True)
        self.cfg.dump(self.path / "resolved_config.yaml")
        return self.path

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None or exc_type is KeyboardInterrupt:
            return
        self.failed_root.mkdir(parents=True, exist_ok=True)
        dest = self.failed_root / f"{self.path.name}-{time.strftime('%Y%m%d-%H%M%S')}"
        shutil.move(str(self.path), dest)
        log.error("partial outputs quarantined in %s", dest)


# -- commands -----------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = _config(args)
    if not cfg.dataset_root:
        raise ConfigError("no dataset root configured")
    manifest = scan_dataset(cfg.dataset_root, cfg.naming_rule, workers=args.workers)
    out = Path(args.out or Path(cfg.output_root) / "manifest.tsv")
    write_manifest(manifest, out)
    _emit({"manifest": str(out), "records": len(manifest), "patients": len(manifest.patients),
           "classes": {k: asdict(v) for k, v in summarize(manifest).items()}})
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _config(args)
    manifest = _manifest(cfg, args.manifest)
    targets = cfg.split.resolve_targets(manifest)
    if args.random:
        split = random_resplit(manifest, targets, cfg.split.seed)
    else:
        split = fixed_split(manifest, targets, cfg.split.seed)
    out = Path(args.out or Path(cfg.output_root) / f"split-seed{cfg.split.seed}.tsv")
    write_split(split, out)
    counts = split.counts(manifest)
    _emit({"split": str(out), "seed": split.seed,
           "counts": {s.value: {k: asdict(v) for k, v in c.items()} for s, c in counts.items()}})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = _manifest(cfg, args.manifest)
    split = _split(cfg, manifest, args.split)
    with RunDir(cfg, "train", args.out) as run_dir:
        write_manifest(manifest, run_dir / "manifest.tsv")
        result = run_training(manifest, split, cfg.settings, run_dir)
        plot_history(result.history, run_dir / "figures")
        out = {"run_dir": str(run_dir), "selected_epoch": result.checkpoint.epoch,
               "epochs": len(result.history), "stopped_early": result.history.stopped_early,
               "val": result.val_report.headline()}
        if result.test_report is not None:
            out["test"] = result.test_report.headline()
        _emit(out)
    return EXIT_OK


def _read_predictions(path: Path):
    delim = "," if path.suffix.lower() == ".csv" else "\t"
    labels, preds, scores = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delim)
        missing = {"label", "prediction"} - set(reader.fieldnames or [])
        if missing:
            raise CommandError(f"{path}: missing column(s) {sorted(missing)}")
        has_score = "score_all" in reader.fieldnames
        for row in reader:
            labels.append(int(row["label"]))
            preds.append(int(row["prediction"]))
            if has_score:
                scores.append(float(row["score_all"]))
    return labels, preds, (scores if scores else None)


def cmd_eval(args) -> int:
    if args.predictions:
        labels, preds, scores = _read_predictions(Path(args.predictions))
        report = evaluate_predictions(preds, labels, scores)
    else:
        if not args.checkpoint:
            raise CommandError("eval needs --predictions or --checkpoint")
        cfg = _config(args)
        ckpt = Checkpoint.load(args.checkpoint)
        run_dir = Path(args.checkpoint).parent
        manifest_path = args.manifest or (run_dir / "manifest.tsv")
        split_path = args.split or (run_dir / "split.tsv")
        manifest = read_manifest(manifest_path) if Path(manifest_path).exists() else _manifest(cfg, None)
        split = read_split(split_path) if Path(split_path).exists() else _split(cfg, manifest, None)
        settings = replace(cfg.settings, model=ckpt.model_config)
        _, val_ds, test_ds = make_datasets(manifest, split, settings)
        ds = val_ds if args.on == Split.VALIDATION.value else test_ds
        out = predict(ckpt.build_model(), ds)
        report = evaluate_predictions(out["predictions"], out["labels"], out["scores"])
        if args.out:
            write_predictions(Path(args.out).with_suffix(".predictions.tsv"), ds, out)
    if args.out:
        report.save(args.out)
    d = report.to_dict()
    d["headline"] = report.headline()
    _emit(d)
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    cfg = _config(args)
    if args.n is not None:
        cfg = replace(cfg, experiment=replace(cfg.experiment, n_iterations=args.n))
    manifest = _manifest(cfg, args.manifest)
    targets = cfg.split.resolve_targets(manifest)
    exp = cfg.experiment
    with RunDir(cfg, "montecarlo", args.out, resume=args.resume) as run_dir:
        summary = run_monte_carlo(manifest, cfg.settings, run_dir / "full", exp.n_iterations,
                                  exp.base_seed, targets, exp.workers)
        out = {"run_dir": str(run_dir), "n_completed": len(summary.reports),
               "failed": summary.failed,
               "metrics": {k: asdict(v) for k, v in summary.metrics.items()}}
        variant = args.compare if args.compare is not None else exp.compare_variant
        if variant and variant != "none":
            other = run_monte_carlo(manifest, apply_variant(cfg.settings, variant),
                                    run_dir / variant, exp.n_iterations, exp.base_seed,
                                    targets, exp.workers)
            common = sorted(set(summary.seeds) & set(other.seeds))
            fa = {r["seed"]: r["f1_weighted"] for r in summary.reports}
            fb = {r["seed"]: r["f1_weighted"] for r in other.reports}
            cmp = compare_variants([fa[s] for s in common], [fb[s] for s in common],
                                   ("full", variant))
            (run_dir / "comparison.json").write_text(json.dumps(asdict(cmp), indent=2))
            out["comparison"] = {k: v for k, v in asdict(cmp).items() if k != "deltas"}
        _emit(out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    manifest = _manifest(cfg, args.manifest)
    split = _split(cfg, manifest, args.split)
    variants = args.variants if args.variants is not None else list(cfg.experiment.ablation_variants)
    with RunDir(cfg, "ablate", args.out) as run_dir:
        table = run_ablation(manifest, split, cfg.settings, variants, run_dir)
        _emit({"run_dir": str(run_dir), "rows": [asdict(r) for r in table.rows]})
    return EXIT_OK


def cmd_visualize(args) -> int:
    model = Checkpoint.load(args.checkpoint).build_model()
    out_dir = Path(args.out or Path(args.checkpoint).parent / "attention")
    written = []
    for image_path in args.images:
        art = attention_heatmap(model, load_rgb(image_path))
        paths = save_attention(art, out_dir, Path(image_path).stem)
        written.append({k: str(v) for k, v in paths.items()})
    _emit({"attention": written})
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise CommandError(f"not a run directory: {run_dir}")
    out = render_report(run_dir)
    _emit({"report": str(out)})
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import generate_dataset

    root = generate_dataset(args.out, args.n_all, args.n_hem, args.images_per_patient,
                            args.size, args.seed, args.hem_images_per_patient)
    _emit({"root": str(root)})
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leukattn", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("-c", "--config", help="run config YAML, or a packaged name (default, smoke)")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--tiny", action="store_true", help="use the offline tiny backbone")
        sp.add_argument("--out", help="output file or directory")
        if data:
            sp.add_argument("--data-root", help="dataset root (overrides config/env)")
            sp.add_argument("--manifest", help="manifest TSV instead of scanning")

    sp = sub.add_parser("ingest", help="scan a dataset tree and write a manifest")
    common(sp)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("split", help="patient-wise split")
    common(sp)
    sp.add_argument("--random", action="store_true", help="random resplit instead of the fixed split")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("train", help="train on a split and select a checkpoint")
    common(sp)
    sp.add_argument("--split", help="split TSV (default: fixed split from config)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metrics from a predictions file or a checkpoint")
    common(sp)
    sp.add_argument("--predictions", help="TSV/CSV with label, prediction[, score_all]")
    sp.add_argument("--checkpoint")
    sp.add_argument("--split")
    sp.add_argument("--on", choices=[Split.VALIDATION.value, Split.TEST.value],
                    default=Split.TEST.value)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("montecarlo", help="repeated patient resplits with retraining")
    common(sp)
    sp.add_argument("--n", type=int, help="iterations (default from config)")
    sp.add_argument("--resume", action="store_true", help="continue an interrupted run")
    sp.add_argument("--compare", help="variant to compare against, or 'none'")
    sp.set_defaults(func=cmd_montecarlo)

    sp = sub.add_parser("ablate", help="ablation grid on the fixed split")
    common(sp)
    sp.add_argument("--split")
    sp.add_argument("--variants", nargs="*")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("visualize", help="SE attention overlays for images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")
    sp.add_argument("images", nargs="+")
    sp.set_defaults(func=cmd_visualize)

    sp = sub.add_parser("report", help="render figures and a Markdown report for a run")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("synth", help="write a synthetic C-NMC-style dataset")
    sp.add_argument("out")
    sp.add_argument("--n-all", type=int, default=14)
    sp.add_argument("--n-hem", type=int, default=12)
    sp.add_argument("--images-per-patient", type=int, default=25)
    sp.add_argument("--hem-images-per-patient", type=int, default=21)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        if args.verbose:
            log.exception("command failed")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
