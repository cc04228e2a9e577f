"""Declarative run configuration: YAML file, validated against a versioned schema."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .experiments import ABLATION_VARIANTS, DataConfig, Settings
from .ingest import NamingRule
from .model import ModelConfig, fingerprint
from .splitter import DEFAULT_TARGETS, proportional_targets, targets_from_dict, targets_to_dict
from .training import TrainConfig

SCHEMA_VERSION = 1
ENV_DATA_ROOT = "LEUKATTN_DATA_ROOT"
ENV_OUTPUT_ROOT = "LEUKATTN_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def load_schema() -> dict:
    text = resources.files("leukattn").joinpath("configs/run_config.schema.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class SplitConfig:
    mode: str = "targets"
    targets: dict = field(default_factory=lambda: targets_to_dict(DEFAULT_TARGETS))
    proportions: tuple[float, float, float] = (0.79, 0.15, 0.06)
    seed: int = 42

    def resolve_targets(self, manifest):
        if self.mode == "proportional":
            return proportional_targets(manifest, self.proportions)
        return targets_from_dict(self.targets)


@dataclass(frozen=True)
class ExperimentConfig:
    n_iterations: int = 100
    base_seed: int = 0
    workers: int = 1
    ablation_variants: tuple[str, ...] = ABLATION_VARIANTS
    compare_variant: str | None = "no-attention"


@dataclass(frozen=True)
class RunConfig:
    dataset_root: str | None
    naming_rule: NamingRule
    split: SplitConfig
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    experiment: ExperimentConfig
    output_root: str
    manifest: str | None = None
    source: str | None = None

    @property
    def settings(self) -> Settings:
        return Settings(self.model, self.train, self.data)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset": {
                "root": self.dataset_root,
                "manifest": self.manifest,
                "naming_rule": self.naming_rule.to_dict(),
            },
            "split": {
                "mode": self.split.mode,
                "targets": copy.deepcopy(self.split.targets),
                "proportions": list(self.split.proportions),
                "seed": self.split.seed,
            },
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": {
                "balance": self.data.balance,
                "augment": self.data.augment,
                "augment_all": self.data.augment_all,
                "cache_images": self.data.cache_images,
                "policy": {
                    "hflip_prob": self.data.policy.hflip_prob,
                    "rotation_range_deg": self.data.policy.rotation_range_deg,
                    "brightness_jitter": self.data.policy.brightness_jitter,
                    "contrast_jitter": self.data.policy.contrast_jitter,
                    "rng_seed": self.data.policy.rng_seed,
                },
            },
            "experiment": {
                "n_iterations": self.experiment.n_iterations,
                "base_seed": self.experiment.base_seed,
                "workers": self.experiment.workers,
                "ablation_variants": list(self.experiment.ablation_variants),
                "compare_variant": self.experiment.compare_variant,
            },
            "output_root": self.output_root,
        }

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("output_root")
        return fingerprint(d)

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    def with_seed(self, seed: int) -> "RunConfig":
        """Override every seed knob from one value (split, training, augmentation, MC)."""
        return replace(
            self,
            split=replace(self.split, seed=seed),
            train=replace(self.train, seed=seed),
            data=replace(self.data, policy=replace(self.data.policy, rng_seed=seed)),
            experiment=replace(self.experiment, base_seed=seed),
        )

    def with_tiny_backbone(self) -> "RunConfig":
        return replace(self, model=replace(self.model, backbone_id="tiny", pretrained=False))


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None


def from_dict(raw: dict, source: str | None = None) -> RunConfig:
    validate(raw)
    ds = raw.get("dataset", {})
    root = ds.get("root") or os.environ.get(ENV_DATA_ROOT)
    out_root = raw.get("output_root") or os.environ.get(ENV_OUTPUT_ROOT) or "runs"
    sp = raw.get("split", {})
    exp = raw.get("experiment", {})
    try:
        split = SplitConfig(
            mode=sp.get("mode", "targets"),
            targets=sp.get("targets", targets_to_dict(DEFAULT_TARGETS)),
            proportions=tuple(sp.get("proportions", (0.79, 0.15, 0.06))),
            seed=sp.get("seed", 42),
        )
        targets_from_dict(split.targets)
        data_raw = dict(raw.get("data", {}))
        cfg = RunConfig(
            dataset_root=root,
            manifest=ds.get("manifest"),
            naming_rule=NamingRule.from_dict(ds.get("naming_rule", {})),
            split=split,
            model=ModelConfig.from_dict(raw.get("model", {})),
            train=TrainConfig.from_dict(raw.get("train", {})),
            data=DataConfig.from_dict(data_raw) if data_raw else DataConfig(),
            experiment=ExperimentConfig(
                n_iterations=exp.get("n_iterations", 100),
                base_seed=exp.get("base_seed", 0),
                workers=exp.get("workers", 1),
                ablation_variants=tuple(exp.get("ablation_variants", ABLATION_VARIANTS)),
                compare_variant=exp.get("compare_variant", "no-attention"),
            ),
            output_root=out_root,
            source=source,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config invalid: {exc}") from None
    return cfg


def packaged_configs() -> list[str]:
    folder = resources.files("leukattn").joinpath("configs")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".yaml"))


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load a YAML run config.

    ``None`` gives the packaged default; a bare name such as ``"smoke"`` that is
    not an existing file picks the packaged config of that name.
    """
    if path is None:
        path = "default"
    if not Path(path).exists() and str(path) in packaged_configs():
        text = resources.files("leukattn").joinpath(f"configs/{path}.yaml").read_text()
        source = f"<packaged:{path}>"
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        source = str(path)
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return from_dict(raw, source)


def as_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def _deep_update(base: dict, patch: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def override(cfg: RunConfig, patch: dict[str, Any]) -> RunConfig:
    """Apply a nested dict patch and re-validate."""
    return from_dict(_deep_update(cfg.to_dict(), patch), cfg.source)
