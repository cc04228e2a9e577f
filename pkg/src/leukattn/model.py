"""Backbone adapters, the Squeeze-and-Excitation block, the head and checkpoints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn

CHECKPOINT_FORMAT = 1
TINY_BACKBONE = "tiny"


class BackboneError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone_id: str = "tf_efficientnetv2_b3"
    pretrained: bool = True
    allow_random_init: bool = False
    input_size: int = 384
    se_reduction: int = 16
    use_attention: bool = True
    head_dims: tuple[int, ...] = (512, 256, 2)
    # Dropout before each hidden FC layer of the head (the first one is the
    # dropout applied to the pooled features).
    head_dropout: tuple[float, ...] = (0.3, 0.2)
    backbone_dropout: float = 0.3
    drop_path_rate: float = 0.2
    tiny_width: int = 64

    def __post_init__(self) -> None:
        if self.se_reduction < 1:
            raise ValueError("se_reduction must be >= 1")
        if self.head_dims[-1] != 2:
            raise ValueError("head output dimension must be 2")
        if len(self.head_dropout) != len(self.head_dims) - 1:
            raise ValueError("need one dropout rate per hidden head layer")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("head_dims", "head_dropout"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_dims"] = list(self.head_dims)
        d["head_dropout"] = list(self.head_dropout)
        return d


class TinyBackbone(nn.Module):
    """Four stride-2 3x3 conv/BN/ReLU stages; ~61k parameters at width 64."""

    def __init__(self, width: int = 64):
        super().__init__()
        chans = [3, 16, 32, 64, width]
        layers: list[nn.Module] = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [
                nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            ]
        self.features = nn.Sequential(*layers)
        self.num_features = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


class TimmBackbone(nn.Module):
    """Wraps a timm model so ``forward`` returns the unpooled feature map."""

    def __init__(self, net: nn.Module):
        super().__init__()
        self.net = net
        self.num_features = int(net.num_features)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net.forward_features(x)


def available_backbones() -> list[str]:
    ids = [TINY_BACKBONE]
    try:
        import timm

        ids += timm.list_models()
    except ImportError:
        pass
    return ids


def build_backbone(config: ModelConfig) -> nn.Module:
    """Feature extractor exposing ``num_features`` (the channel count C)."""
    if config.backbone_id == TINY_BACKBONE:
        return TinyBackbone(config.tiny_width)
    try:
        import timm
    except ImportError:
        raise BackboneError(
            f"backbone {config.backbone_id!r} needs the 'timm' package "
            f"(pip install timm); available offline: [{TINY_BACKBONE!r}]"
        ) from None
    if config.backbone_id not in timm.list_models():
        raise BackboneError(
            f"unknown backbone {config.backbone_id!r}; available: "
            f"{TINY_BACKBONE!r} or any timm model name (e.g. tf_efficientnetv2_b3)"
        )
    kwargs = dict(
        num_classes=0,
        global_pool="",
        drop_rate=config.backbone_dropout,
        drop_path_rate=config.drop_path_rate,
    )
    pretrained = config.pretrained
    if pretrained:
        try:
            net = timm.create_model(config.backbone_id, pretrained=True, **kwargs)
        except Exception as exc:  # network, hub or checksum failures
            if not config.allow_random_init:
                raise BackboneError(
                    f"could not load pretrained weights for {config.backbone_id!r}: {exc}. "
                    "Pre-download them into the HF/timm cache, or set "
                    "model.allow_random_init: true to train from random init."
                ) from None
            pretrained = False
    if not pretrained:
        net = timm.create_model(config.backbone_id, pretrained=False, **kwargs)
    return TimmBackbone(net)


class SEBlock(nn.Module):
    """Squeeze-and-Excitation channel attention.

    squeeze: global average pool per channel; excitation: FC(C->C//r) -> ReLU
    -> FC(C//r->C) -> sigmoid; the input is rescaled per channel by the
    resulting weights. Bottleneck width is ``max(1, C // r)``.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.channels = channels
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Channel weights in [0, 1], shape (N, C)."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(
                f"SE block built for {self.channels} channels, got input {tuple(x.shape)}"
            )
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(s))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.attention(x)[:, :, None, None]


class ClassificationHead(nn.Module):
    """dropout -> FC -> BN -> ReLU, repeated per hidden layer, then FC to logits."""

    def __init__(self, in_features: int, dims=(512, 256, 2), dropout=(0.3, 0.2)):
        super().__init__()
        self.in_features = in_features
        layers: list[nn.Module] = []
        prev = in_features
        for width, p in zip(dims[:-1], dropout):
            layers += [nn.Dropout(p), nn.Linear(prev, width), nn.BatchNorm1d(width), nn.ReLU()]
            prev = width
        layers.append(nn.Linear(prev, dims[-1]))
        self.layers = nn.Sequential(*layers)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        if pooled.ndim != 2 or pooled.shape[1] != self.in_features:
            raise ValueError(
                f"head expects (N, {self.in_features}) input, got {tuple(pooled.shape)}"
            )
        return self.layers(pooled)


class LeukemiaClassifier(nn.Module):
    """backbone -> SE -> global average pool -> head; returns raw logits."""

    def __init__(self, config: ModelConfig, backbone: nn.Module | None = None):
        super().__init__()
        self.config = config
        self.backbone = backbone if backbone is not None else build_backbone(config)
        c = self.backbone.num_features
        self.se = SEBlock(c, config.se_reduction) if config.use_attention else None
        self.head = ClassificationHead(c, config.head_dims, config.head_dropout)

    @property
    def num_features(self) -> int:
        return self.backbone.num_features

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.backbone(x)
        if self.se is not None:
            f = self.se(f)
        return self.head(f.mean(dim=(2, 3)))

    @torch.no_grad()
    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax class probabilities (inference only)."""
        return torch.softmax(self(x), dim=1)


def build_model(config: ModelConfig) -> LeukemiaClassifier:
    return LeukemiaClassifier(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def fingerprint(*parts: Any) -> str:
    """Short stable hash of JSON-serialisable config parts."""
    blob = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class Checkpoint:
    state_dict: dict[str, torch.Tensor]
    model_config: ModelConfig
    epoch: int
    val_f1: float
    train_f1: float
    config_fingerprint: str
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.val_f1 <= 1.0:
            raise ValueError(f"val_f1 out of range: {self.val_f1}")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format_version": CHECKPOINT_FORMAT,
                "state_dict": self.state_dict,
                "model_config": self.model_config.to_dict(),
                "epoch": self.epoch,
                "val_f1": self.val_f1,
                "train_f1": self.train_f1,
                "config_fingerprint": self.config_fingerprint,
                "extra": self.extra,
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        version = blob.get("format_version")
        if version != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {version!r}")
        return cls(
            state_dict=blob["state_dict"],
            model_config=ModelConfig.from_dict(blob["model_config"]),
            epoch=blob["epoch"],
            val_f1=blob["val_f1"],
            train_f1=blob["train_f1"],
            config_fingerprint=blob["config_fingerprint"],
            extra=blob.get("extra", {}),
        )

    def build_model(self) -> LeukemiaClassifier:
        # Weights come from the checkpoint; never hit the network for them.
        cfg = ModelConfig.from_dict(
            {**self.model_config.to_dict(), "pretrained": False}
        )
        model = LeukemiaClassifier(cfg)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model
