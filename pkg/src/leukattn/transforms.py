"""Image preprocessing, training-time augmentation and minority balancing."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset

from .ingest import ImageRecord, Label, Source

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
INPUT_SIZE = 384


class ImageLoadError(ValueError):
    pass


def load_rgb(path: str | Path) -> torch.Tensor:
    """Decode an image file into a 3xHxW float tensor in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA", "P"):
                raise ImageLoadError(
                    f"{path}: expected a colour image, got mode {im.mode!r}"
                )
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(f"cannot decode image {path}: {exc}") from None
    return to_tensor(arr)


def to_tensor(arr: np.ndarray) -> torch.Tensor:
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageLoadError(f"expected HxWx3 array, got shape {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)
    if t.dtype == torch.uint8:
        return t.float().div_(255.0)
    return t.float()


def resize(image: torch.Tensor, size: int = INPUT_SIZE) -> torch.Tensor:
    """Bilinear resize (half-pixel centres, no antialiasing) to size x size."""
    if image.shape[-2:] == (size, size):
        return image
    out = F.interpolate(
        image.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
    )
    return out.squeeze(0)


def normalize(image: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(IMAGENET_MEAN, dtype=image.dtype).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=image.dtype).view(3, 1, 1)
    return (image - mean) / std


def preprocess(raw, size: int = INPUT_SIZE) -> torch.Tensor:
    """Deterministic path: decode (if needed), resize, normalise.

    ``raw`` may be a path, a PIL image, an HxWx3 uint8 array or a 3xHxW
    float tensor in [0, 1].
    """
    if isinstance(raw, (str, Path)):
        image = load_rgb(raw)
    elif isinstance(raw, Image.Image):
        if raw.mode not in ("RGB", "RGBA", "P"):
            raise ImageLoadError(f"expected a colour image, got mode {raw.mode!r}")
        image = to_tensor(np.asarray(raw.convert("RGB")))
    elif isinstance(raw, np.ndarray):
        image = to_tensor(raw)
    else:
        image = raw
    if image.ndim != 3 or image.shape[0] != 3:
        raise ImageLoadError(f"expected 3 channels, got shape {tuple(image.shape)}")
    return normalize(resize(image, size))


@dataclass(frozen=True)
class AugmentPolicy:
    hflip_prob: float = 0.5
    rotation_range_deg: float = 10.0
    brightness_jitter: float = 0.1
    contrast_jitter: float = 0.1
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")
        for name in ("rotation_range_deg", "brightness_jitter", "contrast_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.brightness_jitter > 1 or self.contrast_jitter > 1:
            raise ValueError("jitter magnitudes above 1 would allow negative factors")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    angle: float
    brightness: float
    contrast: float


def sample_params(policy: AugmentPolicy, rng: np.random.Generator) -> AugmentParams:
    # Always draw all four values so the stream position is policy-independent.
    u_flip, u_rot, u_b, u_c = rng.random(4)
    r, b, c = policy.rotation_range_deg, policy.brightness_jitter, policy.contrast_jitter
    return AugmentParams(
        flip=bool(u_flip < policy.hflip_prob),
        angle=float(-r + 2 * r * u_rot),
        brightness=float(1 - b + 2 * b * u_b),
        contrast=float(1 - c + 2 * c * u_c),
    )


def hflip(image: torch.Tensor) -> torch.Tensor:
    return image.flip(-1)


def apply_params(image: torch.Tensor, p: AugmentParams) -> torch.Tensor:
    """Flip, rotate (black fill), then brightness and contrast, on [0, 1] pixels."""
    if p.flip:
        image = hflip(image)
    if p.angle != 0.0:
        image = TF.rotate(
            image, p.angle, interpolation=TF.InterpolationMode.BILINEAR, fill=[0.0]
        )
    if p.brightness != 1.0:
        image = TF.adjust_brightness(image, p.brightness)
    if p.contrast != 1.0:
        image = TF.adjust_contrast(image, p.contrast)
    return image


def augment(
    image: torch.Tensor, policy: AugmentPolicy, rng: np.random.Generator
) -> torch.Tensor:
    """Random flip -> rotation -> brightness/contrast jitter.

    ``image`` holds un-normalised [0, 1] intensities (3xHxW). Same rng state
    gives bit-identical output.
    """
    return apply_params(image, sample_params(policy, rng))


def derive_rng(global_seed: int, image_id: str, replica_index: int, epoch: int = 0) -> np.random.Generator:
    """Independent stream per (seed, image, replica, epoch); schedule-independent."""
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng([global_seed, key, replica_index, epoch])


def balance_minority(records: Sequence[ImageRecord]) -> list[ImageRecord]:
    """Replicate minority-class records until both classes have equal counts.

    Each minority image keeps its original record and gains
    ``majority // minority - 1`` replicas, and the first
    ``majority % minority`` images (in input order) get one more, so
    per-image appearance counts differ by at most one. Replicas carry a
    distinct ``replica_index`` (>= 1) that keys their augmentation stream.
    """
    by_label = {lab: [r for r in records if r.label is lab] for lab in Label}
    if not by_label[Label.ALL] or not by_label[Label.HEM]:
        raise ValueError("balance_minority needs records of both classes")
    if any(not r.is_original for r in records):
        raise ValueError("balance_minority expects original records only")
    minority_label = min(Label, key=lambda lab: (len(by_label[lab]), lab))
    minority = by_label[minority_label]
    target = len(by_label[Label(1 - minority_label)])
    if len(minority) == target:
        return list(records)
    per_image, extra = divmod(target, len(minority))
    replicas = []
    for i, rec in enumerate(minority):
        copies = per_image + (1 if i < extra else 0)
        for k in range(1, copies):
            replicas.append(
                replace(
                    rec,
                    image_id=f"{rec.image_id}#r{k}",
                    source=Source.REPLICA,
                    replica_index=k,
                )
            )
    return list(records) + replicas


class CellImageDataset(Dataset):
    """Records -> (normalised image tensor, label, index).

    With ``train=False`` only the deterministic path runs. With
    ``train=True`` augmentation is applied to replica records, and to all
    records when ``augment_all`` is set. Decoded, resized images can be kept
    in memory with ``cache=True`` (cheap for desk-scale runs).
    """

    def __init__(
        self,
        records: Sequence[ImageRecord],
        size: int = INPUT_SIZE,
        train: bool = False,
        policy: AugmentPolicy | None = None,
        augment_all: bool = False,
        cache: bool = False,
        loader: Callable[[str], torch.Tensor] = load_rgb,
    ):
        self.records = list(records)
        self.size = size
        self.train = train
        self.policy = policy or AugmentPolicy()
        self.augment_all = augment_all
        self.loader = loader
        self.epoch = 0
        self._cache: dict[str, torch.Tensor] | None = {} if cache else None
        self.labels = torch.tensor([int(r.label) for r in self.records], dtype=torch.long)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def _base(self, rec: ImageRecord) -> torch.Tensor:
        if self._cache is not None and rec.path in self._cache:
            return self._cache[rec.path]
        image = resize(self.loader(rec.path), self.size)
        if self._cache is not None:
            self._cache[rec.path] = image
        return image

    def wants_augment(self, rec: ImageRecord) -> bool:
        return self.train and (self.augment_all or not rec.is_original)

    def __getitem__(self, index: int):
        rec = self.records[index]
        image = self._base(rec)
        if self.wants_augment(rec):
            rng = derive_rng(self.policy.rng_seed, rec.image_id, rec.replica_index, self.epoch)
            image = augment(image, self.policy, rng)
        return normalize(image), int(rec.label), index
