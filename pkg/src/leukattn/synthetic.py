"""Synthetic stand-in for C-NMC style single-cell images.

Each image is a centred cell on a black background. ALL cells have a large
nucleus (high nucleus-to-cytoplasm ratio), HEM cells a small one, which keeps
the two classes separable for desk-scale smoke runs. Files follow the default
naming rule, e.g. ``all/UID_3_7_1_all.png`` and ``hem/UID_H2_5_1_hem.png``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def render_cell(rng: np.random.Generator, malignant: bool, size: int = 64,
                stain_shift: np.ndarray | None = None) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = size / 2 + rng.uniform(-2, 2, size=2)
    r_cell = size * rng.uniform(0.33, 0.40)
    ratio = rng.uniform(0.78, 0.9) if malignant else rng.uniform(0.4, 0.55)
    r_nuc = r_cell * ratio
    ncx, ncy = cx + rng.uniform(-1, 1), cy + rng.uniform(-1, 1)
    d_cell = np.hypot(xx - cx, yy - cy)
    d_nuc = np.hypot(xx - ncx, yy - ncy)

    shift = np.zeros(3) if stain_shift is None else stain_shift
    cytoplasm = np.array([0.78, 0.62, 0.82]) + shift
    nucleus = np.array([0.38, 0.18, 0.58]) + shift
    img = np.zeros((size, size, 3))
    img[d_cell <= r_cell] = cytoplasm
    img[d_nuc <= r_nuc] = nucleus
    inside = d_cell <= r_cell
    img[inside] += rng.normal(0.0, 0.04, size=(int(inside.sum()), 3))
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def generate_dataset(
    root: str | Path,
    n_all: int = 6,
    n_hem: int = 4,
    images_per_patient: int = 10,
    size: int = 64,
    seed: int = 0,
    hem_images_per_patient: int | None = None,
) -> Path:
    """Write ``n_all + n_hem`` patients worth of PNGs under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    hem_n = images_per_patient if hem_images_per_patient is None else hem_images_per_patient
    specs = [(str(i + 1), True, images_per_patient) for i in range(n_all)]
    specs += [(f"H{i + 1}", False, hem_n) for i in range(n_hem)]
    for pid, malignant, count in specs:
        folder = root / ("all" if malignant else "hem")
        folder.mkdir(parents=True, exist_ok=True)
        stain = rng.normal(0.0, 0.03, size=3)
        tag = "all" if malignant else "hem"
        for k in range(count):
            arr = render_cell(rng, malignant, size, stain)
            Image.fromarray(arr).save(folder / f"UID_{pid}_{k + 1}_1_{tag}.png")
    return root
