from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from leukattn.ingest import DatasetManifest, ImageRecord, Label
from leukattn.synthetic import generate_dataset


def make_manifest(n_all: int, n_hem: int, images_per_patient=3, prefix="/data") -> DatasetManifest:
    """Manifest of fake paths; enough for split/balance logic that never opens files."""
    records = []
    for label, n, tag in ((Label.ALL, n_all, "A"), (Label.HEM, n_hem, "H")):
        for i in range(n):
            pid = f"{tag}{i:03d}"
            k = images_per_patient(label, i) if callable(images_per_patient) else images_per_patient
            for j in range(k):
                rel = f"{tag.lower()}/{pid}_{j}.png"
                records.append(ImageRecord(rel, f"{prefix}/{rel}", pid, label))
    return DatasetManifest.from_records(records)


@pytest.fixture
def four_file_tree(tmp_path):
    """2 ALL images from patient 1, 2 HEM images from patient H2."""
    rng = np.random.default_rng(0)
    for rel in ("all/UID_1_1_1_all.png", "all/UID_1_2_1_all.png",
                "hem/UID_H2_1_1_hem.png", "hem/UID_H2_2_1_hem.png"):
        p = tmp_path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rng.integers(0, 255, (8, 8, 3), dtype=np.uint8)).save(p)
    return tmp_path


@pytest.fixture(scope="session")
def smoke_dataset(tmp_path_factory):
    """~600 synthetic 64x64 images: 14 ALL patients x 25, 12 HEM patients x 21."""
    root = tmp_path_factory.mktemp("synth")
    return generate_dataset(root, n_all=14, n_hem=12, images_per_patient=25,
                            hem_images_per_patient=21, size=64, seed=0)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config._acceptance_lines

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
