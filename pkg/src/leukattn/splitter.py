"""Patient-wise Training/Validation/Test partitions.

Splits are always made over patients, never over images, so that no subject
contributes images to more than one partition. Per-class patient counts are
hit exactly (stratification by patient label).
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ingest import DatasetManifest, ImageRecord, Label

log = logging.getLogger(__name__)


class Split(str, enum.Enum):
    TRAINING = "Training"
    VALIDATION = "Validation"
    TEST = "Test"


SPLITS = (Split.TRAINING, Split.VALIDATION, Split.TEST)


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ClassCounts:
    all: int
    hem: int

    def of(self, label: Label) -> int:
        return self.all if label is Label.ALL else self.hem


# Patient counts per split, (ALL, HEM), of the reference protocol.
DEFAULT_TARGETS: dict[Split, ClassCounts] = {
    Split.TRAINING: ClassCounts(48, 32),
    Split.VALIDATION: ClassCounts(6, 4),
    Split.TEST: ClassCounts(6, 5),
}


def targets_from_dict(d: Mapping[str, Sequence[int]]) -> dict[Split, ClassCounts]:
    """``{"Training": [48, 32], ...}`` -> targets; order inside is (ALL, HEM)."""
    out = {}
    for split in SPLITS:
        if split.value not in d:
            raise SplitError(f"targets missing split {split.value!r}")
        a, h = d[split.value]
        out[split] = ClassCounts(int(a), int(h))
    return out


def targets_to_dict(t: Mapping[Split, ClassCounts]) -> dict[str, list[int]]:
    return {s.value: [t[s].all, t[s].hem] for s in SPLITS}


def proportional_targets(
    manifest: DatasetManifest, proportions: Sequence[float]
) -> dict[Split, ClassCounts]:
    """Per-class largest-remainder allocation with at least one patient per split."""
    props = np.asarray(proportions, dtype=float)
    if props.shape != (3,) or (props <= 0).any():
        raise SplitError(f"need three positive proportions, got {proportions!r}")
    props = props / props.sum()
    per_class = {}
    for label in (Label.ALL, Label.HEM):
        n = len(manifest.patients_of(label))
        if n < 3:
            raise SplitError(f"class {label.name} has {n} patients; need >= 3")
        raw = props * n
        counts = np.maximum(np.floor(raw).astype(int), 1)
        while counts.sum() < n:
            counts[np.argmax(raw - counts)] += 1
        while counts.sum() > n:
            over = np.where(counts > 1, counts - raw, -np.inf)
            counts[np.argmax(over)] -= 1
        per_class[label] = counts
    return {
        s: ClassCounts(int(per_class[Label.ALL][i]), int(per_class[Label.HEM][i]))
        for i, s in enumerate(SPLITS)
    }


@dataclass(frozen=True)
class SplitAssignment:
    assignment: Mapping[str, Split]
    seed: int | None = None

    def patients(self, split: Split) -> set[str]:
        return {p for p, s in self.assignment.items() if s is split}

    def counts(self, manifest: DatasetManifest) -> dict[Split, dict[str, ClassCounts]]:
        """Patient and image counts per split and class, from the manifest."""
        pat = {s: {Label.ALL: 0, Label.HEM: 0} for s in SPLITS}
        img = {s: {Label.ALL: 0, Label.HEM: 0} for s in SPLITS}
        for p, info in manifest.patients.items():
            s = self.assignment[p]
            pat[s][info.label] += 1
            img[s][info.label] += info.image_count
        return {
            s: {
                "patients": ClassCounts(pat[s][Label.ALL], pat[s][Label.HEM]),
                "images": ClassCounts(img[s][Label.ALL], img[s][Label.HEM]),
            }
            for s in SPLITS
        }


def check_split(split: SplitAssignment, manifest: DatasetManifest) -> None:
    """Assert partition, no leakage and both classes in every split."""
    missing = set(manifest.patients) - set(split.assignment)
    if missing:
        raise SplitError(f"unassigned patient(s): {sorted(missing)[:5]}")
    sets = [split.patients(s) for s in SPLITS]
    for i in range(3):
        for j in range(i + 1, 3):
            if sets[i] & sets[j]:
                raise SplitError(f"patient leakage between {SPLITS[i]} and {SPLITS[j]}")
    for s, patients in zip(SPLITS, sets):
        labels = {manifest.patients[p].label for p in patients if p in manifest.patients}
        if labels != {Label.ALL, Label.HEM}:
            raise SplitError(f"{s.value} lacks a class: has {sorted(l.name for l in labels)}")


def _check_targets(manifest: DatasetManifest, targets: Mapping[Split, ClassCounts]) -> None:
    for label in (Label.ALL, Label.HEM):
        have = len(manifest.patients_of(label))
        want = sum(targets[s].of(label) for s in SPLITS)
        if want != have:
            deficit = want - have
            raise SplitError(
                f"infeasible targets for class {label.name}: targets sum to {want} "
                f"but manifest has {have} patients (deficit {deficit:+d})"
            )
        for s in SPLITS:
            if targets[s].of(label) < 1:
                raise SplitError(f"target for {label.name} in {s.value} must be >= 1")


def random_resplit(
    manifest: DatasetManifest,
    targets: Mapping[Split, ClassCounts] = DEFAULT_TARGETS,
    seed: int = 0,
) -> SplitAssignment:
    """Stratified random patient assignment hitting ``targets`` exactly.

    Patients of each class are sorted by id, then permuted by a stream seeded
    only by ``seed``, so the result is reproducible across platforms.
    """
    _check_targets(manifest, targets)
    rng = np.random.default_rng(seed)
    assignment: dict[str, Split] = {}
    for label in (Label.ALL, Label.HEM):
        patients = manifest.patients_of(label)
        order = rng.permutation(len(patients))
        start = 0
        for s in SPLITS:
            n = targets[s].of(label)
            for k in order[start : start + n]:
                assignment[patients[k]] = s
            start += n
    return SplitAssignment(dict(sorted(assignment.items())), seed)


def fixed_split(
    manifest: DatasetManifest,
    targets: Mapping[Split, ClassCounts] = DEFAULT_TARGETS,
    seed: int = 42,
) -> SplitAssignment:
    """The single reference split used for training, ablation and the test report."""
    split = random_resplit(manifest, targets, seed)
    check_split(split, manifest)
    return split


def materialize(
    manifest: DatasetManifest, split: SplitAssignment
) -> tuple[list[ImageRecord], list[ImageRecord], list[ImageRecord]]:
    """Route every record to its patient's split.

    Replica records routed to Validation or Test are dropped with a warning;
    evaluation only ever sees original images.
    """
    routed: dict[Split, list[ImageRecord]] = {s: [] for s in SPLITS}
    dropped = 0
    for r in manifest.records:
        try:
            s = split.assignment[r.patient_id]
        except KeyError:
            raise SplitError(f"patient {r.patient_id!r} has no split assignment") from None
        if s is not Split.TRAINING and not r.is_original:
            dropped += 1
            continue
        routed[s].append(r)
    if dropped:
        log.warning("dropped %d replica record(s) from evaluation splits", dropped)
    return routed[Split.TRAINING], routed[Split.VALIDATION], routed[Split.TEST]


def write_split(split: SplitAssignment, out: str | Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# seed={split.seed}", "patient_id\tsplit"]
    lines += [f"{p}\t{s.value}" for p, s in sorted(split.assignment.items())]
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def read_split(path: str | Path) -> SplitAssignment:
    path = Path(path)
    seed = None
    assignment: dict[str, Split] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if line.startswith("# seed="):
            value = line.split("=", 1)[1].strip()
            seed = None if value == "None" else int(value)
            continue
        if not line or line.startswith("#") or line == "patient_id\tsplit":
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise SplitError(f"{path}:{lineno}: malformed row {line!r}")
        patient, name = parts
        if patient in assignment:
            raise SplitError(f"{path}:{lineno}: patient {patient!r} listed twice")
        try:
            assignment[patient] = Split(name)
        except ValueError:
            raise SplitError(f"{path}:{lineno}: unknown split {name!r}") from None
    return SplitAssignment(assignment, seed)
