"""Dataset discovery and the on-disk manifest format.

A manifest is the single source of truth for which image belongs to which
patient and class. Everything downstream (splitting, balancing, training)
operates on manifests, never on directory walks.
"""

from __future__ import annotations

import csv
import enum
import re
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

IMAGE_EXTENSIONS = (".bmp", ".png", ".jpg", ".jpeg", ".tif", ".tiff")
MANIFEST_HEADER = ("image_id", "path", "patient_id", "label", "source")


class Label(enum.IntEnum):
    HEM = 0
    ALL = 1


class Source(str, enum.Enum):
    ORIGINAL = "original"
    REPLICA = "augmented-replica"


class ManifestError(ValueError):
    """Raised when a manifest (or the tree it was scanned from) is inconsistent."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    patient_id: str
    label: Label
    source: Source = Source.ORIGINAL
    replica_index: int = 0

    @property
    def is_original(self) -> bool:
        return self.source is Source.ORIGINAL


@dataclass(frozen=True)
class PatientInfo:
    label: Label
    image_count: int


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    patients: Mapping[str, PatientInfo] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = Counter(r.image_id for r in self.records)
        dup = sorted(i for i, n in ids.items() if n > 1)
        if dup:
            raise ManifestError(f"duplicate image_id(s): {dup[:5]}")
        paths = Counter(r.path for r in self.records if r.is_original)
        dup = sorted(p for p, n in paths.items() if n > 1)
        if dup:
            raise ManifestError(f"duplicate path(s): {dup[:5]}")
        derived = _patients_of(self.records)
        if self.patients and dict(self.patients) != derived:
            raise ManifestError("patients table disagrees with records")
        object.__setattr__(self, "patients", derived)

    @classmethod
    def from_records(cls, records: Iterable[ImageRecord]) -> "DatasetManifest":
        return cls(tuple(sorted(records, key=lambda r: (r.path, r.image_id))))

    def __len__(self) -> int:
        return len(self.records)

    def patients_of(self, label: Label) -> list[str]:
        return sorted(p for p, info in self.patients.items() if info.label is label)


def _patients_of(records: Sequence[ImageRecord]) -> dict[str, PatientInfo]:
    labels: dict[str, set[Label]] = defaultdict(set)
    counts: Counter[str] = Counter()
    for r in records:
        labels[r.patient_id].add(r.label)
        counts[r.patient_id] += 1
    conflicts = sorted(p for p, ls in labels.items() if len(ls) > 1)
    if conflicts:
        raise ManifestError(f"patient(s) with conflicting labels: {conflicts}")
    return {p: PatientInfo(next(iter(labels[p])), counts[p]) for p in sorted(labels)}


@dataclass(frozen=True)
class NamingRule:
    """How patient id and class label are recovered from an image path.

    ``pattern`` is matched (``re.search``) against the path relative to the
    dataset root, using forward slashes. It must define the named groups
    ``patient`` and ``label``; the captured label text is looked up
    case-insensitively in ``label_map``.

    ``alias_tables`` handles datasets whose files were renamed (the C-NMC
    preliminary-test folder stores ``1.bmp`` .. ``1867.bmp`` next to a CSV that
    maps each new name back to the original ``UID_...`` name). Each entry is a
    CSV path relative to the root; rows map ``alias_column`` (a file name) to
    ``original_column`` and the pattern is applied to the original name.
    """

    pattern: str = r"UID_(?P<patient>H?\d+)_\d+_\d+_(?P<label>all|hem)\.[A-Za-z]+$"
    label_map: Mapping[str, str] = field(
        default_factory=lambda: {"all": "ALL", "hem": "HEM"}
    )
    extensions: tuple[str, ...] = IMAGE_EXTENSIONS
    alias_tables: tuple[str, ...] = ()
    alias_column: str = "new_names"
    original_column: str = "Patient_ID"

    def compiled(self) -> re.Pattern[str]:
        rx = re.compile(self.pattern, re.IGNORECASE)
        missing = {"patient", "label"} - set(rx.groupindex)
        if missing:
            raise ValueError(f"naming pattern lacks group(s) {sorted(missing)}")
        return rx

    @classmethod
    def from_dict(cls, d: Mapping) -> "NamingRule":
        d = dict(d)
        for key in ("extensions", "alias_tables"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "pattern": self.pattern,
            "label_map": dict(self.label_map),
            "extensions": list(self.extensions),
            "alias_tables": list(self.alias_tables),
            "alias_column": self.alias_column,
            "original_column": self.original_column,
        }


def _load_aliases(root: Path, rule: NamingRule) -> dict[str, str]:
    aliases: dict[str, str] = {}
    for table in rule.alias_tables:
        table_path = root / table
        base = Path(table).parent
        with open(table_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rel = (base / row[rule.alias_column].strip()).as_posix()
                aliases[rel] = row[rule.original_column].strip()
    return aliases


def _list_images(directory: Path, extensions: tuple[str, ...]) -> list[Path]:
    return [
        p
        for p in directory.rglob("*")
        if p.is_file() and p.suffix.lower() in extensions
    ]


def scan_dataset(
    root: str | Path, rule: NamingRule | None = None, workers: int = 1
) -> DatasetManifest:
    """Walk ``root`` and build a manifest of every labelled image.

    Top-level subdirectories are listed in parallel when ``workers > 1``; the
    result is sorted by path so it never depends on scan order.
    """
    rule = rule or NamingRule()
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    rx = rule.compiled()
    label_map = {k.lower(): Label[v] for k, v in rule.label_map.items()}
    aliases = _load_aliases(root, rule)
    exts = tuple(e.lower() for e in rule.extensions)

    top = sorted(root.iterdir())
    files = [p for p in top if p.is_file() and p.suffix.lower() in exts]
    subdirs = [p for p in top if p.is_dir()]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for found in pool.map(lambda d: _list_images(d, exts), subdirs):
            files.extend(found)
    if not files:
        raise ManifestError(f"no images found under {root}")

    records, bad = [], []
    for path in sorted(files):
        rel = path.relative_to(root).as_posix()
        name = aliases.get(rel, rel)
        m = rx.search(name)
        label_text = m.group("label").lower() if m else None
        if m is None or label_text not in label_map:
            bad.append(rel)
            continue
        records.append(
            ImageRecord(
                image_id=rel,
                path=str(path.resolve()),
                patient_id=m.group("patient"),
                label=label_map[label_text],
            )
        )
    if bad:
        shown = "\n  ".join(bad[:20])
        more = f"\n  ... and {len(bad) - 20} more" if len(bad) > 20 else ""
        raise ManifestError(
            f"{len(bad)} image(s) do not match the naming rule:\n  {shown}{more}"
        )
    return DatasetManifest.from_records(records)


@dataclass(frozen=True)
class ClassSummary:
    patients: int
    images: int


def summarize(manifest: DatasetManifest) -> dict[str, ClassSummary]:
    """Per-class patient and image counts (originals and replicas alike)."""
    images = Counter(r.label for r in manifest.records)
    patients = Counter(info.label for info in manifest.patients.values())
    return {
        label.name: ClassSummary(patients[label], images[label])
        for label in (Label.ALL, Label.HEM)
    }


def write_manifest(manifest: DatasetManifest, out: str | Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_HEADER + ("replica_index",))
        for r in manifest.records:
            w.writerow(
                [r.image_id, r.path, r.patient_id, r.label.name, r.source.value,
                 r.replica_index]
            )
    return out


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    records: list[ImageRecord] = []
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header[:5]) != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: bad header {header!r}")
        has_replica = len(header) > 5
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ManifestError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            image_id, p, patient, label, source = row[:5]
            if image_id in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate image_id {image_id!r} "
                    f"(first on line {seen[image_id]})"
                )
            seen[image_id] = lineno
            try:
                rec = ImageRecord(
                    image_id=image_id,
                    path=p,
                    patient_id=patient,
                    label=Label[label],
                    source=Source(source),
                    replica_index=int(row[5]) if has_replica else 0,
                )
            except (KeyError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            records.append(rec)
    return DatasetManifest(tuple(records))
