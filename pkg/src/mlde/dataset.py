"""Dataset manifests, the 7-class diagnosis taxonomy, and one-vs-rest task views.

A manifest is a UTF-8 CSV with header ``image_id,path,label``; ``path`` is
stored relative to the manifest file and ``label`` is one of the seven class
codes (may be empty for validation/test splits). The seven diagnosis classes
follow the ISIC 2018 convention and their order is fixed because it drives
the prediction CSV column order.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

from .errors import ManifestError

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("image_id", "path", "label")
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class DiagnosisClass:
    """One of the seven lesion diagnoses."""

    code: str
    display_name: str


CLASS_TAXONOMY: tuple[DiagnosisClass, ...] = (
    DiagnosisClass("MEL", "melanoma"),
    DiagnosisClass("NV", "melanocytic nevus"),
    DiagnosisClass("BCC", "basal cell carcinoma"),
    DiagnosisClass("AKIEC", "actinic keratosis"),
    DiagnosisClass("BKL", "benign keratosis"),
    DiagnosisClass("DF", "dermatofibroma"),
    DiagnosisClass("VASC", "vascular lesion"),
)

CLASS_CODES: tuple[str, ...] = tuple(c.code for c in CLASS_TAXONOMY)
_BY_CODE = {c.code: c for c in CLASS_TAXONOMY}


def class_taxonomy() -> tuple[DiagnosisClass, ...]:
    """Return the seven diagnosis classes in canonical order."""
    return CLASS_TAXONOMY


def class_by_code(code: str) -> DiagnosisClass:
    try:
        return _BY_CODE[code]
    except KeyError:
        raise ManifestError(f"unknown class code {code!r}; expected one of {CLASS_CODES}")


def class_index(target: DiagnosisClass) -> int:
    """Position of a class in the canonical order."""
    return CLASS_CODES.index(target.code)


class ManifestEntry(NamedTuple):
    image_id: str
    path: str
    label: Optional[DiagnosisClass]


@dataclass(frozen=True)
class DatasetManifest:
    """Validated, immutable view of one dataset split."""

    entries: tuple[ManifestEntry, ...]
    split: str
    source: Optional[str] = None  # manifest file location, used to resolve paths

    def __len__(self) -> int:
        return len(self.entries)

    def labeled_entries(self) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.label is not None)

    def label_counts(self) -> dict[str, int]:
        counts = {code: 0 for code in CLASS_CODES}
        for e in self.entries:
            if e.label is not None:
                counts[e.label.code] += 1
        return counts

    def root(self) -> Path:
        """Directory that entry paths are relative to."""
        return Path(self.source).parent if self.source else Path(".")


@dataclass(frozen=True)
class BinaryTaskEntry:
    image_id: str
    path: str
    binary_label: int


@dataclass(frozen=True)
class BinaryTaskView:
    """One-vs-rest relabeling of a manifest for a single target class."""

    target: DiagnosisClass
    entries: tuple[BinaryTaskEntry, ...]
    source: Optional[str] = None

    @property
    def n_positive(self) -> int:
        return sum(e.binary_label for e in self.entries)

    @property
    def n_negative(self) -> int:
        return len(self.entries) - self.n_positive

    @property
    def is_degenerate(self) -> bool:
        """True when AUC (and meaningful training) is undefined downstream."""
        return self.n_positive == 0 or self.n_negative == 0

    def root(self) -> Path:
        return Path(self.source).parent if self.source else Path(".")


def load_manifest(path: str | Path, split: str) -> DatasetManifest:
    """Load and validate a manifest CSV.

    Raises ManifestError on: missing file, empty file, bad header, duplicate
    image ids, unknown class codes, or train entries without a label.
    """
    if split not in SPLITS:
        raise ManifestError(f"unknown split {split!r}; expected one of {SPLITS}")
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]

    if not rows:
        raise ManifestError(f"empty manifest: {path}")
    header = tuple(cell.strip() for cell in rows[0])
    if header != MANIFEST_HEADER:
        raise ManifestError(
            f"bad manifest header {header!r}; expected {','.join(MANIFEST_HEADER)}"
        )
    if len(rows) == 1:
        raise ManifestError(f"empty manifest (header only): {path}")

    entries = []
    seen: set[str] = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        image_id, rel_path, label_code = (cell.strip() for cell in row)
        if not image_id:
            raise ManifestError(f"{path}:{lineno}: empty image_id")
        if image_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        if label_code:
            label = class_by_code(label_code)
        else:
            if split == "train":
                raise ManifestError(
                    f"{path}:{lineno}: train entry {image_id!r} has no label"
                )
            label = None
        entries.append(ManifestEntry(image_id, rel_path, label))

    manifest = DatasetManifest(entries=tuple(entries), split=split, source=str(path))
    labeled = len(manifest.labeled_entries())
    log.info(
        "loaded %s manifest %s: %d entries, %d labeled",
        split, path, len(manifest), labeled,
    )
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest back to CSV in the documented format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            writer.writerow([e.image_id, e.path, e.label.code if e.label else ""])


def derive_binary_task(manifest: DatasetManifest, target: DiagnosisClass) -> BinaryTaskView:
    """One-vs-rest view of the labeled entries: 1 iff the label equals target.

    Degenerate tasks (0 or all positives) are allowed through with a warning;
    AUC is undefined for them downstream.
    """
    labeled = manifest.labeled_entries()
    if not labeled:
        raise ManifestError("cannot derive a binary task: manifest has no labeled entries")
    entries = tuple(
        BinaryTaskEntry(e.image_id, e.path, int(e.label == target)) for e in labeled
    )
    view = BinaryTaskView(target=target, entries=entries, source=manifest.source)
    if view.is_degenerate:
        log.warning(
            "degenerate binary task for %s: %d positives / %d negatives",
            target.code, view.n_positive, view.n_negative,
        )
    return view
