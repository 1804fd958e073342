"""Synthetic multiscale dataset for desk-scale verification.

The generator injects class-discriminative signal at controlled spatial
scales so that the value of the small-scale ROI branches is observable in a
few CPU minutes:

* fine-scale classes (MEL, BCC, AKIEC, DF): a center blob whose color
  identifies the class, surrounded by same-sized distractor disks scattered
  strictly outside the smallest center crop. Every image carries exactly the
  same number of disks of each palette color (the class blob replaces one of
  its color's distractors), so translation-invariant color statistics carry
  no class signal at all; the only fine-class cue is which color sits at the
  center, and only the small-scale crops isolate it.
* coarse-scale classes (NV, BKL, VASC): a global channel tint that survives
  every crop and resize, plus a neutral center blob so blob presence alone
  carries no class information.

Given the same seed and count, generated files are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import (
    CLASS_CODES,
    DatasetManifest,
    ManifestEntry,
    class_by_code,
    write_manifest,
)
from .errors import DataError
from .imaging import DEFAULT_SCALES, bilinear_resize

IMAGE_SIZE = 320
MIN_IMAGES = 14  # at least one train and one test image per class

BLOB_RADIUS = 12.0
BLOB_CENTER_JITTER = 8.0
DISTRACTOR_RADIUS = BLOB_RADIUS  # equal sizes keep per-color area class-neutral
DISKS_PER_COLOR = 3
DISTRACTOR_DIST_MIN = 82.0
DISTRACTOR_DIST_MAX = 145.0

FINE_CODES = ("MEL", "BCC", "AKIEC", "DF")
COARSE_CODES = ("NV", "BKL", "VASC")

BLOB_COLORS = {
    "MEL": (0.05, 0.05, 0.05),
    "BCC": (0.95, 0.05, 0.05),
    "AKIEC": (0.05, 0.20, 0.95),
    "DF": (0.05, 0.85, 0.10),
}
NEUTRAL_BLOB_COLOR = (0.47, 0.40, 0.36)
TINT_DELTAS = {
    "NV": (0.11, -0.05, -0.05),
    "BKL": (-0.05, 0.11, -0.05),
    "VASC": (-0.04, -0.04, 0.12),
}
BASE_SKIN = (0.72, 0.60, 0.55)
BASE_JITTER = 0.03
FIELD_AMPLITUDE = 0.03
FIELD_CELLS = 8

TEST_FRACTION = 0.2


def geometry_report(image_size: int = IMAGE_SIZE, scales=DEFAULT_SCALES) -> dict:
    """Margins (in pixels) proving the scale separation of the generator.

    blob_margin: distance from the farthest possible blob pixel to the edge
    of the smallest center crop (positive = blob always fully inside).
    distractor_margin: distance from the nearest possible distractor pixel to
    the same crop edge (positive = distractors never inside).
    """
    crop_side = int(np.floor(scales[-1] * image_size))
    half = crop_side // 2
    blob_extent = BLOB_CENTER_JITTER + BLOB_RADIUS + 1.0  # +1 for the soft edge
    nearest_distractor = DISTRACTOR_DIST_MIN - DISTRACTOR_RADIUS - 1.0
    return {
        "smallest_crop_side": crop_side,
        "smallest_crop_half_side": half,
        "blob_extent": blob_extent,
        "blob_margin": half - blob_extent,
        "nearest_distractor": nearest_distractor,
        "distractor_margin": nearest_distractor - half,
    }


def _paint_disk(img: np.ndarray, cy: float, cx: float, radius: float, color) -> None:
    """Alpha-blend an antialiased disk in place."""
    size = img.shape[0]
    lo_y = max(0, int(np.floor(cy - radius - 1)))
    hi_y = min(size, int(np.ceil(cy + radius + 2)))
    lo_x = max(0, int(np.floor(cx - radius - 1)))
    hi_x = min(size, int(np.ceil(cx + radius + 2)))
    if lo_y >= hi_y or lo_x >= hi_x:
        return
    yy, xx = np.mgrid[lo_y:hi_y, lo_x:hi_x]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    mask = np.clip(radius + 0.5 - dist, 0.0, 1.0)[:, :, None]
    patch = img[lo_y:hi_y, lo_x:hi_x, :]
    patch[:] = patch * (1.0 - mask) + np.asarray(color, dtype=np.float64) * mask


def render_image(class_code: str, rng: np.random.Generator,
                 image_size: int = IMAGE_SIZE) -> np.ndarray:
    """One synthetic image for the given class, float32 in [0, 1]."""
    if class_code not in CLASS_CODES:
        raise DataError(f"unknown class code {class_code!r}")
    base = np.asarray(BASE_SKIN) + rng.uniform(-BASE_JITTER, BASE_JITTER, size=3)
    img = np.broadcast_to(base, (image_size, image_size, 3)).astype(np.float64).copy()
    field = rng.uniform(-FIELD_AMPLITUDE, FIELD_AMPLITUDE,
                        size=(FIELD_CELLS, FIELD_CELLS, 3)).astype(np.float32)
    img += bilinear_resize(field, image_size, image_size)

    if class_code in COARSE_CODES:
        img += np.asarray(TINT_DELTAS[class_code])

    # Every image shows exactly DISKS_PER_COLOR disks of each palette color.
    # A fine-class image spends one of its own color's copies on the center
    # blob, so per-color counts and areas are identical across all classes.
    distractors: list[tuple[float, float, float]] = []
    for code in FINE_CODES:
        copies = DISKS_PER_COLOR - (1 if code == class_code else 0)
        distractors.extend([BLOB_COLORS[code]] * copies)
    order = rng.permutation(len(distractors))

    center = image_size / 2.0
    for i in order:
        dist = rng.uniform(DISTRACTOR_DIST_MIN, DISTRACTOR_DIST_MAX)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        _paint_disk(img, center + dist * np.sin(angle),
                    center + dist * np.cos(angle), DISTRACTOR_RADIUS,
                    distractors[i])

    blob_color = (BLOB_COLORS[class_code] if class_code in FINE_CODES
                  else NEUTRAL_BLOB_COLOR)
    cy, cx = center + rng.uniform(-BLOB_CENTER_JITTER, BLOB_CENTER_JITTER, size=2)
    _paint_disk(img, cy, cx, BLOB_RADIUS, blob_color)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class SynthResult:
    out_dir: Path
    train_manifest: Path
    test_manifest: Path
    meta_path: Path
    n_train: int
    n_test: int


def generate_dataset(out_dir: str | Path, n_images: int, seed: int,
                     image_size: int = IMAGE_SIZE) -> SynthResult:
    """Render n_images PNGs (classes assigned round-robin in canonical order)
    and write train/test manifests with a roughly 80/20 per-class split.
    """
    if n_images < MIN_IMAGES:
        raise DataError(f"need at least {MIN_IMAGES} images "
                        f"(one per class per split), got {n_images}")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {image_dir}: {exc}") from exc

    rng = np.random.default_rng(seed)
    by_class: dict[str, list[ManifestEntry]] = {code: [] for code in CLASS_CODES}
    for i in range(n_images):
        code = CLASS_CODES[i % len(CLASS_CODES)]
        image_id = f"SYN_{i:06d}"
        rel_path = f"images/{image_id}.png"
        img = render_image(code, rng, image_size)
        raw = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(raw).save(out_dir / rel_path)
        by_class[code].append(ManifestEntry(image_id, rel_path, class_by_code(code)))

    train_entries: list[ManifestEntry] = []
    test_entries: list[ManifestEntry] = []
    for code in CLASS_CODES:
        entries = by_class[code]
        n_test = max(1, round(TEST_FRACTION * len(entries)))
        train_entries.extend(entries[:-n_test])
        test_entries.extend(entries[-n_test:])
    train_entries.sort(key=lambda e: e.image_id)
    test_entries.sort(key=lambda e: e.image_id)

    train_path = out_dir / "train.csv"
    test_path = out_dir / "test.csv"
    write_manifest(DatasetManifest(tuple(train_entries), "train"), train_path)
    write_manifest(DatasetManifest(tuple(test_entries), "test"), test_path)

    meta = {
        "seed": seed,
        "n_images": n_images,
        "image_size": image_size,
        "n_train": len(train_entries),
        "n_test": len(test_entries),
        "fine_classes": FINE_CODES,
        "coarse_classes": COARSE_CODES,
        "blob_radius": BLOB_RADIUS,
        "blob_center_jitter": BLOB_CENTER_JITTER,
        "distractor_radius": DISTRACTOR_RADIUS,
        "disks_per_color": DISKS_PER_COLOR,
        "distractor_distance": [DISTRACTOR_DIST_MIN, DISTRACTOR_DIST_MAX],
        "blob_colors": BLOB_COLORS,
        "tint_deltas": TINT_DELTAS,
        "geometry": geometry_report(image_size),
    }
    meta_path = out_dir / "synth_meta.json"
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)

    return SynthResult(out_dir=out_dir, train_manifest=train_path,
                       test_manifest=test_path, meta_path=meta_path,
                       n_train=len(train_entries), n_test=len(test_entries))
