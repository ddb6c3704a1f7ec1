"""Image corpus loading, statistics and stratified splitting."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

CLASSES: Tuple[int, ...] = (-1, 0, 1)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class CorpusError(ValueError):
    """Raised for malformed datasets, label tables and corpora."""


@dataclass(frozen=True, eq=False)
class ImageSample:
    """One image: an ``H x W x 3`` uint8 grid plus an optional class label."""

    id: str
    pixels: np.ndarray
    label: Optional[int] = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise CorpusError(f"{self.id}: expected H x W x 3 pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise CorpusError(f"{self.id}: empty image {px.shape}")
        if px.dtype != np.uint8:
            if np.issubdtype(px.dtype, np.integer) and px.size and (px.min() < 0 or px.max() > 255):
                raise CorpusError(f"{self.id}: channel values outside [0, 255]")
            if not np.issubdtype(px.dtype, np.integer):
                raise CorpusError(f"{self.id}: pixels must be integers, got {px.dtype}")
            px = px.astype(np.uint8)
        elif px.flags.writeable:
            px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        if self.label is not None and self.label not in CLASSES:
            raise CorpusError(f"{self.id}: label {self.label} not in {CLASSES}")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def replace(self, **changes) -> "ImageSample":
        values = {"id": self.id, "pixels": self.pixels, "label": self.label}
        values.update(changes)
        return ImageSample(**values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class CorpusStats:
    max_height: int
    max_width: int
    class_counts: Dict[int, int] = field(default_factory=dict)
    total: int = 0
    min_height: int = 0
    min_width: int = 0

    @property
    def labeled(self) -> int:
        return sum(self.class_counts.values())

    def to_dict(self) -> dict:
        return {
            "max_height": self.max_height,
            "max_width": self.max_width,
            "min_height": self.min_height,
            "min_width": self.min_width,
            "total": self.total,
            "labeled": self.labeled,
            "class_counts": {str(c): n for c, n in sorted(self.class_counts.items())},
        }


@dataclass(frozen=True)
class SplitSpec:
    validation_fraction: float = 0.2
    seed: int = 0
    stratified: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.validation_fraction < 1.0:
            raise CorpusError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")


def _images_dir(root: Path) -> Path:
    sub = root / "images"
    return sub if sub.is_dir() else root


def read_image(path: Path) -> np.ndarray:
    """Decode ``path`` into an ``H x W x 3`` uint8 array; grayscale is channel-replicated."""
    with Image.open(path) as img:
        img.load()
        if img.mode in ("L", "I", "I;16", "1"):
            arr = np.asarray(img.convert("L"))
            return np.repeat(arr[:, :, None], 3, axis=2)
        return np.asarray(img.convert("RGB"))


def read_labels(labels_path: Path) -> Dict[str, int]:
    """Parse an ``id,label`` table with a header row."""
    labels: Dict[str, int] = {}
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return labels
        header = [h.strip() for h in header]
        if header[:2] != ["id", "label"]:
            raise CorpusError(f"{labels_path}: expected header 'id,label', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise CorpusError(f"{labels_path}:{lineno}: expected 'id,label', got {row!r}")
            sample_id, raw = row[0].strip(), row[1].strip()
            try:
                label = int(raw)
            except ValueError:
                raise CorpusError(f"{sample_id}: invalid label {raw!r}") from None
            if label not in CLASSES:
                raise CorpusError(f"{sample_id}: invalid label {label} (allowed {list(CLASSES)})")
            if sample_id in labels:
                raise CorpusError(f"{sample_id}: duplicate label row")
            labels[sample_id] = label
    return labels


def load_corpus(root_path, labels_path=None) -> List[ImageSample]:
    """Load every image under ``root_path`` (or ``root_path/images``).

    Samples are returned sorted by id (the file stem). Images without a row in
    ``labels_path`` come back unlabeled.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise CorpusError(f"dataset directory not found: {root}")
    image_dir = _images_dir(root)
    files: Dict[str, Path] = {}
    for path in sorted(image_dir.iterdir()):
        if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if path.stem in files:
            raise CorpusError(f"{path.stem}: duplicate image id ({files[path.stem].name}, {path.name})")
        files[path.stem] = path

    labels: Dict[str, int] = {}
    if labels_path is not None:
        labels_path = Path(labels_path)
        if not labels_path.is_file():
            raise CorpusError(f"labels table not found: {labels_path}")
        labels = read_labels(labels_path)
        missing = sorted(set(labels) - set(files))
        if missing:
            raise CorpusError(f"{missing[0]}: label row references a missing image file in {image_dir}")

    samples = []
    for sample_id in sorted(files):
        try:
            pixels = read_image(files[sample_id])
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            raise CorpusError(f"{sample_id}: unreadable image {files[sample_id]} ({exc})") from exc
        samples.append(ImageSample(sample_id, pixels, labels.get(sample_id)))
    return samples


def save_corpus(corpus: Sequence[ImageSample], root_path, write_labels: bool = True) -> Path:
    """Write ``corpus`` as ``root/images/<id>.png`` plus ``root/labels.csv``."""
    root = Path(root_path)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    for sample in corpus:
        Image.fromarray(np.ascontiguousarray(sample.pixels)).save(image_dir / f"{sample.id}.png")
    if write_labels:
        with open(root / "labels.csv", "w", newline="") as fh:
            fh.write("id,label\n")
            for sample in corpus:
                if sample.label is not None:
                    fh.write(f"{sample.id},{sample.label}\n")
    return root


def check_unique_ids(corpus: Sequence[ImageSample]) -> None:
    seen = Counter(s.id for s in corpus)
    dupes = sorted(i for i, n in seen.items() if n > 1)
    if dupes:
        raise CorpusError(f"{dupes[0]}: duplicate sample id")


def compute_stats(corpus: Sequence[ImageSample]) -> CorpusStats:
    if not corpus:
        raise CorpusError("cannot compute statistics of an empty corpus")
    counts = Counter(s.label for s in corpus if s.label is not None)
    return CorpusStats(
        max_height=max(s.height for s in corpus),
        max_width=max(s.width for s in corpus),
        class_counts={c: counts[c] for c in sorted(counts)},
        total=len(corpus),
        min_height=min(s.height for s in corpus),
        min_width=min(s.width for s in corpus),
    )


def class_histogram(corpus: Sequence[ImageSample]) -> Dict[int, int]:
    counts = Counter(s.label for s in corpus if s.label is not None)
    return {c: counts[c] for c in sorted(counts)}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(
    corpus: Sequence[ImageSample], spec: SplitSpec
) -> Tuple[List[ImageSample], List[ImageSample]]:
    """Partition a labeled corpus into (train, validation).

    Each class contributes ``round(count * fraction)`` validation samples,
    clipped so both sides keep at least one sample of the class. Both sides
    preserve the input order.
    """
    unlabeled = [s.id for s in corpus if s.label is None]
    if unlabeled:
        raise CorpusError(f"{unlabeled[0]}: cannot split an unlabeled sample")
    check_unique_ids(corpus)
    rng = np.random.default_rng(spec.seed)

    val_ids = set()
    if spec.stratified:
        by_class: Dict[int, List[str]] = {}
        for s in corpus:
            by_class.setdefault(s.label, []).append(s.id)
        for cls in sorted(by_class):
            ids = sorted(by_class[cls])
            if len(ids) < 2:
                raise CorpusError(f"class {cls} has {len(ids)} sample(s); stratified split needs at least 2")
            n_val = min(max(_round_half_up(len(ids) * spec.validation_fraction), 1), len(ids) - 1)
            order = rng.permutation(len(ids))
            val_ids.update(ids[i] for i in order[:n_val])
    else:
        ids = sorted(s.id for s in corpus)
        if len(ids) < 2:
            raise CorpusError("need at least 2 samples to split")
        n_val = min(max(_round_half_up(len(ids) * spec.validation_fraction), 1), len(ids) - 1)
        order = rng.permutation(len(ids))
        val_ids.update(ids[i] for i in order[:n_val])

    train = [s for s in corpus if s.id not in val_ids]
    val = [s for s in corpus if s.id in val_ids]
    return train, val


def format_stats(stats: CorpusStats) -> str:
    lines = [
        f"images:      {stats.total} ({stats.labeled} labeled)",
        f"max size:    {stats.max_height} x {stats.max_width} (H x W)",
        f"min size:    {stats.min_height} x {stats.min_width} (H x W)",
        "class counts:",
    ]
    for cls, n in sorted(stats.class_counts.items()):
        lines.append(f"  {cls:>3}: {n}")
    return "\n".join(lines) + "\n"


def write_stats(stats: CorpusStats, out_dir) -> Tuple[Path, Path]:
    """Write ``stats.json`` and ``stats.txt`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path, txt_path = out / "stats.json", out / "stats.txt"
    json_path.write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    txt_path.write_text(format_stats(stats))
    return json_path, txt_path
