"""Pad-to-largest augmentation and jitter-based class balancing."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .corpus import CorpusStats, ImageSample, check_unique_ids, class_histogram, compute_stats

PLACEMENTS = ("center", "top_left")
SIZING_MODES = ("pad", "resize", "crop")

_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class PaddingSpec:
    target_height: int
    target_width: int
    fill_value: Tuple[int, int, int] = (255, 255, 255)
    placement: str = "center"

    def __post_init__(self) -> None:
        if self.target_height < 1 or self.target_width < 1:
            raise AugmentError(f"padding target must be positive, got {self.target_height}x{self.target_width}")
        fill = tuple(int(v) for v in self.fill_value)
        if len(fill) != 3 or any(v < 0 or v > 255 for v in fill):
            raise AugmentError(f"fill_value must be 3 values in [0, 255], got {self.fill_value}")
        object.__setattr__(self, "fill_value", fill)
        if self.placement not in PLACEMENTS:
            raise AugmentError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")

    @classmethod
    def from_stats(cls, stats: CorpusStats, **kwargs) -> "PaddingSpec":
        return cls(stats.max_height, stats.max_width, **kwargs)

    def offset(self, height: int, width: int) -> Tuple[int, int]:
        """Row/column offset at which an ``height x width`` image is placed."""
        if self.placement == "top_left":
            return 0, 0
        return (self.target_height - height) // 2, (self.target_width - width) // 2


@dataclass(frozen=True)
class JitterSpec:
    brightness_delta: float = 0.2
    contrast_delta: float = 0.2
    saturation_delta: float = 0.2
    hue_delta: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("brightness_delta", "contrast_delta", "saturation_delta"):
            if getattr(self, name) < 0:
                raise AugmentError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.hue_delta <= 0.5:
            raise AugmentError(f"hue_delta must lie in [0, 0.5], got {self.hue_delta}")

    @classmethod
    def identity(cls, seed: int = 0) -> "JitterSpec":
        return cls(0.0, 0.0, 0.0, 0.0, seed)


@dataclass(frozen=True)
class JitterFactors:
    """Concrete factors drawn from a :class:`JitterSpec`."""

    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0


@dataclass(frozen=True)
class OversamplePlan:
    additional_copies: Dict[int, int] = field(default_factory=dict)
    # class -> [(source id, copy index), ...]
    sources: Dict[int, List[Tuple[str, int]]] = field(default_factory=dict)

    @property
    def total_copies(self) -> int:
        return sum(self.additional_copies.values())


def pad_to(image: ImageSample, spec: PaddingSpec) -> ImageSample:
    """Embed ``image`` unchanged in a ``target_height x target_width`` canvas of fill pixels."""
    h, w = image.height, image.width
    if h > spec.target_height or w > spec.target_width:
        raise AugmentError(
            f"{image.id}: image {h}x{w} exceeds padding target {spec.target_height}x{spec.target_width}"
        )
    if (h, w) == (spec.target_height, spec.target_width):
        return image
    top, left = spec.offset(h, w)
    canvas = np.empty((spec.target_height, spec.target_width, 3), dtype=np.uint8)
    canvas[:, :] = np.asarray(spec.fill_value, dtype=np.uint8)
    canvas[top : top + h, left : left + w] = image.pixels
    return image.replace(pixels=canvas)


def crop_back(padded: ImageSample, spec: PaddingSpec, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`pad_to` for an original of size ``height x width``."""
    top, left = spec.offset(height, width)
    return padded.pixels[top : top + height, left : left + width]


def resize_to(image: ImageSample, height: int, width: int) -> ImageSample:
    if (image.height, image.width) == (height, width):
        return image
    img = Image.fromarray(np.ascontiguousarray(image.pixels)).resize((width, height), Image.BILINEAR)
    return image.replace(pixels=np.asarray(img))


def center_crop(image: ImageSample, height: int, width: int) -> ImageSample:
    """Center-crop to at most ``height x width``; smaller sides are left alone."""
    h, w = image.height, image.width
    ch, cw = min(h, height), min(w, width)
    top, left = (h - ch) // 2, (w - cw) // 2
    if (ch, cw) == (h, w):
        return image
    return image.replace(pixels=image.pixels[top : top + ch, left : left + cw])


def size_image(image: ImageSample, mode: str, spec: PaddingSpec) -> ImageSample:
    """Bring ``image`` to the padding target size by padding, resizing or cropping.

    ``crop`` pads afterwards when the image is smaller than the target.
    """
    if mode == "pad":
        return pad_to(image, spec)
    if mode == "resize":
        return resize_to(image, spec.target_height, spec.target_width)
    if mode == "crop":
        return pad_to(center_crop(image, spec.target_height, spec.target_width), spec)
    raise AugmentError(f"unknown sizing mode {mode!r}; expected one of {SIZING_MODES}")


def sizing_target(stats: CorpusStats, mode: str) -> Tuple[int, int]:
    if mode == "crop":
        return stats.min_height, stats.min_width
    return stats.max_height, stats.max_width


# --- jitter -----------------------------------------------------------------


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def sample_jitter_factors(spec: JitterSpec, rng: np.random.Generator) -> JitterFactors:
    """Draw one set of factors; four uniforms are always consumed, in a fixed order."""
    u = rng.uniform(-1.0, 1.0, size=4)
    return JitterFactors(
        brightness=1.0 + spec.brightness_delta * float(u[0]),
        contrast=max(0.0, 1.0 + spec.contrast_delta * float(u[1])),
        saturation=max(0.0, 1.0 + spec.saturation_delta * float(u[2])),
        hue=spec.hue_delta * float(u[3]),
    )


def jitter_pixels(pixels: np.ndarray, factors: JitterFactors) -> np.ndarray:
    """Apply brightness, contrast, saturation, then hue, clamping to [0, 255] after each step."""
    if factors == JitterFactors():
        return np.array(pixels, dtype=np.uint8, copy=True)
    x = pixels.astype(np.float64)
    if factors.brightness != 1.0:
        x = np.clip(x * max(factors.brightness, 0.0), 0.0, 255.0)
    if factors.contrast != 1.0:
        mean = float((x @ _GRAY_WEIGHTS).mean())
        x = np.clip(factors.contrast * x + (1.0 - factors.contrast) * mean, 0.0, 255.0)
    if factors.saturation != 1.0:
        gray = (x @ _GRAY_WEIGHTS)[..., None]
        x = np.clip(factors.saturation * x + (1.0 - factors.saturation) * gray, 0.0, 255.0)
    if factors.hue != 0.0:
        hsv = _rgb_to_hsv(x / 255.0)
        hsv[..., 0] = (hsv[..., 0] + factors.hue) % 1.0
        x = np.clip(_hsv_to_rgb(hsv) * 255.0, 0.0, 255.0)
    return np.rint(x).astype(np.uint8)


def copy_id(source_id: str, copy_index: int) -> str:
    return f"{source_id}__jit{copy_index}"


def apply_jitter(
    image: ImageSample,
    spec: JitterSpec,
    draw: np.random.Generator,
    copy_index: int = 0,
) -> ImageSample:
    factors = sample_jitter_factors(spec, draw)
    return image.replace(id=copy_id(image.id, copy_index), pixels=jitter_pixels(image.pixels, factors))


def copy_rng(seed: int, source_id: str, copy_index: int, jitter_seed: int = 0) -> np.random.Generator:
    """Per-copy generator derived from (seed, source id, copy index) only."""
    digest = hashlib.sha256(source_id.encode("utf-8")).digest()
    id_key = int.from_bytes(digest[:8], "little")
    mask = 0xFFFFFFFFFFFFFFFF
    return np.random.default_rng(
        np.random.SeedSequence([seed & mask, jitter_seed & mask, id_key, copy_index])
    )


# --- oversampling -----------------------------------------------------------


def plan_oversample(stats: CorpusStats, corpus: Sequence[ImageSample], seed: int) -> OversamplePlan:
    """Decide how many jittered copies each class needs and which sources they come from.

    Copies of a class cycle through its sources in a seeded random order, so
    per-source copy counts differ by at most one.
    """
    by_class: Dict[int, List[str]] = {}
    for s in corpus:
        if s.label is None:
            raise AugmentError(f"{s.id}: oversampling needs labeled samples")
        by_class.setdefault(s.label, []).append(s.id)
    if not stats.class_counts:
        return OversamplePlan()
    for cls, n in stats.class_counts.items():
        if n == 0 or not by_class.get(cls):
            raise AugmentError(f"class {cls} has no samples; cannot synthesize copies from nothing")

    target = max(stats.class_counts.values())
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    copies: Dict[int, int] = {}
    sources: Dict[int, List[Tuple[str, int]]] = {}
    for cls in sorted(stats.class_counts):
        ids = sorted(by_class[cls])
        deficit = target - stats.class_counts[cls]
        order = [ids[i] for i in rng.permutation(len(ids))]
        copies[cls] = deficit
        sources[cls] = [(order[k % len(order)], k // len(order)) for k in range(deficit)]
    return OversamplePlan(copies, sources)


def balance_corpus(
    corpus: Sequence[ImageSample], jitter: JitterSpec, seed: int
) -> List[ImageSample]:
    """Append jittered minority-class copies until every class matches the majority count."""
    check_unique_ids(corpus)
    if not corpus:
        raise AugmentError("cannot balance an empty corpus")
    stats = compute_stats(corpus)
    plan = plan_oversample(stats, corpus, seed)
    by_id = {s.id: s for s in corpus}
    out = list(corpus)
    for cls in sorted(plan.sources):
        for source_id, k in plan.sources[cls]:
            rng = copy_rng(seed, source_id, k, jitter.seed)
            out.append(apply_jitter(by_id[source_id], jitter, rng, copy_index=k))
    check_unique_ids(out)
    return out


@dataclass(frozen=True)
class ManifestRow:
    id: str
    source_id: str
    cls: int
    transform: str


def manifest_rows(balanced: Sequence[ImageSample], original_ids) -> List[ManifestRow]:
    original_ids = set(original_ids)
    rows = []
    for s in balanced:
        if s.id in original_ids:
            rows.append(ManifestRow(s.id, s.id, s.label, "original"))
        else:
            source, _, suffix = s.id.rpartition("__jit")
            rows.append(ManifestRow(s.id, source, s.label, f"jitter:{suffix}"))
    return rows


def write_manifest(rows: Sequence[ManifestRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "source_id", "class", "transform"])
        for r in rows:
            writer.writerow([r.id, r.source_id, r.cls, r.transform])
    return path


def read_manifest(path) -> List[ManifestRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [ManifestRow(r["id"], r["source_id"], int(r["class"]), r["transform"]) for r in reader]


def jitter_to_dict(spec: JitterSpec) -> dict:
    return asdict(spec)


def is_balanced(corpus: Sequence[ImageSample]) -> bool:
    counts = class_histogram(corpus)
    return len(set(counts.values())) <= 1
