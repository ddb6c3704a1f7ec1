"""Probability-averaging ensemble inference."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .augment import size_image
from .corpus import CLASSES, ImageSample
from .model import forward, softmax
from .train import INDEX_TO_LABEL, LABEL_TO_INDEX, Checkpoint

AVERAGING_MODES = ("probabilities", "logits")


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Prediction:
    id: str
    per_member_probs: np.ndarray  # members x 3
    mean_probs: np.ndarray
    label: int


def classify(mean_probs, index_to_label: Optional[Dict[int, int]] = None) -> int:
    """Argmax class in competition label space; ties go to the lowest index."""
    p = np.asarray(mean_probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] != len(CLASSES):
        raise EnsembleError(f"expected a probability {len(CLASSES)}-vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise EnsembleError(f"malformed probability vector {p.tolist()}")
    mapping = INDEX_TO_LABEL if index_to_label is None else index_to_label
    return mapping[int(np.argmax(p))]


def combine(
    ids: Sequence[str],
    member_scores: Sequence[np.ndarray],
    mode: str = "probabilities",
) -> List[Prediction]:
    """Build predictions from per-member outputs, each ``len(ids) x 3``.

    In ``probabilities`` mode ``member_scores`` are member probabilities and
    are averaged directly. In ``logits`` mode they are raw scores: logits are
    averaged first and the softmax of the mean is reported.
    """
    if mode not in AVERAGING_MODES:
        raise EnsembleError(f"averaging mode must be one of {AVERAGING_MODES}, got {mode!r}")
    if not member_scores:
        raise EnsembleError("need at least one member")
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in member_scores], axis=1)
    if stacked.shape[0] != len(ids):
        raise EnsembleError(f"{len(ids)} ids but member outputs have {stacked.shape[0]} rows")
    out = []
    for i, sample_id in enumerate(ids):
        rows = stacked[i]
        if mode == "probabilities":
            per_member = rows
            mean = rows.mean(axis=0)
        else:
            per_member = softmax(rows)
            mean = softmax(rows.mean(axis=0))
        out.append(Prediction(sample_id, per_member, mean, classify(mean)))
    return out


def check_compatible(checkpoints: Sequence[Checkpoint]) -> None:
    if not checkpoints:
        raise EnsembleError("predict needs at least one checkpoint")
    first = checkpoints[0]
    for pos, cp in enumerate(checkpoints[1:], start=1):
        if cp.label_mapping != first.label_mapping:
            raise EnsembleError(f"checkpoints 0 and {pos} use different label mappings")
        if cp.input_target() != first.input_target() or cp.sizing != first.sizing:
            raise EnsembleError(
                f"incompatible input targets: checkpoint 0 expects {_fmt_target(first)}, "
                f"checkpoint {pos} expects {_fmt_target(cp)}"
            )
    if first.label_mapping != LABEL_TO_INDEX:
        raise EnsembleError(f"unsupported label mapping {first.label_mapping}")


def _fmt_target(cp: Checkpoint) -> str:
    t = cp.input_target()
    return f"{cp.sizing} {t[0]}x{t[1]}" if t else "unspecified"


def prepare_inputs(checkpoints: Sequence[Checkpoint], corpus: Sequence[ImageSample]) -> List[ImageSample]:
    """Pad (or resize/crop, per the checkpoints' sizing) test images to the training target."""
    check_compatible(checkpoints)
    cp = checkpoints[0]
    if cp.padding is None:
        return list(corpus)
    return [size_image(s, cp.sizing, cp.padding) for s in corpus]


def predict(
    checkpoints: Sequence[Checkpoint],
    corpus: Sequence[ImageSample],
    mode: str = "probabilities",
    batch_size: int = 32,
) -> List[Prediction]:
    """Feed ``corpus`` (already sized to the checkpoints' target) to every member and average."""
    check_compatible(checkpoints)
    target = checkpoints[0].input_target()
    for s in corpus:
        if target is not None and (s.height, s.width) != target:
            raise EnsembleError(f"{s.id}: image is {s.height}x{s.width}, expected padded {target[0]}x{target[1]}")
    ids = [s.id for s in corpus]
    if not corpus:
        return []
    outputs = []
    for cp in checkpoints:
        clf = cp.to_classifier()
        scores = np.concatenate(
            [forward(clf, corpus[i : i + batch_size]) for i in range(0, len(corpus), batch_size)]
        )
        outputs.append(softmax(scores) if mode == "probabilities" else scores)
    return combine(ids, outputs, mode)


def write_predictions(predictions: Sequence[Prediction], path) -> Path:
    """Write ``id,p_neg1,p_0,p_1,label`` with round-trip float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "p_neg1", "p_0", "p_1", "label"])
        for p in predictions:
            writer.writerow([p.id, *(repr(float(v)) for v in p.mean_probs), p.label])
    return path


def read_prediction_labels(path) -> Dict[str, int]:
    """Read ``id -> label`` from a prediction dump or a submission file."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        col = "label" if "label" in fields else "malignant" if "malignant" in fields else None
        if "id" not in fields or col is None:
            raise EnsembleError(f"{path}: expected an 'id' column and a 'label' or 'malignant' column")
        out: Dict[str, int] = {}
        for row in reader:
            out[row["id"]] = int(row[col])
    return out
