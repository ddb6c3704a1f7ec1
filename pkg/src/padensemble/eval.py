"""F1 scoring, confusion matrices, submission files and ablation tables."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .augment import JitterSpec, sizing_target
from .corpus import CLASSES, ImageSample, SplitSpec, compute_stats, stratified_split
from .ensemble import Prediction, predict, prepare_inputs
from .model import EnsembleSpec
from .train import TrainConfig, train_ensemble

log = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class, in order (-1, 0, 1)."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (len(CLASSES), len(CLASSES)) or np.any(c < 0):
            raise EvalError(f"confusion matrix must be a nonnegative {len(CLASSES)}x{len(CLASSES)} array")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def cell(self, true_label: int, pred_label: int) -> int:
        return int(self.counts[CLASSES.index(true_label), CLASSES.index(pred_label)])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return bool(np.array_equal(self.counts, other.counts))


@dataclass(frozen=True)
class F1Report:
    per_class_f1: Dict[int, float]
    macro_f1: float
    support: Dict[int, int]
    micro_f1: float = 0.0
    precision: Dict[int, float] = field(default_factory=dict)
    recall: Dict[int, float] = field(default_factory=dict)


def _check_labels(labels: Sequence[int], what: str) -> None:
    for lab in labels:
        if lab not in CLASSES:
            raise EvalError(f"{what} label {lab!r} not in {CLASSES}")


def confusion(truth: Sequence[int], pred: Sequence[int]) -> ConfusionMatrix:
    if len(truth) != len(pred):
        raise EvalError(f"length mismatch: {len(truth)} truth labels, {len(pred)} predictions")
    if len(truth) == 0:
        raise EvalError("cannot score an empty label list")
    _check_labels(truth, "true")
    _check_labels(pred, "predicted")
    counts = np.zeros((len(CLASSES), len(CLASSES)), dtype=np.int64)
    for t, p in zip(truth, pred):
        counts[CLASSES.index(t), CLASSES.index(p)] += 1
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float) -> float:
    return 0.0 if den == 0 else num / den


def f1_report(cm: ConfusionMatrix) -> F1Report:
    """Per-class and macro F1; every 0/0 (precision, recall or F1) counts as 0."""
    c = cm.counts
    per_class, precision, recall, support = {}, {}, {}, {}
    for k, cls in enumerate(CLASSES):
        tp = float(c[k, k])
        fp = float(c[:, k].sum()) - tp
        fn = float(c[k, :].sum()) - tp
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        precision[cls], recall[cls] = p, r
        per_class[cls] = _ratio(2 * p * r, p + r)
        support[cls] = int(c[k, :].sum())
    macro = sum(per_class.values()) / len(CLASSES)
    micro = _ratio(float(np.trace(c)), float(c.sum()))
    return F1Report(per_class, macro, support, micro, precision, recall)


def score(truth: Sequence[int], pred: Sequence[int]) -> F1Report:
    return f1_report(confusion(truth, pred))


def report_document(cm: ConfusionMatrix, report: F1Report) -> dict:
    return {
        "macro_f1": report.macro_f1,
        "micro_f1": report.micro_f1,
        "per_class_f1": {str(k): v for k, v in report.per_class_f1.items()},
        "precision": {str(k): v for k, v in report.precision.items()},
        "recall": {str(k): v for k, v in report.recall.items()},
        "support": {str(k): v for k, v in report.support.items()},
        "confusion": {
            f"{t},{p}": cm.cell(t, p) for t in CLASSES for p in CLASSES
        },
        "n": cm.total,
    }


def format_report(cm: ConfusionMatrix, report: F1Report) -> str:
    lines = [f"samples: {cm.total}", f"macro F1: {report.macro_f1:.4f}", f"micro F1: {report.micro_f1:.4f}", ""]
    lines.append("class  support  precision  recall  F1")
    for cls in CLASSES:
        lines.append(
            f"{cls:>5}  {report.support[cls]:>7}  {report.precision[cls]:>9.4f}  "
            f"{report.recall[cls]:>6.4f}  {report.per_class_f1[cls]:.4f}"
        )
    lines += ["", "confusion (rows = truth, cols = predicted)", "      " + "".join(f"{c:>6}" for c in CLASSES)]
    for cls in CLASSES:
        lines.append(f"{cls:>6}" + "".join(f"{cm.cell(cls, p):>6}" for p in CLASSES))
    return "\n".join(lines) + "\n"


def write_report(cm: ConfusionMatrix, report: F1Report, out_dir) -> Tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path, txt_path = out / "report.json", out / "report.txt"
    json_path.write_text(json.dumps(report_document(cm, report), indent=2, sort_keys=True) + "\n")
    txt_path.write_text(format_report(cm, report))
    return json_path, txt_path


def write_submission(predictions: Sequence[Prediction], path) -> Path:
    """Write the ``id,malignant`` submission table in input order."""
    seen = set()
    for p in predictions:
        if p.id in seen:
            raise EvalError(f"duplicate prediction id {p.id!r}")
        if p.label not in CLASSES:
            raise EvalError(f"{p.id}: label {p.label} not in {CLASSES}")
        seen.add(p.id)
    body = "id,malignant\n" + "".join(f"{p.id},{p.label}\n" for p in predictions)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(body)
    return path


# --- ablation ---------------------------------------------------------------


@dataclass(frozen=True)
class PipelineVariant:
    name: str
    sizing: str = "pad"
    strategy: str = "ensemble"  # or "best_single"
    ensemble: Optional[EnsembleSpec] = None
    balance: bool = True

    def __post_init__(self) -> None:
        if self.strategy not in ("ensemble", "best_single"):
            raise EvalError(f"unknown model strategy {self.strategy!r}")


@dataclass(frozen=True)
class AblationRow:
    variant: str
    scores: Tuple[float, ...]
    mean: float
    std: float
    minority_f1: Tuple[float, ...] = ()


def default_variants(ensemble: EnsembleSpec) -> List[PipelineVariant]:
    """{pad, resize, crop} x {ensemble, best-single}."""
    return [
        PipelineVariant(f"{sizing}/{strategy}", sizing, strategy, ensemble)
        for sizing in ("pad", "resize", "crop")
        for strategy in ("ensemble", "best_single")
    ]


def run_variant(
    variant: PipelineVariant,
    train_corpus: Sequence[ImageSample],
    test_corpus: Sequence[ImageSample],
    jitter: JitterSpec,
    config: TrainConfig,
    fill_value=(255, 255, 255),
    placement: str = "center",
) -> List[Prediction]:
    """Train ``variant`` on ``train_corpus`` and predict ``test_corpus``.

    The sizing target covers the test images too (their pixels, not labels),
    so padding never has to crop a held-out image.
    """
    spec = variant.ensemble or EnsembleSpec.of(["tiny_test_net"], pretrained=False)
    target = sizing_target(compute_stats(list(train_corpus) + list(test_corpus)), variant.sizing)
    checkpoints = train_ensemble(
        spec, train_corpus, jitter, config, sizing=variant.sizing, fill_value=fill_value,
        placement=placement, target=target, balance=variant.balance,
    )
    if variant.strategy == "best_single":
        checkpoints = [min(checkpoints, key=lambda cp: (cp.best_loss, cp.member_index))]
    return predict(checkpoints, prepare_inputs(checkpoints, test_corpus))


def ablation_report(
    variants: Sequence[PipelineVariant],
    corpus: Sequence[ImageSample],
    seeds: Sequence[int],
    jitter: JitterSpec,
    config: TrainConfig,
    holdout_fraction: float = 0.25,
) -> List[AblationRow]:
    """Macro F1 mean and population std per variant, on one common held-out split per seed.

    ``minority_f1`` records the F1 of the class with the smallest support in
    each held-out split.
    """
    if len(variants) < 2:
        raise EvalError("ablation needs at least 2 variants")
    if not seeds:
        raise EvalError("ablation needs at least 1 seed")
    scores: Dict[int, List[float]] = {i: [] for i in range(len(variants))}
    minority: Dict[int, List[float]] = {i: [] for i in range(len(variants))}
    for seed in seeds:
        train, held_out = stratified_split(corpus, SplitSpec(holdout_fraction, seed))
        truth = [s.label for s in held_out]
        support = {c: truth.count(c) for c in CLASSES if c in truth}
        rare = min(support, key=lambda c: (support[c], c))
        seed_config = TrainConfig(**{**config.__dict__, "seed": seed})
        for i, variant in enumerate(variants):
            preds = run_variant(variant, train, held_out, jitter, seed_config)
            rep = score(truth, [p.label for p in preds])
            log.info("seed %d variant %s macro F1 %.4f", seed, variant.name, rep.macro_f1)
            scores[i].append(rep.macro_f1)
            minority[i].append(rep.per_class_f1[rare])
    return [
        AblationRow(
            v.name, tuple(scores[i]), float(np.mean(scores[i])), float(np.std(scores[i])), tuple(minority[i])
        )
        for i, v in enumerate(variants)
    ]


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = ["variant,macro_f1_mean,macro_f1_std,n_seeds,per_seed"]
    for r in rows:
        per_seed = " ".join(repr(s) for s in r.scores)
        lines.append(f"{r.variant},{r.mean!r},{r.std!r},{len(r.scores)},{per_seed}")
    return "\n".join(lines) + "\n"
