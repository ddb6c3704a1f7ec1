"""Fine-tuning of ensemble members with SGD + momentum and best-loss checkpointing."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .augment import JitterSpec, PaddingSpec, balance_corpus, is_balanced, size_image, sizing_target
from .corpus import ImageSample, SplitSpec, class_histogram, compute_stats, stratified_split
from .model import (
    BackboneSpec,
    Classifier,
    EnsembleSpec,
    build_classifier,
    images_to_tensor,
    load_parameter_arrays,
    parameter_arrays,
)

log = logging.getLogger(__name__)

SELECTION_MODES = ("validation_loss", "training_loss")
LABEL_TO_INDEX: Dict[int, int] = {-1: 0, 0: 1, 1: 2}
INDEX_TO_LABEL: Dict[int, int] = {v: k for k, v in LABEL_TO_INDEX.items()}

CHECKPOINT_MAGIC = b"PADENSCK"
CHECKPOINT_VERSION = 1


class TrainError(RuntimeError):
    pass


class NonFiniteLossError(TrainError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    selection_mode: str = "validation_loss"
    validation_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}, got {self.selection_mode!r}")
        if not 0 < self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: Optional[float]


@dataclass(eq=False)
class Checkpoint:
    member_index: int
    spec: BackboneSpec
    parameters: Dict[str, np.ndarray]
    best_loss: float
    best_epoch: int
    config_fingerprint: str
    label_mapping: Dict[int, int] = field(default_factory=lambda: dict(LABEL_TO_INDEX))
    padding: Optional[PaddingSpec] = None
    sizing: str = "pad"
    num_classes: int = 3
    history: List[EpochRecord] = field(default_factory=list)

    def metadata(self) -> dict:
        return {
            "member_index": self.member_index,
            "spec": self.spec.to_dict(),
            "best_loss": self.best_loss,
            "best_epoch": self.best_epoch,
            "config_fingerprint": self.config_fingerprint,
            "label_mapping": {str(k): v for k, v in sorted(self.label_mapping.items())},
            "padding": None if self.padding is None else _padding_to_dict(self.padding),
            "sizing": self.sizing,
            "num_classes": self.num_classes,
            "history": [[r.epoch, r.train_loss, r.val_loss] for r in self.history],
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.metadata() != other.metadata() or list(self.parameters) != list(other.parameters):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.parameters.values(), other.parameters.values())
        )

    def to_classifier(self) -> Classifier:
        clf = build_classifier(
            BackboneSpec(self.spec.architecture_name, False, self.spec.mean, self.spec.std),
            self.num_classes,
        )
        clf.spec = self.spec
        load_parameter_arrays(clf, self.parameters)
        return clf

    def input_target(self) -> Optional[Tuple[int, int]]:
        if self.padding is None:
            return None
        return self.padding.target_height, self.padding.target_width


def _padding_to_dict(p: PaddingSpec) -> dict:
    return {
        "target_height": p.target_height,
        "target_width": p.target_width,
        "fill_value": list(p.fill_value),
        "placement": p.placement,
    }


def _padding_from_dict(d: Optional[dict]) -> Optional[PaddingSpec]:
    if d is None:
        return None
    return PaddingSpec(d["target_height"], d["target_width"], tuple(d["fill_value"]), d["placement"])


# --- selection --------------------------------------------------------------


def select_best(losses: Sequence[float]) -> Tuple[int, float]:
    """Return ``(epoch, loss)`` of the earliest minimum; epochs are 1-based."""
    if not losses:
        raise TrainError("no epochs recorded")
    best_epoch, best = 1, float(losses[0])
    for epoch, loss in enumerate(losses[1:], start=2):
        if loss < best:
            best_epoch, best = epoch, float(loss)
    return best_epoch, best


def derive_seed(*parts: int) -> int:
    mask = 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence([p & mask for p in parts])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _labels_to_tensor(samples: Sequence[ImageSample]) -> torch.Tensor:
    missing = [s.id for s in samples if s.label is None]
    if missing:
        raise TrainError(f"{missing[0]}: training sample has no label")
    return torch.tensor([LABEL_TO_INDEX[s.label] for s in samples], dtype=torch.long)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a lone trailing sample breaks batch-norm statistics; fold it into the previous batch
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    """Plain SGD with heavy-ball momentum: ``v <- m*v + g; p <- p - lr*v``."""
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)


def mean_loss(classifier: Classifier, x: torch.Tensor, y: torch.Tensor, batch_size: int = 64) -> float:
    """Mean cross-entropy in eval mode."""
    was_training = classifier.training
    classifier.eval()
    total = 0.0
    try:
        with torch.no_grad():
            for i in range(0, len(y), batch_size):
                out = classifier(x[i : i + batch_size])
                total += float(F.cross_entropy(out, y[i : i + batch_size], reduction="sum"))
    finally:
        classifier.train(was_training)
    return total / len(y)


def train_member(
    classifier: Classifier,
    train_set: Sequence[ImageSample],
    val_set: Sequence[ImageSample],
    config: TrainConfig,
    *,
    member_index: int = 0,
    fingerprint: str = "",
    padding: Optional[PaddingSpec] = None,
    sizing: str = "pad",
    evaluate: Optional[Callable[[Classifier, int], float]] = None,
) -> Checkpoint:
    """Run ``config.epochs`` epochs of mini-batch SGD with momentum and keep the best-loss weights.

    The selection loss after each epoch is the validation mean loss or the
    training epoch mean loss, per ``config.selection_mode``. ``evaluate``
    overrides it (used to inject loss sequences).
    """
    if not train_set:
        raise TrainError("empty training set")
    if config.selection_mode == "validation_loss" and not val_set and evaluate is None:
        raise TrainError("validation_loss selection needs a non-empty validation set")

    dtype = next(classifier.parameters()).dtype
    x_train = images_to_tensor(train_set, classifier.spec, dtype)
    y_train = _labels_to_tensor(train_set)
    if val_set:
        x_val = images_to_tensor(val_set, classifier.spec, dtype)
        y_val = _labels_to_tensor(val_set)

    optimizer = make_optimizer(classifier.parameters(), config)
    history: List[EpochRecord] = []
    best_params: Optional[Dict[str, np.ndarray]] = None
    best_epoch, best_loss = 0, math.inf

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, member_index, 0x5EED))
        for epoch in range(1, config.epochs + 1):
            classifier.train()
            rng = np.random.default_rng(derive_seed(config.seed, member_index, epoch))
            running, seen = 0.0, 0
            for b, idx in enumerate(_batches(len(y_train), config.batch_size, rng)):
                idx_t = torch.from_numpy(idx)
                optimizer.zero_grad()
                loss = F.cross_entropy(classifier(x_train[idx_t]), y_train[idx_t])
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(epoch, b, float(loss.detach()))
                loss.backward()
                optimizer.step()
                running += float(loss.detach()) * len(idx)
                seen += len(idx)
            train_loss = running / seen

            val_loss = mean_loss(classifier, x_val, y_val) if val_set else None
            if evaluate is not None:
                selection = float(evaluate(classifier, epoch))
            elif config.selection_mode == "validation_loss":
                selection = val_loss
            else:
                selection = train_loss
            if not math.isfinite(selection):
                raise NonFiniteLossError(epoch, -1, selection)
            history.append(EpochRecord(epoch, train_loss, val_loss))
            if selection < best_loss:
                best_epoch, best_loss = epoch, selection
                best_params = parameter_arrays(classifier)
            log.debug("member %d epoch %d train %.5f val %s", member_index, epoch, train_loss, val_loss)

    assert best_params is not None
    return Checkpoint(
        member_index=member_index,
        spec=classifier.spec,
        parameters=best_params,
        best_loss=best_loss,
        best_epoch=best_epoch,
        config_fingerprint=fingerprint,
        padding=padding,
        sizing=sizing,
        num_classes=classifier.num_classes,
        history=history,
    )


def data_manifest_digest(corpus: Sequence[ImageSample]) -> str:
    h = hashlib.sha256()
    for s in sorted(corpus, key=lambda s: s.id):
        h.update(s.id.encode())
        h.update(str(s.label).encode())
        h.update(str(s.pixels.shape).encode())
        h.update(hashlib.sha256(s.pixels.tobytes()).digest())
    return h.hexdigest()


def config_fingerprint(config: TrainConfig, corpus: Sequence[ImageSample], extra: Optional[dict] = None) -> str:
    doc = {"train": asdict(config), "data": data_manifest_digest(corpus), "extra": extra or {}}
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


@dataclass(frozen=True)
class PreparedData:
    train: List[ImageSample]
    val: List[ImageSample]
    padding: PaddingSpec


def prepare_training_data(
    corpus: Sequence[ImageSample],
    jitter: JitterSpec,
    config: TrainConfig,
    *,
    sizing: str = "pad",
    fill_value=(255, 255, 255),
    placement: str = "center",
    target: Optional[Tuple[int, int]] = None,
    balance: bool = True,
) -> PreparedData:
    """Split, balance the training side, then size everything to the full-corpus target."""
    if config.selection_mode == "validation_loss":
        train, val = stratified_split(corpus, SplitSpec(config.validation_fraction, config.seed))
    else:
        train, val = list(corpus), []
    if balance:
        train = balance_corpus(train, jitter, config.seed)
        if not is_balanced(train):
            raise TrainError(f"balanced training set is not uniform: {class_histogram(train)}")

    stats = compute_stats(corpus)
    if target is None:
        target = sizing_target(stats, sizing)
    padding = PaddingSpec(target[0], target[1], tuple(fill_value), placement)
    train = [size_image(s, sizing, padding) for s in train]
    val = [size_image(s, sizing, padding) for s in val]
    return PreparedData(train, val, padding)


def train_ensemble(
    spec: EnsembleSpec,
    corpus: Sequence[ImageSample],
    jitter: JitterSpec,
    config: TrainConfig,
    *,
    sizing: str = "pad",
    fill_value=(255, 255, 255),
    placement: str = "center",
    target: Optional[Tuple[int, int]] = None,
    balance: bool = True,
) -> List[Checkpoint]:
    """Train one checkpoint per ensemble member, in member order."""
    data = prepare_training_data(
        corpus, jitter, config, sizing=sizing, fill_value=fill_value,
        placement=placement, target=target, balance=balance,
    )
    fingerprint = config_fingerprint(
        config,
        corpus,
        {"jitter": asdict(jitter), "padding": _padding_to_dict(data.padding), "sizing": sizing, "balance": balance},
    )
    checkpoints = []
    for i, member in enumerate(spec.members):
        clf = build_classifier(member, seed=derive_seed(config.seed, i))
        log.info("training member %d (%s) on %d samples", i, member.architecture_name, len(data.train))
        checkpoints.append(
            train_member(
                clf, data.train, data.val, config,
                member_index=i, fingerprint=fingerprint, padding=data.padding, sizing=sizing,
            )
        )
    return checkpoints


# --- persistence ------------------------------------------------------------

_HEADER_STRUCT = struct.Struct("<8sIQ")


def save_checkpoint(cp: Checkpoint, path) -> Path:
    """Write ``cp`` as magic + version + JSON metadata header + raw tensor payload."""
    path = Path(path)
    tensors, chunks, offset = [], [], 0
    for name, arr in cp.parameters.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = cp.metadata()
    header["tensors"] = tensors
    header["payload_size"] = len(payload)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER_STRUCT.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _HEADER_STRUCT.size:
        raise CheckpointTruncatedError(f"{path}: file too short for a checkpoint header")
    magic, version, header_len = _HEADER_STRUCT.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    start = _HEADER_STRUCT.size
    if len(data) < start + header_len:
        raise CheckpointTruncatedError(f"{path}: truncated metadata header")
    try:
        header = json.loads(data[start : start + header_len])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt metadata header") from exc
    if not header.get("config_fingerprint"):
        raise CheckpointError(f"{path}: checkpoint has no config fingerprint")
    payload = data[start + header_len :]
    if len(payload) < header["payload_size"]:
        raise CheckpointTruncatedError(
            f"{path}: payload has {len(payload)} bytes, expected {header['payload_size']}"
        )
    payload = payload[: header["payload_size"]]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    params: Dict[str, np.ndarray] = {}
    for t in header["tensors"]:
        dt = np.dtype("<" + t["dtype"]) if t["dtype"][0] in "fiuc" else np.dtype(t["dtype"])
        raw = payload[t["offset"] : t["offset"] + t["nbytes"]]
        params[t["name"]] = np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(t["shape"])
    return Checkpoint(
        member_index=header["member_index"],
        spec=BackboneSpec.from_dict(header["spec"]),
        parameters=params,
        best_loss=header["best_loss"],
        best_epoch=header["best_epoch"],
        config_fingerprint=header["config_fingerprint"],
        label_mapping={int(k): v for k, v in header["label_mapping"].items()},
        padding=_padding_from_dict(header["padding"]),
        sizing=header["sizing"],
        num_classes=header["num_classes"],
        history=[EpochRecord(e, tl, vl) for e, tl, vl in header["history"]],
    )


def write_training_log(checkpoints: Sequence[Checkpoint], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["member", "epoch", "train_loss", "val_loss"])
        for cp in checkpoints:
            for r in cp.history:
                writer.writerow([cp.member_index, r.epoch, repr(r.train_loss), "" if r.val_loss is None else repr(r.val_loss)])
    return path
