"""Backbone registry and the backbone + 3-class-head classifier."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .corpus import ImageSample

NUM_CLASSES = 3
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
WEIGHTS_DIR_ENV = "PADENSEMBLE_WEIGHTS_DIR"


class ModelError(ValueError):
    pass


class UnknownArchitectureError(ModelError):
    pass


class PretrainedWeightsUnavailable(RuntimeError):
    """The architecture exists but its pretrained weights could not be obtained."""


BuildFn = Callable[[bool], Tuple[nn.Module, int]]


@dataclass(frozen=True)
class BackboneProvider:
    """Builds a headless feature extractor: ``build(pretrained) -> (module, feature_width)``."""

    build: BuildFn
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD


_REGISTRY: Dict[str, BackboneProvider] = {}


def register_backbone(name: str, provider: BackboneProvider) -> None:
    _REGISTRY[name] = provider


def registered_backbones() -> Tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def get_provider(name: str) -> BackboneProvider:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownArchitectureError(
            f"unknown architecture {name!r}; registered: {', '.join(registered_backbones())}"
        ) from None


@dataclass(frozen=True)
class BackboneSpec:
    architecture_name: str
    pretrained: bool = True
    mean: Optional[Tuple[float, float, float]] = None
    std: Optional[Tuple[float, float, float]] = None

    def __post_init__(self) -> None:
        provider = get_provider(self.architecture_name)
        mean = provider.mean if self.mean is None else tuple(float(v) for v in self.mean)
        std = provider.std if self.std is None else tuple(float(v) for v in self.std)
        if len(mean) != 3 or len(std) != 3:
            raise ModelError("normalization mean and std need exactly 3 entries each")
        if any(s <= 0 for s in std):
            raise ModelError(f"normalization std must be positive, got {std}")
        object.__setattr__(self, "mean", tuple(mean))
        object.__setattr__(self, "std", tuple(std))

    def to_dict(self) -> dict:
        return {
            "architecture_name": self.architecture_name,
            "pretrained": self.pretrained,
            "mean": list(self.mean),
            "std": list(self.std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        unknown = set(d) - {"architecture_name", "pretrained", "mean", "std"}
        if unknown:
            raise ModelError(f"unknown backbone keys: {sorted(unknown)}")
        return cls(
            d["architecture_name"],
            bool(d.get("pretrained", True)),
            tuple(d["mean"]) if d.get("mean") is not None else None,
            tuple(d["std"]) if d.get("std") is not None else None,
        )


DEFAULT_BACKBONES = ("resnet34", "resnet50", "vgg16", "efficientnet_b0", "mobilenet_v2")


@dataclass(frozen=True)
class EnsembleSpec:
    members: Tuple[BackboneSpec, ...] = field(
        default_factory=lambda: tuple(BackboneSpec(name) for name in DEFAULT_BACKBONES)
    )

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ModelError("an ensemble needs at least one member")

    @classmethod
    def of(cls, names: Sequence[str], pretrained: bool = True) -> "EnsembleSpec":
        return cls(tuple(BackboneSpec(n, pretrained) for n in names))

    def to_list(self) -> list:
        return [m.to_dict() for m in self.members]


class TinyTestNet(nn.Module):
    """Two strided 3x3 convolutions with tanh, then global mean and max pooling.

    No ReLU kinks, so finite-difference gradient checks are stable. Max
    pooling keeps small tissue regions visible inside large padded canvases.
    """

    feature_width = 128

    def __init__(self) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 64, kernel_size=3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.tanh(self.conv1(x))
        x = torch.tanh(self.conv2(x))
        return torch.cat([x.mean(dim=(2, 3)), x.amax(dim=(2, 3))], dim=1)


def _tiny(pretrained: bool) -> Tuple[nn.Module, int]:
    if pretrained:
        raise PretrainedWeightsUnavailable("tiny_test_net has no pretrained weights")
    return TinyTestNet(), TinyTestNet.feature_width


def _torchvision(name: str, strip: Callable[[nn.Module], int]) -> BuildFn:
    def build(pretrained: bool) -> Tuple[nn.Module, int]:
        import torchvision

        weights = None
        if pretrained:
            cache = os.environ.get(WEIGHTS_DIR_ENV)
            if cache:
                torch.hub.set_dir(cache)
            weights = "DEFAULT"
        try:
            net = torchvision.models.get_model(name, weights=weights)
        except Exception as exc:  # network, cache or checksum failures
            if not pretrained:
                raise
            raise PretrainedWeightsUnavailable(
                f"pretrained weights for {name} unavailable ({exc}); set {WEIGHTS_DIR_ENV} to a populated cache"
            ) from exc
        return net, strip(net)

    return build


def _strip_fc(net: nn.Module) -> int:
    width = net.fc.in_features
    net.fc = nn.Identity()
    return width


def _strip_last_classifier(net: nn.Module) -> int:
    width = net.classifier[-1].in_features
    net.classifier[-1] = nn.Identity()
    return width


register_backbone("tiny_test_net", BackboneProvider(_tiny, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)))
for _name, _strip in (
    ("resnet34", _strip_fc),
    ("resnet50", _strip_fc),
    ("vgg16", _strip_last_classifier),
    ("efficientnet_b0", _strip_last_classifier),
    ("mobilenet_v2", _strip_last_classifier),
):
    register_backbone(_name, BackboneProvider(_torchvision(_name, _strip)))


class Classifier(nn.Module):
    def __init__(self, spec: BackboneSpec, backbone: nn.Module, feature_width: int, num_classes: int):
        super().__init__()
        self.spec = spec
        self.num_classes = num_classes
        self.backbone = backbone
        self.head = nn.Linear(feature_width, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    def all_trainable(self) -> bool:
        return all(p.requires_grad for p in self.parameters())


def build_classifier(spec: BackboneSpec, num_classes: int = NUM_CLASSES, seed: int = 0) -> Classifier:
    """Realize ``spec`` with a fresh ``num_classes`` head; every parameter is trainable.

    Randomly initialized weights (head, and the backbone when not pretrained)
    depend only on ``seed``.
    """
    if num_classes < 2:
        raise ModelError(f"num_classes must be >= 2, got {num_classes}")
    provider = get_provider(spec.architecture_name)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone, width = provider.build(spec.pretrained)
        clf = Classifier(spec, backbone, width, num_classes)
    for p in clf.parameters():
        p.requires_grad_(True)
    return clf


def images_to_tensor(
    images: Sequence[ImageSample], spec: BackboneSpec, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Stack equally sized images into a normalized ``N x 3 x H x W`` tensor."""
    if not images:
        return torch.zeros((0, 3, 1, 1), dtype=dtype)
    shapes = {im.pixels.shape for im in images}
    if len(shapes) > 1:
        raise ModelError(f"batch mixes image sizes {sorted(s[:2] for s in shapes)}; pad images first")
    arr = np.stack([im.pixels for im in images]).astype(np.float64) / 255.0
    mean = np.asarray(spec.mean).reshape(1, 1, 1, 3)
    std = np.asarray(spec.std).reshape(1, 1, 1, 3)
    arr = (arr - mean) / std
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def forward(classifier: Classifier, batch: Sequence[ImageSample]) -> np.ndarray:
    """Score a batch of same-size images; returns a ``len(batch) x num_classes`` array."""
    if len(batch) == 0:
        return np.zeros((0, classifier.num_classes))
    dtype = next(classifier.parameters()).dtype
    x = images_to_tensor(batch, classifier.spec, dtype)
    was_training = classifier.training
    classifier.eval()
    try:
        with torch.no_grad():
            scores = classifier(x).double().numpy()
    finally:
        classifier.train(was_training)
    if not np.all(np.isfinite(scores)):
        raise ModelError("forward produced non-finite scores")
    return scores


def softmax(scores) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ModelError("softmax input must be finite")
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def parameter_arrays(classifier: nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in classifier.state_dict().items()}


def load_parameter_arrays(classifier: nn.Module, params: Dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v, copy=True)) for k, v in params.items()}
    classifier.load_state_dict(state, strict=True)
