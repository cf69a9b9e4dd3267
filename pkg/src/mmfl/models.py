"""Modality backbones, the shared classifier and the fusion plumbing between them.

A backbone is split into a modality-shaped *stem* (conv -> relu -> pool ->
flatten -> normalizer) and a *trunk* whose architecture is identical across
modalities. Because every stem emits the same width, any modality's trunk can
consume any other modality's stem output, which is what the cross-model
forward relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor, apply, concat, no_grad, sigmoid
from .errors import InvalidSpec, MissingModality, ShapeMismatch, UnknownModality
from .layers import Conv2dLayer, Dense, Module, make_norm


@dataclass(frozen=True)
class ModalityId:
    index: int
    name: str
    in_channels: int


@dataclass(frozen=True)
class FusionLayout:
    """Slot order of the fused feature vector."""

    order: tuple[ModalityId, ...]
    feature_dim: int

    def __post_init__(self):
        idx = [m.index for m in self.order]
        if sorted(idx) != list(range(len(idx))):
            raise InvalidSpec(f"modality indices must be dense and unique, got {idx}")

    @property
    def P(self) -> int:
        return len(self.order)

    @property
    def fused_dim(self) -> int:
        return self.P * self.feature_dim

    def slot(self, m: ModalityId | int) -> int:
        index = m.index if isinstance(m, ModalityId) else int(m)
        for pos, mod in enumerate(self.order):
            if mod.index == index:
                return pos
        raise UnknownModality(f"modality {index} not in layout")


@dataclass(frozen=True)
class ModelConfig:
    stem_channels: int = 8
    kernel: int = 3
    pool_to: int = 2
    hidden_dim: int = 32
    feature_dim: int = 16
    norm: str = "bw"
    norm_eps: float = 1e-5
    norm_momentum: float = 0.1
    whitening: str = "zca"
    # positions that get the whitening layer when norm == "bw"; the rest use batch norm
    whiten_at: tuple[str, ...] = ("stem", "hidden", "feature")

    def __post_init__(self):
        object.__setattr__(self, "whiten_at", tuple(self.whiten_at))
        unknown = set(self.whiten_at) - set(NORM_SITES)
        if unknown:
            raise InvalidSpec(f"unknown whitening sites {sorted(unknown)}")

    def trunk_in(self) -> int:
        return self.stem_channels * self.pool_to ** 2

    def norm_at(self, site: str, dim: int):
        kind = self.norm if self.norm != "bw" or site in self.whiten_at else "bn"
        return make_norm(kind, dim, self.norm_eps, self.norm_momentum, self.whitening)


NORM_SITES = ("stem", "hidden", "feature")


class Stem(Module):
    def __init__(self, in_channels: int, image_size: int, cfg: ModelConfig, rng):
        super().__init__()
        if image_size % cfg.pool_to:
            raise InvalidSpec(f"image size {image_size} not divisible by pool_to={cfg.pool_to}")
        self.in_channels = in_channels
        self.pool = image_size // cfg.pool_to
        self.conv = Conv2dLayer(in_channels, cfg.stem_channels, cfg.kernel, rng=rng)
        self.norm = cfg.norm_at("stem", cfg.trunk_in())

    def __call__(self, images: Tensor, mode: str = "train") -> Tensor:
        if images.ndim != 4 or images.shape[1] != self.in_channels:
            raise ShapeMismatch(f"stem expects (n, {self.in_channels}, h, w), got {images.shape}")
        h = self.conv(images).relu()
        h = apply("avg_pool2d", [h], size=self.pool)
        h = h.reshape(h.shape[0], -1)
        return self.norm(h, mode)


class Trunk(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.in_dim = cfg.trunk_in()
        self.fc1 = Dense(self.in_dim, cfg.hidden_dim, rng=rng)
        self.norm1 = cfg.norm_at("hidden", cfg.hidden_dim)
        self.fc2 = Dense(cfg.hidden_dim, cfg.feature_dim, rng=rng)
        self.norm2 = cfg.norm_at("feature", cfg.feature_dim)

    def __call__(self, x: Tensor, mode: str = "train", frozen: bool = False) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"trunk expects (n, {self.in_dim}), got {x.shape}")
        h = self.norm1(self.fc1(x, frozen), mode, frozen).relu()
        return self.norm2(self.fc2(h, frozen), mode, frozen).relu()


class Backbone(Module):
    def __init__(self, modality: ModalityId, image_size: int, cfg: ModelConfig = ModelConfig(), seed=0):
        super().__init__()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.modality = modality
        self.stem = Stem(modality.in_channels, image_size, cfg, rng)
        self.trunk = Trunk(cfg, rng)

    def __call__(self, images: Tensor, mode: str = "train") -> Tensor:
        return backbone_forward(self, images, mode)


class Classifier(Module):
    def __init__(self, in_dim: int, n_labels: int, seed=0):
        super().__init__()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.fc = Dense(in_dim, n_labels, activation=None, rng=rng)

    @property
    def in_dim(self) -> int:
        return self.fc.weight.shape[0]

    def __call__(self, fused: Tensor) -> Tensor:
        return classify(self, fused)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def backbone_forward(b: Backbone, images, mode: str = "train") -> Tensor:
    """Stem then trunk; returns one feature row per image."""
    return b.trunk(b.stem(_as_tensor(images), mode), mode)


def cross_model_forward(local: Backbone, global_trunk: Trunk, images, mode: str = "batch") -> Tensor:
    """Run the local stem, then a frozen global trunk on its output.

    Gradients reach the local stem; the global trunk's parameters are
    detached so they never receive any. The default ``batch`` mode whitens
    with the current batch statistics and leaves all running estimates
    untouched.
    """
    h = local.stem(_as_tensor(images), "eval" if mode == "eval" else "batch")
    if h.shape[1] != global_trunk.in_dim:
        raise ShapeMismatch(f"stem width {h.shape[1]} does not fit trunk input {global_trunk.in_dim}")
    return global_trunk(h, mode, frozen=True)


def pseudo_fuse(features: Tensor, m: ModalityId | int, layout: FusionLayout) -> Tensor:
    """Place ``features`` in modality m's slot and zeros everywhere else."""
    pos = layout.slot(m)
    if features.ndim != 2 or features.shape[1] != layout.feature_dim:
        raise ShapeMismatch(f"features {features.shape} do not match feature dim {layout.feature_dim}")
    n = features.shape[0]
    parts = []
    if pos > 0:
        parts.append(Tensor(np.zeros((n, pos * layout.feature_dim), dtype=features.dtype)))
    parts.append(features)
    if pos < layout.P - 1:
        parts.append(Tensor(np.zeros((n, (layout.P - 1 - pos) * layout.feature_dim), dtype=features.dtype)))
    return concat(parts) if len(parts) > 1 else features


def classify(c: Classifier, fused: Tensor) -> Tensor:
    """Pre-sigmoid logits, one column per label."""
    if fused.ndim != 2 or fused.shape[1] != c.in_dim:
        raise ShapeMismatch(f"classifier expects (n, {c.in_dim}), got {fused.shape}")
    return c.fc(fused)


@dataclass
class FusedModel:
    """Every modality backbone plus the common classifier, in layout order."""

    layout: FusionLayout
    backbones: list[Backbone]
    classifier: Classifier = field(repr=False)


def full_fusion_inference(model, images: Sequence) -> np.ndarray:
    """Concatenate all modality features, classify, squash to probabilities.

    ``model`` is a :class:`FusedModel` or anything with a ``materialize()``
    method returning one. ``images`` holds one batch per modality, indexed by
    modality index.
    """
    if not isinstance(model, FusedModel):
        model = model.materialize()
    layout = model.layout
    if len(images) != layout.P or any(x is None for x in images):
        raise MissingModality(f"need images for all {layout.P} modalities")
    with no_grad():
        feats = []
        for mod in layout.order:
            backbone = model.backbones[mod.index]
            feats.append(backbone_forward(backbone, images[mod.index], "eval"))
        fused = concat(feats) if len(feats) > 1 else feats[0]
        return sigmoid(classify(model.classifier, fused)).data
