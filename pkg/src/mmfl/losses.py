"""Contrastive and classification losses, the local objective, and F1 metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autograd import Tensor, apply, l2_normalize
from .errors import BatchTooSmall, InvalidSpec, NonBinaryLabel, ShapeMismatch
from .models import Backbone, Classifier, FusionLayout, ModalityId, Trunk, classify, pseudo_fuse


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.5
    ntx_weight: float = 1.0
    label_threshold: float = 0.5
    ntxent_standard: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise InvalidSpec(f"tau must be positive, got {self.tau}")
        if self.ntx_weight < 0:
            raise InvalidSpec(f"ntx_weight must be non-negative, got {self.ntx_weight}")
        if not 0 < self.label_threshold < 1:
            raise InvalidSpec(f"label_threshold must lie in (0, 1), got {self.label_threshold}")


def ntxent_loss(local_feats: Tensor, global_feats: Tensor, tau: float = 0.5, standard: bool = False) -> Tensor:
    """NT-Xent summed over the batch.

    Row z of ``local_feats`` is pulled towards row z of ``global_feats`` and
    contrasted against the other rows t != z. The positive pair is left out of
    the denominator unless ``standard`` is set, so the loss can go negative.
    """
    if local_feats.shape != global_feats.shape or local_feats.ndim != 2:
        raise ShapeMismatch(f"feature shapes differ: {local_feats.shape} vs {global_feats.shape}")
    b = local_feats.shape[0]
    if b < 2:
        raise BatchTooSmall("NT-Xent needs at least two samples per batch")
    if tau <= 0:
        raise InvalidSpec("tau must be positive")
    dtype = local_feats.dtype
    sims = (l2_normalize(local_feats) @ l2_normalize(global_feats).T) * (1.0 / tau)
    eye = np.eye(b, dtype=dtype)
    positives = (sims * Tensor(eye)).sum(axis=1)
    # cosine <= 1, so shifting by 1/tau keeps every exponent <= 0
    shifted = (sims - Tensor(np.asarray(1.0 / tau, dtype=dtype))).exp()
    mask = np.ones((b, b), dtype=dtype) if standard else 1 - eye
    log_den = (shifted * Tensor(mask)).sum(axis=1).log() + Tensor(np.asarray(1.0 / tau, dtype=dtype))
    return (log_den - positives).sum()


def _check_labels(labels: np.ndarray) -> None:
    if not np.isin(labels, (0, 1)).all():
        raise NonBinaryLabel("labels must be 0/1")


def bce_loss(logits: Tensor, labels) -> Tensor:
    """Mean over samples of the per-sample sum of label-wise BCE, from logits."""
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if y.shape != logits.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {y.shape}")
    _check_labels(y)
    elem = apply("bce_with_logits", [logits, Tensor(y.astype(logits.dtype))])
    return elem.sum(axis=1).mean()


def local_objective(
    encoder: Backbone,
    classifier: Classifier,
    images,
    labels,
    modality: ModalityId,
    layout: FusionLayout,
    frozen_trunks: Mapping[int, Trunk],
    cfg: LossConfig = LossConfig(),
) -> tuple[Tensor, dict[str, float]]:
    """Batch objective for one client: weighted NT-Xent plus BCE.

    NT-Xent is computed against every frozen trunk in ``frozen_trunks`` and
    averaged; an empty mapping or ``ntx_weight == 0`` drops the term entirely.
    Both terms are per-sample averages so their balance does not depend on
    the batch size.
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    n = x.shape[0]
    h = encoder.stem(x, "train")
    feats = encoder.trunk(h, "train")
    logits = classify(classifier, pseudo_fuse(feats, modality, layout))
    bce = bce_loss(logits, labels)
    parts = {"bce": float(bce.data), "ntx": 0.0}
    total = bce
    if frozen_trunks and cfg.ntx_weight > 0:
        ntx = None
        for m in sorted(frozen_trunks):
            other = frozen_trunks[m](h, "batch", frozen=True)
            term = ntxent_loss(feats, other, cfg.tau, cfg.ntxent_standard)
            ntx = term if ntx is None else ntx + term
        ntx = ntx * (1.0 / (n * len(frozen_trunks)))
        parts["ntx"] = float(ntx.data)
        total = ntx * cfg.ntx_weight + bce
    parts["total"] = float(total.data)
    return total, parts


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    micro_f1: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    per_label_f1: list[float]
    n_samples: int
    loss: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "precision": list(self.precision),
            "recall": list(self.recall),
            "per_label_f1": list(self.per_label_f1),
            "n_samples": self.n_samples,
            "loss": dict(self.loss),
        }


def _ratio(num, den, empty):
    return float(num / den) if den > 0 else empty


def f1_scores(probs, labels, threshold: float = 0.5) -> MetricsReport:
    """Micro and macro F1 after binarizing ``probs`` at ``threshold``.

    A label with no positives and no positive predictions scores F1 = 1
    (likewise precision and recall), since nothing was missed or invented.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeMismatch(f"probs {p.shape} vs labels {y.shape}")
    _check_labels(y)
    pred = p >= threshold
    truth = y.astype(bool)
    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    per_f1, prec, rec = [], [], []
    for k in range(y.shape[1]):
        clean = 1.0 if fp[k] == 0 and fn[k] == 0 else 0.0
        per_f1.append(_ratio(2 * tp[k], 2 * tp[k] + fp[k] + fn[k], clean))
        prec.append(_ratio(tp[k], tp[k] + fp[k], clean))
        rec.append(_ratio(tp[k], tp[k] + fn[k], clean))
    TP, FP, FN = tp.sum(), fp.sum(), fn.sum()
    micro = _ratio(2 * TP, 2 * TP + FP + FN, 1.0)
    return MetricsReport(
        micro_f1=micro,
        macro_f1=float(np.mean(per_f1)) if per_f1 else 1.0,
        precision=prec,
        recall=rec,
        per_label_f1=per_f1,
        n_samples=int(y.shape[0]),
    )
