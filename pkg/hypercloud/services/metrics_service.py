"""Pixel-level segmentation scores and the tile-level cloudy decision."""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ..common.constants import Constants
from ..common.errors import EmptyInput, LengthMismatch, ShapeMismatch
from .hypercube_service import ClassMask

MaskLike = Union[ClassMask, np.ndarray]


def _labels(mask: MaskLike) -> np.ndarray:
    return mask.labels if isinstance(mask, ClassMask) else np.asarray(mask)


def _pair(pred: MaskLike, truth: MaskLike) -> Tuple[np.ndarray, np.ndarray]:
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} and truth {t.shape} differ in shape")
    return p, t


def confusion_matrix(pred: MaskLike, truth: MaskLike, num_classes: int = Constants.NUM_CLASSES) -> np.ndarray:
    """Counts indexed [truth class, predicted class]."""
    p, t = _pair(pred, truth)
    flat = t.astype(np.int64).ravel() * num_classes + p.astype(np.int64).ravel()
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _mean_defined(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def dice_from_confusion(cm: np.ndarray) -> Tuple[Optional[float], ...]:
    """Per-class Dice; ``None`` where the class is absent from both masks."""
    scores = []
    for c in range(cm.shape[0]):
        denom = int(cm[:, c].sum() + cm[c, :].sum())
        scores.append(None if denom == 0 else 2.0 * int(cm[c, c]) / denom)
    return tuple(scores)


@dataclass(frozen=True)
class SegScores:
    pixel_accuracy: float
    dice_per_class: Tuple[Optional[float], ...]
    dice_macro: Optional[float]
    # mean of the defined Thin and Thick Cloud Dice values
    dice_cloud: Optional[float]
    pixels: int

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "SegScores":
        total = int(cm.sum())
        if total == 0:
            raise EmptyInput("no pixels to score")
        per_class = dice_from_confusion(cm)
        return cls(
            pixel_accuracy=float(np.trace(cm)) / total,
            dice_per_class=per_class,
            dice_macro=_mean_defined(per_class),
            dice_cloud=_mean_defined([per_class[c] for c in Constants.CLOUD_CLASSES]),
            pixels=total,
        )

    def to_dict(self) -> dict:
        return {
            "pixel_accuracy": self.pixel_accuracy,
            "dice_per_class": list(self.dice_per_class),
            "dice_macro": self.dice_macro,
            "dice_cloud": self.dice_cloud,
            "pixels": self.pixels,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SegScores":
        return cls(
            pixel_accuracy=data["pixel_accuracy"],
            dice_per_class=tuple(data["dice_per_class"]),
            dice_macro=data["dice_macro"],
            dice_cloud=data["dice_cloud"],
            pixels=data["pixels"],
        )


@dataclass(frozen=True)
class ClsScores:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClsScores":
        return cls(**{key: data[key] for key in
                      ("accuracy", "precision", "recall", "f1", "tp", "fp", "tn", "fn")})


def pixel_accuracy(pred: MaskLike, truth: MaskLike) -> float:
    p, t = _pair(pred, truth)
    if p.size == 0:
        raise EmptyInput("no pixels to score")
    return float(np.count_nonzero(p == t)) / p.size


def dice(pred: MaskLike, truth: MaskLike) -> Tuple[Tuple[Optional[float], ...], Optional[float]]:
    """(per-class Dice, macro mean over the classes present in either mask)."""
    per_class = dice_from_confusion(confusion_matrix(pred, truth))
    return per_class, _mean_defined(per_class)


def segmentation_scores(preds: Sequence[MaskLike], truths: Sequence[MaskLike]) -> SegScores:
    """Scores over the pooled pixels of every (pred, truth) pair."""
    if len(preds) != len(truths):
        raise LengthMismatch(f"{len(preds)} predictions for {len(truths)} truth masks")
    if len(preds) == 0:
        raise EmptyInput("no masks to score")
    cm = sum(confusion_matrix(p, t) for p, t in zip(preds, truths))
    return SegScores.from_confusion(cm)


def cloudy_decision(mask: MaskLike, threshold: float = Constants.CLOUDY_THRESHOLD) -> bool:
    """True when Thin + Thick Cloud coverage strictly exceeds ``threshold``."""
    labels = _labels(mask)
    if labels.size == 0:
        return False
    cloud = np.count_nonzero(np.isin(labels, Constants.CLOUD_CLASSES))
    return cloud / labels.size > threshold


def classification_scores(preds: Sequence[bool], truths: Sequence[bool]) -> ClsScores:
    """Confusion-matrix metrics with cloudy as the positive class."""
    if len(preds) != len(truths):
        raise LengthMismatch(f"{len(preds)} predictions for {len(truths)} truths")
    if len(preds) == 0:
        raise LengthMismatch("classification scores need at least one tile")
    p = np.asarray(preds, dtype=bool)
    t = np.asarray(truths, dtype=bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    tn = int(np.count_nonzero(~p & ~t))
    fn = int(np.count_nonzero(~p & t))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClsScores(
        accuracy=(tp + tn) / len(p),
        precision=precision,
        recall=recall,
        f1=f1,
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def evaluate(preds: Sequence[MaskLike], truths: Sequence[MaskLike],
             threshold: float = Constants.CLOUDY_THRESHOLD) -> Tuple[SegScores, ClsScores]:
    """Segmentation scores over pooled pixels plus tile-level cloudy classification."""
    seg = segmentation_scores(preds, truths)
    cls = classification_scores(
        [cloudy_decision(p, threshold) for p in preds],
        [cloudy_decision(t, threshold) for t in truths],
    )
    return seg, cls
