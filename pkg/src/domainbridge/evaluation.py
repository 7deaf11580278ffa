"""Segmentation metrics, pseudo-label coverage and translation diversity."""

from __future__ import annotations

import csv
import itertools
import os
from dataclasses import dataclass

import numpy as np
import torch

from domainbridge import IGNORE_INDEX
from domainbridge.wpl import PseudoLabelState


class ConfusionMatrix:
    """Q x Q pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, class_count: int, counts: np.ndarray | None = None):
        self.class_count = class_count
        self.counts = np.zeros((class_count, class_count), dtype=np.int64) if counts is None else counts

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.class_count != self.class_count:
            raise ValueError("class counts differ")
        return ConfusionMatrix(self.class_count, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(pred, gt, cm: ConfusionMatrix) -> ConfusionMatrix:
    """Add every non-ignored pixel of (pred, gt) to ``cm`` (in place) and return it."""
    pred = np.asarray(pred.cpu() if isinstance(pred, torch.Tensor) else pred).astype(np.int64)
    gt = np.asarray(gt.cpu() if isinstance(gt, torch.Tensor) else gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {gt.shape}")
    q = cm.class_count
    valid = gt != IGNORE_INDEX
    if (gt[valid] >= q).any() or (gt[valid] < 0).any():
        raise ValueError("label value out of range")
    if (pred[valid] >= q).any() or (pred[valid] < 0).any():
        raise ValueError("predicted class out of range")
    cm.counts += np.bincount(q * gt[valid] + pred[valid], minlength=q * q).reshape(q, q)
    return cm


@dataclass
class EvalReport:
    iou: np.ndarray  # NaN where the class never occurs in prediction or ground truth
    miou: float  # undefined classes count as zero
    miou_present: float  # mean over classes with nonzero union
    pixel_accuracy: float
    class_names: list[str]

    def csv_header(self) -> list[str]:
        return ["mIoU"] + list(self.class_names) + ["mIoU_present", "pixel_accuracy"]

    def csv_row(self) -> list[str]:
        ious = ["" if np.isnan(v) else f"{v:.6f}" for v in self.iou]
        return [f"{self.miou:.6f}"] + ious + [f"{self.miou_present:.6f}", f"{self.pixel_accuracy:.6f}"]

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(self.csv_header())
            w.writerow(self.csv_row())


def evaluate_miou(cm: ConfusionMatrix, class_names: list[str] | None = None) -> EvalReport:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    c = cm.counts.astype(np.float64)
    inter = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), np.nan)
    present = ~np.isnan(iou)
    names = class_names or [f"class_{i}" for i in range(cm.class_count)]
    return EvalReport(
        iou=iou,
        miou=float(np.where(present, iou, 0.0).mean()),
        miou_present=float(iou[present].mean()),
        pixel_accuracy=float(inter.sum() / c.sum()),
        class_names=list(names),
    )


def pseudo_label_coverage(state: PseudoLabelState) -> float:
    """Fraction of pixels carrying a pseudo-label."""
    return state.coverage


def style_diversity(translator, images: torch.Tensor, n_styles: int,
                    generator: torch.Generator | None = None, styles: torch.Tensor | None = None) -> float:
    """Mean pairwise L1 distance between translations of the same image under different styles.

    ``styles`` (n_styles, s) may be given explicitly; otherwise they are
    drawn from the prior with ``generator``.
    """
    from domainbridge.i2i.translator import apply_translator

    if n_styles < 2:
        raise ValueError("need at least two styles")
    if styles is None:
        styles = torch.randn(n_styles, translator.spec.style_dim, generator=generator)
    outs = []
    for s in styles[:n_styles]:
        outs.append(apply_translator(translator, images, s[None].expand(images.shape[0], -1)))
    pair_d = [(outs[i] - outs[j]).abs().flatten(1).mean(dim=1)
              for i, j in itertools.combinations(range(n_styles), 2)]
    return float(torch.stack(pair_d).mean(dim=0).mean())


def predict_labels(model, images: np.ndarray | torch.Tensor, batch_size: int = 32) -> np.ndarray:
    """Argmax predictions (N, H, W) for (N, H, W, 3) images."""
    from domainbridge.segmentation import predict_probs

    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images).permute(0, 3, 1, 2)
    preds = []
    for i in range(0, images.shape[0], batch_size):
        preds.append(predict_probs(model, images[i:i + batch_size].float()).argmax(dim=1))
    return torch.cat(preds).numpy()


def evaluate_model(model, images: np.ndarray, labels: np.ndarray, class_names: list[str],
                   batch_size: int = 32) -> EvalReport:
    cm = ConfusionMatrix(len(class_names))
    accumulate_confusion(predict_labels(model, images, batch_size), labels, cm)
    return evaluate_miou(cm, class_names)
