"""Box/mask evaluation battery for single-class instance segmentation:
IoU, greedy confidence-ordered matching, precision/recall, F-beta, AP@0.5
with all-point interpolation, and dataset-level instance IoU.

Boxes are half-open pixel rectangles (x_min, y_min, x_max, y_max); masks are
boolean rasters.  Matching is PASCAL-style: detections in confidence order
each claim the unmatched ground truth with the highest IoU at or above the
threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Box = tuple[int, int, int, int]


class EvalError(ValueError):
    """Invalid inputs to the metric suite."""


@dataclass
class Detection:
    """One predicted instance."""

    mask: np.ndarray
    box: Box
    confidence: float
    image_id: str = ""

    def __post_init__(self):
        if not np.isfinite(self.confidence):
            raise EvalError("detection confidence must be finite")


@dataclass
class GroundTruth:
    """One ground-truth instance (mask + tight box)."""

    mask: np.ndarray
    box: Box
    image_id: str = ""


@dataclass
class MatchResult:
    matches: list[tuple[int, int, float]]  # (detection idx, gt idx, iou)
    unmatched_dets: list[int]              # false positives
    unmatched_gts: list[int]               # false negatives


def iou_box(a: Box, b: Box) -> float:
    """Intersection over union of two half-open boxes."""
    for box in (a, b):
        if box[0] >= box[2] or box[1] >= box[3]:
            raise EvalError(f"malformed box {box}: min must be < max")
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def iou_mask(a: np.ndarray, b: np.ndarray) -> float:
    """Pixelwise intersection over union of two same-shape binary masks."""
    if a.shape != b.shape:
        raise EvalError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise EvalError("IoU of two empty masks is undefined")
    return float(np.logical_and(a, b).sum() / union)


def box_iou_fn(d, g) -> float:
    return iou_box(d.box, g.box)


def mask_iou_fn(d, g) -> float:
    return iou_mask(d.mask, g.mask)


def match_detections(dets: Sequence, gts: Sequence,
                     iou_fn: Callable = box_iou_fn,
                     threshold: float = 0.5) -> MatchResult:
    """Greedy matching: detections in confidence order (ties keep input
    order) each claim the unmatched gt with the highest IoU >= threshold;
    IoU ties break toward the lower gt index."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    taken = [False] * len(gts)
    matches: list[tuple[int, int, float]] = []
    unmatched_dets: list[int] = []
    for di in order:
        best_iou, best_gi = 0.0, -1
        for gi in range(len(gts)):
            if taken[gi]:
                continue
            iou = iou_fn(dets[di], gts[gi])
            if iou > best_iou:
                best_iou, best_gi = iou, gi
        if best_gi >= 0 and best_iou >= threshold:
            taken[best_gi] = True
            matches.append((di, best_gi, best_iou))
        else:
            unmatched_dets.append(di)
    unmatched_gts = [gi for gi, t in enumerate(taken) if not t]
    return MatchResult(matches, unmatched_dets, unmatched_gts)


def f_beta(p: float, r: float, beta: float = 1.0) -> float:
    """Weighted harmonic mean of precision and recall; 0 when P + R == 0."""
    if beta <= 0:
        raise EvalError("beta must be positive")
    if p + r == 0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * p * r / (b2 * p + r)


def dataset_iou(tp: int, fp: int, fn: int) -> float:
    """Jaccard index over matched/unmatched instance counts: tp/(tp+fp+fn).

    Equals F1/(2-F1) exactly for any count triple.
    """
    if tp < 0 or fp < 0 or fn < 0:
        raise EvalError("counts must be non-negative")
    denom = tp + fp + fn
    if denom == 0:
        raise EvalError("dataset_iou undefined for all-zero counts")
    return tp / denom


def average_precision(dets_by_image: dict[str, Sequence],
                      gts_by_image: dict[str, Sequence],
                      iou_fn: Callable = box_iou_fn,
                      threshold: float = 0.5,
                      return_curve: bool = False):
    """AP@threshold across a dataset (single class).

    All detections are sorted by confidence descending; each is a TP if it
    claims a still-unmatched gt of its image at IoU >= threshold (highest
    IoU, ties to the lower gt index), otherwise an FP.  AP is the exact area
    under the non-increasing precision envelope of the resulting PR curve
    (all-point interpolation); the recall denominator is the total gt count.
    """
    total_gt = sum(len(g) for g in gts_by_image.values())
    if total_gt == 0:
        raise EvalError("average_precision undefined with zero ground truths")
    entries = []  # (confidence, tie order, image, det)
    pos = 0
    for img, dets in dets_by_image.items():
        for d in dets:
            entries.append((-d.confidence, pos, img, d))
            pos += 1
    entries.sort(key=lambda e: (e[0], e[1]))

    taken: dict[str, list[bool]] = {img: [False] * len(g)
                                    for img, g in gts_by_image.items()}
    tps = []
    for _, _, img, d in entries:
        gts = gts_by_image.get(img, ())
        flags = taken.get(img, [])
        best_iou, best_gi = 0.0, -1
        for gi in range(len(gts)):
            if flags[gi]:
                continue
            iou = iou_fn(d, gts[gi])
            if iou > best_iou:
                best_iou, best_gi = iou, gi
        if best_gi >= 0 and best_iou >= threshold:
            flags[best_gi] = True
            tps.append(1.0)
        else:
            tps.append(0.0)

    tp_cum = np.cumsum(tps)
    ranks = np.arange(1, len(tps) + 1)
    recalls = tp_cum / total_gt
    precisions = tp_cum / ranks

    # non-increasing envelope, then exact area via recall increments
    r = np.concatenate(([0.0], recalls))
    p = np.concatenate(([1.0], precisions))
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    ap = float(np.sum((r[1:] - r[:-1]) * p[1:]))
    if return_curve:
        return ap, recalls, precisions
    return ap


@dataclass
class MetricBlock:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    ap50: float = 0.0
    dataset_iou: float = 0.0
    degenerate: bool = False  # true when tp+fp or tp+fn was zero

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall,
            "f1": self.f1, "ap50": self.ap50,
            "dataset_iou": self.dataset_iou, "degenerate": self.degenerate,
        }


@dataclass
class EvalReport:
    box: MetricBlock
    mask: MetricBlock
    pixel_precision: float
    pixel_recall: float
    config: dict = field(default_factory=dict)
    box_curve: tuple = field(default=(), repr=False)
    mask_curve: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "box": self.box.to_dict(),
            "mask": self.mask.to_dict(),
            "pixel_precision": self.pixel_precision,
            "pixel_recall": self.pixel_recall,
            "config": self.config,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def csv_rows(self) -> list[str]:
        """Rows in the Precision, Recall, mAP_0.5, F1-Score, IoU column order."""
        lines = ["block,Precision,Recall,mAP_0.5,F1-Score,IoU"]
        for name, blk in (("box", self.box), ("mask", self.mask)):
            lines.append(f"{name},{blk.precision:.6f},{blk.recall:.6f},"
                         f"{blk.ap50:.6f},{blk.f1:.6f},{blk.dataset_iou:.6f}")
        return lines


def _block_from_counts(tp: int, fp: int, fn: int, ap: float) -> MetricBlock:
    degenerate = (tp + fp == 0) or (tp + fn == 0)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return MetricBlock(
        tp=tp, fp=fp, fn=fn, precision=precision, recall=recall,
        f1=f_beta(precision, recall, 1.0), ap50=ap,
        dataset_iou=dataset_iou(tp, fp, fn) if tp + fp + fn > 0 else 0.0,
        degenerate=degenerate)


def evaluate(dets_by_image: dict[str, Sequence],
             gts_by_image: dict[str, Sequence],
             tau_iou: float = 0.5,
             config: dict | None = None) -> EvalReport:
    """Run the full metric battery: instance matching twice (box IoU and
    mask IoU), plus pixel-level precision/recall of the union prediction
    masks against the union ground-truth masks."""
    if set(dets_by_image) != set(gts_by_image):
        missing = sorted(set(dets_by_image) ^ set(gts_by_image))
        raise EvalError(f"prediction/ground-truth image sets differ: {missing}")

    blocks = {}
    curves = {}
    for name, iou_fn in (("box", box_iou_fn), ("mask", mask_iou_fn)):
        tp = fp = fn = 0
        for img in sorted(gts_by_image):
            m = match_detections(dets_by_image[img], gts_by_image[img],
                                 iou_fn, tau_iou)
            tp += len(m.matches)
            fp += len(m.unmatched_dets)
            fn += len(m.unmatched_gts)
        ap, rc, pc = average_precision(dets_by_image, gts_by_image, iou_fn,
                                       tau_iou, return_curve=True)
        blocks[name] = _block_from_counts(tp, fp, fn, ap)
        curves[name] = (rc, pc)

    pix_tp = pix_fp = pix_fn = 0
    for img in sorted(gts_by_image):
        pred = _union_mask(dets_by_image[img])
        gt = _union_mask(gts_by_image[img])
        if pred is None and gt is None:
            continue
        if pred is None:
            pix_fn += int(gt.sum())
            continue
        if gt is None:
            pix_fp += int(pred.sum())
            continue
        pix_tp += int(np.logical_and(pred, gt).sum())
        pix_fp += int(np.logical_and(pred, ~gt).sum())
        pix_fn += int(np.logical_and(~pred, gt).sum())

    return EvalReport(
        box=blocks["box"], mask=blocks["mask"],
        pixel_precision=pix_tp / (pix_tp + pix_fp) if pix_tp + pix_fp > 0 else 0.0,
        pixel_recall=pix_tp / (pix_tp + pix_fn) if pix_tp + pix_fn > 0 else 0.0,
        config=config or {},
        box_curve=curves["box"], mask_curve=curves["mask"])


def _union_mask(items: Sequence) -> np.ndarray | None:
    masks = [it.mask for it in items]
    if not masks:
        return None
    out = np.zeros_like(masks[0], dtype=bool)
    for m in masks:
        out |= m.astype(bool)
    return out
