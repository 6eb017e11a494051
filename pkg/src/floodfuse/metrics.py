"""Reconstruction and segmentation metrics, per-tile and aggregated."""

from __future__ import annotations

import math
import shlex
import subprocess
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .losses import ssim as _ssim

PSNR_INF = float("inf")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class SegScores:
    iou: float
    dice: float
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    degenerate: bool = False


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def psnr(y_hat, y) -> float:
    """10 log10(1 / MSE) for unit-range images; +inf when the images are identical."""
    mse = float(((_as_tensor(y_hat).double() - _as_tensor(y).double()) ** 2).mean())
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def ssim_metric(y_hat, y) -> float:
    a, b = _as_tensor(y_hat).double(), _as_tensor(y).double()
    while a.dim() < 4:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    return float(_ssim(a, b))


def confusion(m_hat, m, threshold: float = 0.5) -> ConfusionCounts:
    pred = np.asarray(_as_tensor(m_hat).detach().cpu()) >= threshold
    truth = np.asarray(_as_tensor(m).detach().cpu()) >= 0.5
    return ConfusionCounts(
        tp=int(np.sum(pred & truth)),
        fp=int(np.sum(pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
        tn=int(np.sum(~pred & ~truth)),
    )


def scores_from_counts(c: ConfusionCounts) -> SegScores:
    degenerate = False

    def ratio(num, den, empty_value):
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return empty_value
        return num / den

    # no positives anywhere: overlap is perfect by convention
    overlap_empty = 1.0 if c.tp + c.fp + c.fn == 0 else 0.0
    iou = ratio(c.tp, c.tp + c.fp + c.fn, overlap_empty)
    dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, overlap_empty)
    precision = ratio(c.tp, c.tp + c.fp, 0.0)
    recall = ratio(c.tp, c.tp + c.fn, 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return SegScores(iou, dice, precision, recall, f1, c, degenerate)


def seg_scores(m_hat, m, threshold: float = 0.5) -> SegScores:
    return scores_from_counts(confusion(m_hat, m, threshold))


METRIC_KEYS = ("psnr", "ssim", "iou", "dice", "precision", "recall", "f1")


def tile_record(y_hat, y, m_hat, m, threshold: float = 0.5, tile_id: str = "") -> dict:
    s = seg_scores(m_hat, m, threshold)
    return {
        "id": tile_id,
        "psnr": psnr(y_hat, y),
        "ssim": ssim_metric(y_hat, y),
        "iou": s.iou,
        "dice": s.dice,
        "precision": s.precision,
        "recall": s.recall,
        "f1": s.f1,
        "degenerate": s.degenerate,
        **asdict(s.counts),
    }


def aggregate(per_tile: list[dict]) -> dict:
    """Per-tile means (headline numbers) plus pooled confusion counts and pooled scores."""
    if not per_tile:
        raise ValueError("no tiles to aggregate")
    summary = {"tiles": len(per_tile)}
    for key in METRIC_KEYS + ("lpips",):
        vals = [r[key] for r in per_tile if r.get(key) is not None]
        if vals:
            summary[key] = float(np.mean(vals))
    pooled = ConfusionCounts(0, 0, 0, 0)
    for r in per_tile:
        pooled = pooled + ConfusionCounts(r["tp"], r["fp"], r["fn"], r["tn"])
    ps = scores_from_counts(pooled)
    summary["pooled"] = {
        **asdict(pooled),
        "iou": ps.iou,
        "dice": ps.dice,
        "precision": ps.precision,
        "recall": ps.recall,
        "f1": ps.f1,
    }
    return summary


def external_perceptual(command: str, path_a: str, path_b: str, timeout: float = 120.0) -> float | None:
    """Run a user-supplied scorer ``command A.png B.png`` and parse the float it prints.

    Returns None when no command is configured.
    """
    if not command:
        return None
    argv = shlex.split(command) + [path_a, path_b]
    res = subprocess.run(argv, capture_output=True, text=True, timeout=timeout, check=True)
    return float(res.stdout.strip().split()[-1])
