"""Anomaly maps from (input, correction) pairs and max-Dice evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, bilinear_matrix
from .codec import Codec
from .flow import Velocity, correct
from .phantom import LesionCase

log = logging.getLogger(__name__)

NUM_THRESHOLDS = 256
THRESHOLDS = np.arange(NUM_THRESHOLDS, dtype=np.float64) / (NUM_THRESHOLDS - 1)


def _channel_mean_absdiff(a: np.ndarray, b: np.ndarray, latent: bool) -> np.ndarray:
    d = np.abs(a.astype(np.float64) - b.astype(np.float64))
    if latent:
        if d.ndim != 3:
            raise ShapeError(f"anomaly_map: latents must be (C, h, w), got {a.shape}")
        return d.mean(axis=0)
    if d.ndim == 3:
        return d.mean(axis=0)
    if d.ndim != 2:
        raise ShapeError(f"anomaly_map: images must be (H, W) or (C, H, W), got {a.shape}")
    return d


def anomaly_map(x: np.ndarray, x_rec: np.ndarray, y: np.ndarray, y_rec: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Per-pixel score ``0.5 * |x_rec - x| + 0.5 * up(mean_c |y_rec - y|)``, min-max normalised.

    The latent term is averaged over channels and bilinearly upsampled to the
    image grid. A constant map normalises to all zeros. With
    ``normalize=False`` the raw score is returned, which keeps magnitudes
    comparable across images.
    """
    x, x_rec, y, y_rec = (np.asarray(a) for a in (x, x_rec, y, y_rec))
    if x.shape != x_rec.shape:
        raise ShapeError(f"anomaly_map: image shapes {x.shape} and {x_rec.shape} differ")
    if y.shape != y_rec.shape:
        raise ShapeError(f"anomaly_map: latent shapes {y.shape} and {y_rec.shape} differ")
    img = _channel_mean_absdiff(x, x_rec, latent=False)
    lat = _channel_mean_absdiff(y, y_rec, latent=True)
    H, W = img.shape
    if lat.shape != (H, W):
        lat = bilinear_matrix(lat.shape[0], H) @ lat @ bilinear_matrix(lat.shape[1], W).T
    m = 0.5 * img + 0.5 * lat
    if not normalize:
        return m
    lo, hi = m.min(), m.max()
    if not hi > lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """``2TP / (2TP + FP + FN)``; 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    tp = np.count_nonzero(pred & gt)
    denom = np.count_nonzero(pred) + np.count_nonzero(gt)
    return 1.0 if denom == 0 else 2.0 * tp / denom


def max_dice(scores: np.ndarray, gt: np.ndarray) -> tuple[float, float, list[tuple[float, float]]]:
    """Best Dice of ``scores >= thr`` over thresholds ``k / 255``, k = 0..255.

    Returns ``(max_dice, best_threshold, curve)``; ties resolve to the lowest
    threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(gt, dtype=bool)
    if scores.shape != gt.shape:
        raise ShapeError(f"max_dice: scores {scores.shape} and gt {gt.shape} differ")
    pos = np.sort(scores[gt])
    neg = np.sort(scores[~gt])
    # counts of scores >= thr, via the insertion point of thr from the left
    tp = len(pos) - np.searchsorted(pos, THRESHOLDS, side="left")
    fp = len(neg) - np.searchsorted(neg, THRESHOLDS, side="left")
    fn = len(pos) - tp
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(denom == 0, 1.0, 2.0 * tp / np.maximum(denom, 1))
    k = int(np.argmax(d))
    curve = [(float(a), float(b)) for a, b in zip(THRESHOLDS, d)]
    return float(d[k]), float(THRESHOLDS[k]), curve


@dataclass
class AnomalyReport:
    case_id: int
    anomaly_map: np.ndarray | None
    max_dice: float
    best_threshold: float
    dice_curve: list[tuple[float, float]] = field(default_factory=list)
    steps_used: int = 1
    kind: str = ""
    severity: float = float("nan")
    error: str | None = None


@dataclass
class CorrectionResult:
    x: np.ndarray  # (N, H, W) inputs
    x_rec: np.ndarray
    y: np.ndarray  # (N, C, h, w) encoded inputs
    y_rec: np.ndarray


def correct_images(flow: Velocity, codec: Codec, images: np.ndarray, steps: int = 1) -> CorrectionResult:
    """encode -> reverse Euler transport -> decode for a batch of images."""
    x = np.asarray(images, dtype=np.float32)
    y = codec.encode(x)
    y_rec = correct(flow, y, steps)
    return CorrectionResult(x, codec.decode(y_rec), y, y_rec)


def score_case(res: CorrectionResult, i: int, gt: np.ndarray) -> tuple[np.ndarray, float, float, list]:
    amap = anomaly_map(res.x[i], res.x_rec[i], res.y[i], res.y_rec[i])
    md, thr, curve = max_dice(amap, gt)
    return amap, md, thr, curve


@dataclass
class DatasetReport:
    reports: dict[int, list[AnomalyReport]]  # steps -> per-case reports

    def summary(self) -> dict:
        out = {}
        for steps, reps in self.reports.items():
            ok = [r.max_dice for r in reps if r.error is None]
            out[str(steps)] = {
                "n_cases": len(reps),
                "n_failed": len(reps) - len(ok),
                "mean_max_dice": float(np.mean(ok)) if ok else math.nan,
                "median_max_dice": float(np.median(ok)) if ok else math.nan,
            }
        return out

    def mean(self, steps: int) -> float:
        return self.summary()[str(steps)]["mean_max_dice"]

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "cases.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "kind", "severity", "steps", "max_dice", "best_threshold", "error"])
            for steps, reps in self.reports.items():
                for r in reps:
                    w.writerow(
                        [r.case_id, r.kind, f"{r.severity:.6f}", steps, f"{r.max_dice:.6f}", f"{r.best_threshold:.6f}", r.error or ""]
                    )
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def evaluate_dataset(
    flow: Velocity,
    codec: Codec,
    cases: Sequence[LesionCase],
    steps: Sequence[int] = (1, 5),
    keep_maps: bool = False,
    out_dir: str | Path | None = None,
    chunk: int = 64,
) -> DatasetReport:
    """Score every case for each step count; a failing case is recorded and skipped.

    Cases are processed in chunks; if a chunk fails as a whole, its cases are
    retried one at a time so only the offending ones are marked failed.
    """
    reports: dict[int, list[AnomalyReport]] = {}
    for n_steps in steps:
        reps: list[AnomalyReport] = []
        for start in range(0, len(cases), chunk):
            batch = list(enumerate(cases[start : start + chunk], start))
            try:
                res = correct_images(flow, codec, np.stack([c.image for c in cases[start : start + chunk]]), n_steps)
                results = [(i, c, res, i - start) for i, c in batch]
            except Exception:  # noqa: BLE001 - fall back to per-case isolation
                results = []
                for i, c in batch:
                    try:
                        results.append((i, c, correct_images(flow, codec, c.image[None], n_steps), 0))
                    except Exception as exc:  # noqa: BLE001
                        log.warning("case %d failed: %s", i, exc)
                        results.append((i, c, exc, 0))
            for i, c, res, j in results:
                if isinstance(res, Exception):
                    reps.append(AnomalyReport(i, None, math.nan, math.nan, [], n_steps, c.kind, c.severity, repr(res)))
                    continue
                try:
                    amap, md, thr, curve = score_case(res, j, c.gt_mask)
                except Exception as exc:  # noqa: BLE001
                    log.warning("case %d failed: %s", i, exc)
                    reps.append(AnomalyReport(i, None, math.nan, math.nan, [], n_steps, c.kind, c.severity, repr(exc)))
                    continue
                reps.append(AnomalyReport(i, amap if keep_maps else None, md, thr, curve, n_steps, c.kind, c.severity))
        reports[n_steps] = reps
    report = DatasetReport(reports)
    if out_dir is not None:
        report.write(out_dir)
    return report
