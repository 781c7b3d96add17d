"""Scalar evaluation metrics: APE, PCDP, PCK, cm-deg pose accuracy, tracking.

All metrics are pure float64 functions, permutation-invariant over their
inputs, and aggregate in fixed index order for bit-reproducibility. APE and
PCDP normalize by the shortest image edge and are reported in percent; PCDP
uses a strict `<` threshold while PCK uses an inclusive `<=` (each matches
its source convention). Tracking follows TAP-Vid conventions: thresholds
{1, 2, 4, 8, 16} px at a 256x256 evaluation resolution, strict `<` distance
test, and occlusion accuracy over all (point, frame) entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .geometry import CorrespondenceSet, rotation_error_deg

PCDP_DELTAS = (0.05, 0.10, 0.20)
PCK_ALPHAS = (0.05, 0.10, 0.15)
POSE_THRESHOLDS = ((1.0, 1.0), (3.0, 3.0), (5.0, 5.0))
TRACKING_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)


@dataclass
class EquivarianceReport:
    ape_percent: float
    pcdp: dict[float, float]
    pair_count: int

    def to_dict(self) -> dict:
        return {
            "ape": self.ape_percent,
            "pcdp": {f"{d:.2f}": v for d, v in sorted(self.pcdp.items())},
            "pair_count": self.pair_count,
        }


@dataclass
class PoseAccuracyReport:
    acc: dict[tuple[float, float], float]
    n_frames: int

    def to_dict(self) -> dict:
        return {
            "acc": {f"{int(c)}cm-{int(d)}deg": v for (c, d), v in sorted(self.acc.items())},
            "n_frames": self.n_frames,
        }


@dataclass
class TrackingReport:
    aj: float
    delta_avg: float
    oa: float

    def to_dict(self) -> dict:
        return {"aj": self.aj, "delta_avg": self.delta_avg, "oa": self.oa}


def _pair_errors(gt: CorrespondenceSet, pred) -> np.ndarray:
    predicted = np.asarray([np.asarray(p.position, dtype=np.float64) for p in pred])
    if predicted.shape[0] != len(gt):
        raise ConfigurationError(
            f"{predicted.shape[0]} predictions for {len(gt)} ground-truth pairs"
        )
    return np.linalg.norm(gt.x2 - predicted.reshape(-1, 2), axis=1)


def ape(gt: CorrespondenceSet, pred) -> float:
    """Average pixel error, percent of the shortest image edge."""
    if len(gt) == 0:
        raise ConfigurationError("APE over an empty correspondence set")
    err = _pair_errors(gt, pred)
    return float(np.mean(err / min(gt.image_w, gt.image_h)) * 100.0)


def pcdp(gt: CorrespondenceSet, pred, delta: float) -> float:
    """Percentage of correct dense points at normalized threshold delta."""
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must be in (0, 1), got {delta}")
    if len(gt) == 0:
        raise ConfigurationError("PCDP over an empty correspondence set")
    err = _pair_errors(gt, pred)
    return float(np.mean(err / min(gt.image_w, gt.image_h) < delta) * 100.0)


def pck(gt_kpts, pred_kpts, norm_len: float, alpha: float) -> float:
    """Percentage of keypoints within alpha * norm_len of ground truth."""
    gt_arr = np.asarray(gt_kpts, dtype=np.float64).reshape(-1, 2)
    pred_arr = np.asarray(pred_kpts, dtype=np.float64).reshape(-1, 2)
    if gt_arr.shape != pred_arr.shape:
        raise ConfigurationError(f"keypoint count mismatch: {gt_arr.shape} vs {pred_arr.shape}")
    if norm_len <= 0:
        raise ConfigurationError(f"norm_len must be positive, got {norm_len}")
    err = np.linalg.norm(gt_arr - pred_arr, axis=1)
    return float(np.mean(err <= alpha * norm_len) * 100.0)


def pose_accuracy(est, gt, units: str = "") -> PoseAccuracyReport:
    """cm-deg accuracy over pose lists; scene units must be declared meters.

    est entries may be None (failed frames), counting as incorrect at all
    thresholds.
    """
    if units != "meters":
        raise ConfigurationError("pose_accuracy requires units declared as 'meters'")
    if len(est) != len(gt):
        raise ConfigurationError(f"{len(est)} estimates for {len(gt)} ground-truth poses")
    if not gt:
        raise ConfigurationError("pose_accuracy over zero frames")
    acc = {thr: 0 for thr in POSE_THRESHOLDS}
    for pose_est, pose_gt in zip(est, gt):
        if pose_est is None:
            continue
        t_err_cm = float(np.linalg.norm(pose_est.translation - pose_gt.translation)) * 100.0
        r_err = rotation_error_deg(pose_est.rotation, pose_gt.rotation)
        for cm, deg in POSE_THRESHOLDS:
            if t_err_cm <= cm and r_err <= deg:
                acc[(cm, deg)] += 1
    n = len(gt)
    return PoseAccuracyReport({thr: 100.0 * k / n for thr, k in acc.items()}, n_frames=n)


def tracking_metrics(
    pred_pos, pred_vis, gt_pos, gt_vis, eval_size: int = 256, src_size=None
) -> TrackingReport:
    """TAP-Vid style AJ / delta_avg / OA.

    pred_pos, gt_pos: (P, F, 2) positions; pred_vis, gt_vis: (P, F) bool.
    src_size=(W, H) rescales positions to the eval_size square beforehand;
    pass None when positions are already at evaluation scale.
    """
    pred_pos = np.asarray(pred_pos, dtype=np.float64)
    gt_pos = np.asarray(gt_pos, dtype=np.float64)
    pred_vis = np.asarray(pred_vis, dtype=bool)
    gt_vis = np.asarray(gt_vis, dtype=bool)
    if pred_pos.shape != gt_pos.shape or pred_vis.shape != gt_vis.shape:
        raise ConfigurationError("prediction/ground-truth shape mismatch")
    if pred_pos.shape[:2] != pred_vis.shape:
        raise ConfigurationError("positions and visibility flags disagree")
    if src_size is not None:
        scale = np.array([eval_size / src_size[0], eval_size / src_size[1]])
        pred_pos = pred_pos * scale
        gt_pos = gt_pos * scale

    dist = np.linalg.norm(pred_pos - gt_pos, axis=-1)
    oa = float(np.mean(pred_vis == gt_vis) * 100.0)

    deltas = []
    jaccards = []
    for thr in TRACKING_THRESHOLDS:
        within = dist < thr
        n_vis = int(gt_vis.sum())
        deltas.append(float(np.mean(within[gt_vis])) if n_vis else 0.0)
        tp = int(np.sum(within & pred_vis & gt_vis))
        fp = int(np.sum(pred_vis & ~(gt_vis & within)))
        fn = int(np.sum(gt_vis & ~(pred_vis & within)))
        denom = tp + fp + fn
        jaccards.append(tp / denom if denom else 1.0)
    return TrackingReport(
        aj=float(np.mean(jaccards) * 100.0),
        delta_avg=float(np.mean(deltas) * 100.0),
        oa=oa,
    )
