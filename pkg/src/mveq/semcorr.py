"""Semantic keypoint transfer between image pairs and PCK evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DataError
from .featstore import FeatureMap, sample_features
from .matching import CandidateField, CandidateGrid
from .metrics import PCK_ALPHAS


@dataclass
class KeypointPair:
    src_image: str
    dst_image: str
    src_kpts: np.ndarray  # (K, 2) float64
    dst_kpts: np.ndarray  # (K, 2) float64
    dst_bbox: Optional[tuple[float, float, float, float]] = None  # x0, y0, x1, y1

    def __post_init__(self):
        self.src_kpts = np.asarray(self.src_kpts, dtype=np.float64).reshape(-1, 2)
        self.dst_kpts = np.asarray(self.dst_kpts, dtype=np.float64).reshape(-1, 2)
        if self.src_kpts.shape != self.dst_kpts.shape:
            raise ConfigurationError("src/dst keypoint lists must be aligned")


def transfer_keypoints(
    src: FeatureMap,
    dst: FeatureMap,
    kpts,
    grid: CandidateGrid = CandidateGrid(),
) -> tuple[np.ndarray, np.ndarray]:
    """Per keypoint: sample the source feature, best-match it into dst.

    Returns (predictions (K, 2), valid (K,) bool). Out-of-bounds keypoints
    are skipped and flagged invalid (prediction row is NaN).
    """
    if src.channels != dst.channels:
        raise ConfigurationError("channel mismatch between src and dst features")
    kpts = np.asarray(kpts, dtype=np.float64).reshape(-1, 2)
    in_bounds = (
        (kpts[:, 0] >= 0)
        & (kpts[:, 0] <= src.img_w - 1)
        & (kpts[:, 1] >= 0)
        & (kpts[:, 1] <= src.img_h - 1)
    )
    preds = np.full_like(kpts, np.nan)
    if in_bounds.any():
        feats = sample_features(src, kpts[in_bounds], normalize=True)
        field = CandidateField(dst, grid)
        pos, _ = field.match_batch(feats)
        preds[in_bounds] = pos
    return preds, in_bounds


def pck_norm_length(pair: KeypointPair, dst_map: FeatureMap) -> float:
    """Normalization length: max bbox side when present, else min image edge."""
    if pair.dst_bbox is not None:
        x0, y0, x1, y1 = pair.dst_bbox
        return max(x1 - x0, y1 - y0)
    return float(min(dst_map.img_w, dst_map.img_h))


def evaluate_semcorr(
    pairs: list[KeypointPair],
    feats: dict[str, FeatureMap],
    alphas=PCK_ALPHAS,
    grid: CandidateGrid = CandidateGrid(),
) -> dict:
    """Transfer keypoints for every pair and aggregate PCK.

    The headline number micro-averages over keypoints across all pairs; a
    per-pair macro average is reported alongside. Pairs with missing features
    are excluded and listed under "errors".
    """
    correct = {a: 0 for a in alphas}
    per_pair = {a: [] for a in alphas}
    total = 0
    skipped = 0
    errors = []
    for pair in pairs:
        if pair.src_image not in feats or pair.dst_image not in feats:
            errors.append(f"missing features for pair {pair.src_image} -> {pair.dst_image}")
            continue
        src_map = feats[pair.src_image]
        dst_map = feats[pair.dst_image]
        preds, valid = transfer_keypoints(src_map, dst_map, pair.src_kpts, grid)
        skipped += int((~valid).sum())
        if not valid.any():
            continue
        err = np.linalg.norm(preds[valid] - pair.dst_kpts[valid], axis=1)
        norm_len = pck_norm_length(pair, dst_map)
        total += int(valid.sum())
        for a in alphas:
            hits = err <= a * norm_len
            correct[a] += int(hits.sum())
            per_pair[a].append(float(np.mean(hits) * 100.0))
    if total == 0 and not errors:
        raise DataError("no valid keypoints to evaluate")
    return {
        "pck": {f"{a:.2f}": (100.0 * correct[a] / total if total else 0.0) for a in alphas},
        "pck_macro": {
            f"{a:.2f}": (float(np.mean(per_pair[a])) if per_pair[a] else 0.0) for a in alphas
        },
        "n_keypoints": total,
        "n_pairs": len(pairs) - len(errors),
        "skipped_keypoints": skipped,
        "errors": errors,
    }
