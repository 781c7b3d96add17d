"""Feature-similarity point tracking with soft refinement and occlusion flags.

The query feature is sampled once at the reference frame and matched per
frame by global cosine argmax, then refined with a softmax window. A frame is
predicted visible when the best cosine clears occ_threshold. When the coarse
match is an exact hit (cosine >= 1 - 1e-9) refinement is skipped: a soft
window average could only move the point off an already perfect match, and
this keeps self-tracking exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .featstore import FeatureMap, sample_feature
from .matching import CandidateField, CandidateGrid, refine_softmax
from .metrics import TrackingReport, tracking_metrics

_EXACT_HIT = 1.0 - 1e-9


@dataclass(frozen=True)
class TrackQuery:
    point: tuple[float, float]
    frame_index: int


@dataclass
class TrackResult:
    positions: np.ndarray  # (F, 2) float64
    visible: np.ndarray  # (F,) bool
    scores: np.ndarray  # (F,) float64 best cosine per frame


@dataclass(frozen=True)
class TrackConfig:
    refine_radius: int = 3
    temperature: float = 0.05
    occ_threshold: float = 0.55


def track(frames, queries, cfg: TrackConfig = TrackConfig()) -> list[TrackResult]:
    """Track each query point across all frames.

    frames: ordered FeatureMaps sharing dims/channels; queries: TrackQuery
    list. Results are independent of query order.
    """
    if not frames:
        raise ConfigurationError("no frames to track")
    f0 = frames[0]
    for f in frames:
        if (f.img_w, f.img_h, f.channels) != (f0.img_w, f0.img_h, f0.channels):
            raise ConfigurationError("frames must share dims and channels")

    fields = [CandidateField(f, CandidateGrid(stride=1)) for f in frames]
    q_feats = np.stack(
        [
            sample_feature(frames[q.frame_index], np.asarray(q.point, dtype=np.float64))
            for q in queries
        ]
    )

    n_q = len(queries)
    n_f = len(frames)
    positions = np.zeros((n_q, n_f, 2))
    scores = np.zeros((n_q, n_f))
    for t, (frame, field) in enumerate(zip(frames, fields)):
        pos, sc = field.match_batch(q_feats)
        scores[:, t] = sc
        for qi in range(n_q):
            if sc[qi] >= _EXACT_HIT:
                positions[qi, t] = pos[qi]
            else:
                positions[qi, t] = refine_softmax(
                    frame, q_feats[qi], pos[qi], radius=cfg.refine_radius, temperature=cfg.temperature
                )
    visible = scores >= cfg.occ_threshold
    return [
        TrackResult(positions=positions[qi], visible=visible[qi], scores=scores[qi])
        for qi in range(n_q)
    ]


def evaluate_tracking(
    results: list[TrackResult],
    gt_pos,
    gt_vis,
    src_size,
    eval_size: int = 256,
) -> TrackingReport:
    """Score TrackResults against GT tracks after rescaling to eval_size."""
    pred_pos = np.stack([r.positions for r in results])
    pred_vis = np.stack([r.visible for r in results])
    return tracking_metrics(
        pred_pos, pred_vis, np.asarray(gt_pos), np.asarray(gt_vis), eval_size=eval_size, src_size=src_size
    )


def calibrate_occlusion_threshold(
    results: list[TrackResult], gt_vis, candidates=None
) -> tuple[float, float]:
    """Sweep the occlusion threshold to maximize OA on a labeled split.

    Returns (best_threshold, best_oa_percent). Candidate thresholds default
    to a 0.01 grid over [-1, 1]; ties resolve to the lowest threshold.
    """
    gt_vis = np.asarray(gt_vis, dtype=bool)
    scores = np.stack([r.scores for r in results])
    if scores.shape != gt_vis.shape:
        raise ConfigurationError("score/visibility shape mismatch")
    if candidates is None:
        candidates = np.round(np.arange(-1.0, 1.0 + 1e-9, 0.01), 2)
    best_thr, best_oa = 0.0, -1.0
    for thr in candidates:
        oa = float(np.mean((scores >= thr) == gt_vis) * 100.0)
        if oa > best_oa:
            best_thr, best_oa = float(thr), oa
    return best_thr, best_oa
