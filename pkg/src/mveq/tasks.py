"""Evaluation pipelines shared by the CLI commands and the self-check."""

from __future__ import annotations

import numpy as np

from .convhead import HeadParams, head_forward
from .errors import ConfigurationError, DataError
from .featstore import l2_normalize_rows, sample_features
from .geometry import OcclusionTolerance, gt_correspondences, rotation_error_deg
from .manifest import DatasetManifest
from .matching import CandidateField, CandidateGrid
from .metrics import PCDP_DELTAS, EquivarianceReport, pose_accuracy
from .pose import RansacConfig, build_database, evaluate_pose_task
from .records import ViewRecord


def apply_head(view: ViewRecord, head: HeadParams | None) -> ViewRecord:
    if head is None or view.features is None:
        return view
    return view.with_features(head_forward(view.features, head))


def load_object_views(
    manifest: DatasetManifest, head: HeadParams | None = None, with_features: bool = True
) -> dict[str, list[ViewRecord]]:
    views: dict[str, list[ViewRecord]] = {}
    for oi, obj in enumerate(manifest.objects):
        views[obj.object_id] = [
            apply_head(manifest.load_view(oi, vi, with_features=with_features), head)
            for vi in range(len(obj.views))
        ]
    return views


def _foreground_grid(view: ViewRecord) -> CandidateGrid:
    if view.depth is None:
        return CandidateGrid(stride=1)
    return CandidateGrid(stride=1, mask=view.depth.values > 0.0)


def eval_equivariance(
    views: dict[str, list[ViewRecord]],
    stride: int = 4,
    occ_tol: OcclusionTolerance = OcclusionTolerance(),
    search: str = "fg",
) -> dict:
    """APE/PCDP over every ordered view pair of every object.

    Errors are pooled over all pairs (the global mean the dense-correspondence
    protocol defines). search: 'fg' restricts candidates to valid-depth
    pixels, 'full' searches the whole frame, 'both' reports both.
    """
    if search not in ("fg", "full", "both"):
        raise ConfigurationError(f"search must be fg, full or both, got {search!r}")
    modes = ("fg", "full") if search == "both" else (search,)
    pooled: dict[str, list[np.ndarray]] = {m: [] for m in modes}
    pair_count = 0
    view_pairs = 0
    missing = []
    for oid, records in sorted(views.items()):
        usable = [v for v in records if v.features is not None and v.depth is not None]
        missing.extend(
            v.view_id for v in records if v.features is None or v.depth is None
        )
        fields: dict[tuple[int, str], CandidateField] = {}
        for i in range(len(usable)):
            for j in range(len(usable)):
                if i == j:
                    continue
                va, vb = usable[i], usable[j]
                corr = gt_correspondences(va, vb, stride=stride, occ_tol=occ_tol)
                if len(corr) == 0:
                    continue
                view_pairs += 1
                pair_count += len(corr)
                queries = l2_normalize_rows(
                    sample_features(va.features, corr.x1, normalize=False), on_zero="zero"
                )
                norm = float(min(corr.image_w, corr.image_h))
                for mode in modes:
                    key = (j, mode)
                    if key not in fields:
                        grid = _foreground_grid(vb) if mode == "fg" else CandidateGrid(stride=1)
                        fields[key] = CandidateField(vb.features, grid)
                    pred, _ = fields[key].match_batch(queries)
                    err = np.linalg.norm(corr.x2 - pred, axis=1) / norm
                    pooled[mode].append(err)
    if pair_count == 0:
        raise DataError("no usable correspondences in the dataset" + (f"; views missing data: {missing}" if missing else ""))

    def summarize(errs: list[np.ndarray]) -> EquivarianceReport:
        cat = np.concatenate(errs)
        return EquivarianceReport(
            ape_percent=float(np.mean(cat) * 100.0),
            pcdp={d: float(np.mean(cat < d) * 100.0) for d in PCDP_DELTAS},
            pair_count=pair_count,
        )

    payload = {
        **summarize(pooled[modes[0]]).to_dict(),
        "view_pairs": view_pairs,
    }
    if search == "both":
        full = summarize(pooled["full"]).to_dict()
        del full["pair_count"]
        payload["fullframe"] = full
    if missing:
        payload["views_missing_data"] = missing
    return payload


def eval_pose(
    views: dict[str, list[ViewRecord]],
    ref_indices: list[int] | None,
    query_indices: list[int] | None,
    cfg: RansacConfig,
    match_stride: int = 4,
    units: str = "meters",
    score_floor: float | None = None,
) -> dict:
    """Per object: onboard references, estimate query poses, pool cm-deg accuracy."""
    all_est = []
    all_gt = []
    per_frame = []
    for oid, records in sorted(views.items()):
        n = len(records)
        refs_idx = ref_indices if ref_indices is not None else list(range(0, max(1, (3 * n) // 4)))
        quer_idx = query_indices if query_indices is not None else [i for i in range(n) if i not in refs_idx]
        refs = [records[i] for i in refs_idx if i < n]
        quers = [records[i] for i in quer_idx if i < n]
        if not refs or not quers:
            raise ConfigurationError(f"object {oid!r}: empty reference or query split")
        db = build_database(refs, stride=match_stride)
        if len(db) == 0:
            raise DataError(f"object {oid!r}: empty pose database")
        report, estimates = evaluate_pose_task(
            quers, db, cfg, units=units, match_stride=match_stride, score_floor=score_floor
        )
        for view, est in zip(quers, estimates):
            failed = est.pose is None or est.inlier_count <= cfg.min_sample
            all_gt.append(view.pose)
            all_est.append(None if failed else est.pose)
            detail = {
                "object": oid,
                "view": view.view_id,
                "inliers": est.inlier_count,
                "mean_reproj_err": est.mean_reproj_err,
            }
            if not failed:
                detail["rot_err_deg"] = rotation_error_deg(est.pose.rotation, view.pose.rotation)
                detail["trans_err"] = float(
                    np.linalg.norm(est.pose.translation - view.pose.translation)
                )
            per_frame.append(detail)
    pooled = pose_accuracy(all_est, all_gt, units=units)
    as_dict = pooled.to_dict()
    return {"pose_acc": as_dict["acc"], "n_frames": as_dict["n_frames"], "per_frame": per_frame}
