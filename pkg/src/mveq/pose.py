"""One-shot object pose estimation: feature database, 2D-3D matching, RANSAC PnP.

The minimal solver is a 6-point DLT (2D coords K-normalized then Hartley
normalized, 3D points normalized alongside for conditioning); the rotation is
recovered by nearest-rotation projection of the left 3x3 block. Hypotheses
are generated from per-iteration counter-based RNG streams, so results are
deterministic for a fixed seed, and the best model is the one with the most
inliers, ties broken by lowest iteration index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigurationError, InsufficientCorrespondencesError
from .featstore import l2_normalize_rows, sample_features
from .geometry import Intrinsics, RigidPose, backproject_many
from .metrics import PoseAccuracyReport, pose_accuracy
from .rng import SplitMix64, mix64


@dataclass
class PoseDatabase:
    features: np.ndarray  # (N, C) float64, unit rows
    points: np.ndarray  # (N, 3) float64 world points
    source_views: list[str]

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 10000
    inlier_threshold: float = 8.0  # pixels, reprojection
    min_sample: int = 6
    seed: int = 0
    refine: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.inlier_threshold <= 0:
            raise ConfigurationError("inlier threshold must be positive")
        if self.min_sample < 6:
            raise ConfigurationError("min_sample must be >= 6 for the DLT solver")


@dataclass
class PoseEstimate:
    pose: Optional[RigidPose]
    inlier_count: int
    mean_reproj_err: float


def _grid_pixels(view, stride: int) -> np.ndarray:
    k = view.intrinsics
    vs, us = np.meshgrid(np.arange(0, k.height, stride), np.arange(0, k.width, stride), indexing="ij")
    coords = np.stack([us.ravel(), vs.ravel()], axis=1)
    if view.depth is not None:
        keep = view.depth.values[coords[:, 1], coords[:, 0]] > 0.0
        coords = coords[keep]
    return coords.astype(np.float64)


def build_database(refs, stride: int = 4) -> PoseDatabase:
    """Store (normalized feature, back-projected world point) per grid pixel."""
    feats = []
    points = []
    sources = []
    for view in refs:
        if view.depth is None:
            warnings.warn(f"view {view.view_id!r} has no depth; skipped")
            continue
        if view.features is None:
            warnings.warn(f"view {view.view_id!r} has no features; skipped")
            continue
        coords = _grid_pixels(view, stride)
        if coords.shape[0] == 0:
            warnings.warn(f"view {view.view_id!r} has no valid-depth pixels; skipped")
            continue
        depths = view.depth.values[coords[:, 1].astype(int), coords[:, 0].astype(int)]
        feats.append(sample_features(view.features, coords, normalize=True))
        points.append(backproject_many(coords, depths, view.intrinsics, view.pose))
        sources.append(view.view_id)
    if not feats:
        return PoseDatabase(np.zeros((0, 0)), np.zeros((0, 3)), [])
    return PoseDatabase(
        np.ascontiguousarray(np.concatenate(feats)), np.concatenate(points), sources
    )


def match_2d3d(
    query, db: PoseDatabase, stride: int = 4, score_floor: Optional[float] = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Match query-view grid pixels to database 3D points by cosine.

    Returns (pixels (M, 2), world points (M, 3), scores (M,)). The grid is
    restricted to valid-depth pixels when the query carries a depth map.
    """
    if len(db) == 0:
        raise ConfigurationError("empty pose database")
    if query.features is None:
        raise ConfigurationError(f"query view {query.view_id!r} has no features")
    if query.features.channels != db.features.shape[1]:
        raise ConfigurationError("query/database channel mismatch")
    pixels = _grid_pixels(query, stride)
    feats = l2_normalize_rows(
        sample_features(query.features, pixels, normalize=False), on_zero="zero"
    )
    idx, scores = kernels.nn_argmax(db.features, np.ascontiguousarray(feats))
    points = db.points[idx]
    if score_floor is not None:
        keep = scores >= score_floor
        pixels, points, scores = pixels[keep], points[keep], scores[keep]
    return pixels, points, scores


# --- DLT + RANSAC ---------------------------------------------------------


def _rodrigues(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        return np.eye(3)
    k = omega / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def _reproj_errors(r: np.ndarray, t: np.ndarray, pts: np.ndarray, pix: np.ndarray, k: Intrinsics):
    cam = pts @ r.T + t
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * cam[:, 0] / z + k.cx
        v = k.fy * cam[:, 1] / z + k.cy
    err = np.hypot(u - pix[:, 0], v - pix[:, 1])
    return np.where(z > 1e-9, err, np.inf)


def _dlt_batch(pix_n: np.ndarray, pts: np.ndarray, samples: np.ndarray):
    """Batched DLT over minimal samples.

    pix_n: (N, 2) K-normalized pixels, pts: (N, 3), samples: (T, S) indices.
    Returns (R (T,3,3), t (T,3), valid (T,)).
    """
    t_count, s_count = samples.shape
    x2 = pix_n[samples]  # (T, S, 2)
    x3 = pts[samples]  # (T, S, 3)

    c3 = x3.mean(axis=1, keepdims=True)
    x3c = x3 - c3
    # Coplanar (or worse) 3D samples make the DLT underdetermined: skip.
    sv = np.linalg.svd(x3c, compute_uv=False)
    valid = sv[:, 2] > 1e-6 * np.maximum(sv[:, 0], 1e-300)

    d3 = np.sqrt((x3c**2).sum(axis=2)).mean(axis=1)
    c2 = x2.mean(axis=1, keepdims=True)
    x2c = x2 - c2
    d2 = np.sqrt((x2c**2).sum(axis=2)).mean(axis=1)
    valid &= (d3 > 1e-12) & (d2 > 1e-12)
    s3 = np.sqrt(3.0) / np.where(d3 > 1e-12, d3, 1.0)
    s2 = np.sqrt(2.0) / np.where(d2 > 1e-12, d2, 1.0)

    x2n = x2c * s2[:, None, None]
    x3n = x3c * s3[:, None, None]

    a = np.zeros((t_count, 2 * s_count, 12))
    xh = np.concatenate([x3n, np.ones((t_count, s_count, 1))], axis=2)  # (T, S, 4)
    a[:, 0::2, 0:4] = xh
    a[:, 0::2, 8:12] = -x2n[:, :, 0:1] * xh
    a[:, 1::2, 4:8] = xh
    a[:, 1::2, 8:12] = -x2n[:, :, 1:2] * xh

    _, _, vh = np.linalg.svd(a)
    m_n = vh[:, -1, :].reshape(t_count, 3, 4)

    # Undo normalizations: x = T2^-1 @ m_n @ T3.
    t2_inv = np.zeros((t_count, 3, 3))
    t2_inv[:, 0, 0] = 1.0 / s2
    t2_inv[:, 1, 1] = 1.0 / s2
    t2_inv[:, 0, 2] = c2[:, 0, 0]
    t2_inv[:, 1, 2] = c2[:, 0, 1]
    t2_inv[:, 2, 2] = 1.0
    t3 = np.zeros((t_count, 4, 4))
    t3[:, 0, 0] = s3
    t3[:, 1, 1] = s3
    t3[:, 2, 2] = s3
    t3[:, 3, 3] = 1.0
    t3[:, 0:3, 3] = -s3[:, None] * c3[:, 0, :]
    m = t2_inv @ m_n @ t3

    # Cheirality: majority of the sample must project with positive depth.
    xh_raw = np.concatenate([x3, np.ones((t_count, s_count, 1))], axis=2)
    w = np.einsum("tj,tsj->ts", m[:, 2, :], xh_raw)
    flip = (w < 0).sum(axis=1) * 2 > s_count
    m[flip] *= -1.0

    a3 = m[:, :, :3]
    u, s, vh3 = np.linalg.svd(a3)
    det = np.linalg.det(u @ vh3)
    d = np.ones((t_count, 3))
    d[:, 2] = det
    r = (u * d[:, None, :]) @ vh3
    valid &= det > 0
    lam = s.mean(axis=1)
    valid &= lam > 1e-12
    t_vec = m[:, :, 3] / np.where(lam > 1e-12, lam, 1.0)[:, None]
    return r, t_vec, valid


def _gauss_newton_refine(r, t, pts, pix, k: Intrinsics, iters: int = 20):
    """Minimize squared reprojection error over (axis-angle, translation)."""
    best_r, best_t = r, t
    best_cost = float(np.mean(_reproj_errors(r, t, pts, pix, k) ** 2))
    for _ in range(iters):
        cam = pts @ r.T + t
        z = cam[:, 2]
        if np.any(z <= 1e-9):
            break
        u = k.fx * cam[:, 0] / z + k.cx
        v = k.fy * cam[:, 1] / z + k.cy
        res = np.concatenate([pix[:, 0] - u, pix[:, 1] - v])
        # d(cam)/d(omega) = -[cam - t]_x (left-multiplicative update), d/dt = I.
        rel = cam - t
        zeros = np.zeros_like(z)
        d_cam_omega = np.stack(
            [
                np.stack([zeros, rel[:, 2], -rel[:, 1]], axis=1),
                np.stack([-rel[:, 2], zeros, rel[:, 0]], axis=1),
                np.stack([rel[:, 1], -rel[:, 0], zeros], axis=1),
            ],
            axis=1,
        )  # (N, 3, 3)
        du_dcam = np.stack([k.fx / z, zeros, -k.fx * cam[:, 0] / z**2], axis=1)
        dv_dcam = np.stack([zeros, k.fy / z, -k.fy * cam[:, 1] / z**2], axis=1)
        j = np.zeros((2 * len(z), 6))
        j[: len(z), :3] = np.einsum("ni,nij->nj", du_dcam, d_cam_omega)
        j[len(z) :, :3] = np.einsum("ni,nij->nj", dv_dcam, d_cam_omega)
        j[: len(z), 3:] = du_dcam
        j[len(z) :, 3:] = dv_dcam
        jtj = j.T @ j
        jtj += 1e-12 * np.trace(jtj) * np.eye(6)
        try:
            delta = np.linalg.solve(jtj, j.T @ res)
        except np.linalg.LinAlgError:
            break
        r_new = _rodrigues(delta[:3]) @ r
        t_new = t + delta[3:]
        cost = float(np.mean(_reproj_errors(r_new, t_new, pts, pix, k) ** 2))
        if not np.isfinite(cost) or cost >= best_cost - 1e-15:
            break
        r, t = r_new, t_new
        best_r, best_t, best_cost = r, t, cost
    return best_r, best_t


def solve_pnp_ransac(corrs, k: Intrinsics, cfg: RansacConfig = RansacConfig()) -> PoseEstimate:
    """RANSAC PnP over (pixels, world points) correspondences.

    corrs: tuple (pixels (N, 2), points (N, 3)). Inliers are correspondences
    whose reprojection error is <= cfg.inlier_threshold pixels.
    """
    pixels = np.asarray(corrs[0], dtype=np.float64).reshape(-1, 2)
    points = np.asarray(corrs[1], dtype=np.float64).reshape(-1, 3)
    n = pixels.shape[0]
    if n != points.shape[0]:
        raise ConfigurationError("pixel/point count mismatch")
    if n < cfg.min_sample:
        raise InsufficientCorrespondencesError(
            f"{n} correspondences < minimal sample {cfg.min_sample}"
        )

    pix_n = np.stack(
        [(pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy], axis=1
    )
    samples = np.empty((cfg.iterations, cfg.min_sample), dtype=np.int64)
    for it in range(cfg.iterations):
        samples[it] = SplitMix64(cfg.seed, stream=it).sample(n, cfg.min_sample)

    best_count = -1
    best_rt = None
    chunk = max(1, (1 << 24) // max(n, 1))  # keep the (chunk, N, 3) tensors small
    for lo in range(0, cfg.iterations, chunk):
        r_b, t_b, valid = _dlt_batch(pix_n, points, samples[lo : lo + chunk])
        cam = np.einsum("tij,nj->tni", r_b, points) + t_b[:, None, :]
        z = cam[:, :, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = k.fx * cam[:, :, 0] / z + k.cx
            v = k.fy * cam[:, :, 1] / z + k.cy
        err = np.hypot(u - pixels[:, 0], v - pixels[:, 1])
        err = np.where(z > 1e-9, err, np.inf)
        counts = np.where(valid, (err <= cfg.inlier_threshold).sum(axis=1), -1)
        local_best = int(np.argmax(counts))
        if counts[local_best] > best_count:
            best_count = int(counts[local_best])
            best_rt = (r_b[local_best], t_b[local_best])

    if best_rt is None or best_count < 0:
        return PoseEstimate(pose=None, inlier_count=0, mean_reproj_err=float("inf"))

    r, t = best_rt
    err = _reproj_errors(r, t, points, pixels, k)
    inliers = err <= cfg.inlier_threshold
    if cfg.refine and inliers.sum() >= cfg.min_sample:
        base_err = float(np.mean(err[inliers]))
        r_ref, t_ref = _gauss_newton_refine(r, t, points[inliers], pixels[inliers], k)
        ref_err_all = _reproj_errors(r_ref, t_ref, points, pixels, k)
        # Keep the refinement only if it helps on the model's inlier set.
        if float(np.mean(ref_err_all[inliers])) <= base_err:
            r, t, err = r_ref, t_ref, ref_err_all
            inliers = err <= cfg.inlier_threshold

    mean_err = float(np.mean(err[inliers])) if inliers.any() else float("inf")
    return PoseEstimate(
        pose=RigidPose(r, t), inlier_count=int(inliers.sum()), mean_reproj_err=mean_err
    )


def evaluate_pose_task(
    queries,
    db: PoseDatabase,
    cfg: RansacConfig = RansacConfig(),
    units: str = "meters",
    match_stride: int = 4,
    score_floor: Optional[float] = None,
) -> tuple[PoseAccuracyReport, list[PoseEstimate]]:
    """match_2d3d -> solve_pnp_ransac per query, aggregated to cm-deg accuracy.

    Frames that fail (too few correspondences, degenerate estimate, or
    inlier_count <= min_sample) count as incorrect at every threshold.
    """
    estimates: list[PoseEstimate] = []
    est_poses = []
    gt_poses = []
    for frame_idx, view in enumerate(queries):
        gt_poses.append(view.pose)
        frame_cfg = replace(cfg, seed=mix64(cfg.seed + frame_idx))
        try:
            pixels, points, scores = match_2d3d(view, db, stride=match_stride, score_floor=score_floor)
            est = solve_pnp_ransac((pixels, points), view.intrinsics, frame_cfg)
        except (InsufficientCorrespondencesError, ConfigurationError):
            est = PoseEstimate(pose=None, inlier_count=0, mean_reproj_err=float("inf"))
        estimates.append(est)
        failed = est.pose is None or est.inlier_count <= cfg.min_sample
        est_poses.append(None if failed else est.pose)
    report = pose_accuracy(est_poses, gt_poses, units=units)
    return report, estimates
