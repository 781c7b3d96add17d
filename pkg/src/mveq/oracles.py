"""Naive reference implementations used as independent oracles.

Everything here is deliberately written as scalar double loops (or direct
closed-form math) with no code shared with the production paths; the
self-check command and the test suite compare against these.
"""

from __future__ import annotations

import numpy as np

from .geometry import Box, Intrinsics, Plane, RigidPose, Sphere, SyntheticScene


def ape_loop(x2: np.ndarray, pred: np.ndarray, w: int, h: int) -> float:
    total = 0.0
    for i in range(x2.shape[0]):
        dx = x2[i, 0] - pred[i, 0]
        dy = x2[i, 1] - pred[i, 1]
        total += (dx * dx + dy * dy) ** 0.5 / min(w, h)
    return 100.0 * total / x2.shape[0]


def pcdp_loop(x2: np.ndarray, pred: np.ndarray, w: int, h: int, delta: float) -> float:
    hits = 0
    for i in range(x2.shape[0]):
        dx = x2[i, 0] - pred[i, 0]
        dy = x2[i, 1] - pred[i, 1]
        if (dx * dx + dy * dy) ** 0.5 / min(w, h) < delta:
            hits += 1
    return 100.0 * hits / x2.shape[0]


def pck_loop(gt: np.ndarray, pred: np.ndarray, norm_len: float, alpha: float) -> float:
    hits = 0
    for i in range(gt.shape[0]):
        dx = gt[i, 0] - pred[i, 0]
        dy = gt[i, 1] - pred[i, 1]
        if (dx * dx + dy * dy) ** 0.5 <= alpha * norm_len:
            hits += 1
    return 100.0 * hits / gt.shape[0]


def nn_loop(cand: np.ndarray, query: np.ndarray) -> tuple[int, float]:
    """Exhaustive argmax by scalar loop; ties keep the lowest index."""
    best_i, best_s = 0, -np.inf
    for i in range(cand.shape[0]):
        s = 0.0
        for c in range(cand.shape[1]):
            s += float(cand[i, c]) * float(query[c])
        if s > best_s:
            best_i, best_s = i, s
    return best_i, best_s


def mutual_pairs_loop(
    coords_a, fwd_pos, coords_b, bwd_pos, px_tol: float
) -> list[tuple[tuple, tuple]]:
    """O(N^2) evaluation of the symmetric mutual-match predicate."""
    out = []
    for ia in range(coords_a.shape[0]):
        for ib in range(coords_b.shape[0]):
            d1 = np.hypot(fwd_pos[ia, 0] - coords_b[ib, 0], fwd_pos[ia, 1] - coords_b[ib, 1])
            d2 = np.hypot(bwd_pos[ib, 0] - coords_a[ia, 0], bwd_pos[ib, 1] - coords_a[ia, 1])
            if d1 <= px_tol and d2 <= px_tol:
                out.append((tuple(coords_a[ia]), tuple(coords_b[ib])))
    return out


def conv3x3_loop(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct 6-loop 3x3 convolution (zero padding 1, stride 1)."""
    h, wdt, ci = x.shape
    co = w.shape[0]
    out = np.zeros((h, wdt, co))
    for i in range(h):
        for j in range(wdt):
            for o in range(co):
                acc = float(b[o])
                for ki in range(3):
                    for kj in range(3):
                        ii, jj = i + ki - 1, j + kj - 1
                        if 0 <= ii < h and 0 <= jj < wdt:
                            for c in range(ci):
                                acc += float(x[ii, jj, c]) * float(w[o, c, ki, kj])
                out[i, j, o] = acc
    return out


def bilinear_loop(data: np.ndarray, gx: float, gy: float) -> np.ndarray:
    """Scalar clamped bilinear interpolation on an (H, W, C) grid."""
    h, w = data.shape[:2]
    gx = min(max(gx, 0.0), w - 1.0)
    gy = min(max(gy, 0.0), h - 1.0)
    x0 = min(int(np.floor(gx)), w - 2) if w > 1 else 0
    y0 = min(int(np.floor(gy)), h - 2) if h > 1 else 0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx, fy = gx - x0, gy - y0
    return (
        data[y0, x0].astype(np.float64) * (1 - fy) * (1 - fx)
        + data[y0, x1].astype(np.float64) * (1 - fy) * fx
        + data[y1, x0].astype(np.float64) * fy * (1 - fx)
        + data[y1, x1].astype(np.float64) * fy * fx
    )


def finite_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def ray_depth_point(
    scene: SyntheticScene, k: Intrinsics, pose: RigidPose, x: float, y: float
) -> float:
    """Scalar ray trace through one (sub)pixel; 0 when nothing is hit.

    Independent of the vectorized renderer: solves each primitive's
    intersection with explicit scalar algebra.
    """
    d_cam = np.array([(x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0])
    d = pose.rotation.T @ d_cam
    o = -pose.rotation.T @ pose.translation
    best = np.inf
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            oc = o - np.asarray(prim.center)
            a = d @ d
            bq = 2 * d @ oc
            cq = oc @ oc - prim.radius**2
            disc = bq * bq - 4 * a * cq
            if disc < 0:
                continue
            sq = disc**0.5
            for t in ((-bq - sq) / (2 * a), (-bq + sq) / (2 * a)):
                if 1e-12 < t < best:
                    best = t
        elif isinstance(prim, Plane):
            n = np.asarray(prim.normal)
            denom = d @ n
            if abs(denom) < 1e-300:
                continue
            t = (prim.offset - o @ n) / denom
            if 1e-12 < t < best:
                best = t
        elif isinstance(prim, Box):
            lo = np.asarray(prim.min_corner)
            hi = np.asarray(prim.max_corner)
            tmin, tmax = -np.inf, np.inf
            ok = True
            for ax in range(3):
                if abs(d[ax]) < 1e-300:
                    if not (lo[ax] <= o[ax] <= hi[ax]):
                        ok = False
                        break
                    continue
                t0 = (lo[ax] - o[ax]) / d[ax]
                t1 = (hi[ax] - o[ax]) / d[ax]
                if t0 > t1:
                    t0, t1 = t1, t0
                tmin = max(tmin, t0)
                tmax = min(tmax, t1)
            if not ok or tmax < tmin:
                continue
            t = tmin if tmin > 1e-12 else tmax
            if 1e-12 < t < best:
                best = t
    return best if np.isfinite(best) else 0.0


def verify_correspondence_raytrace(
    scene: SyntheticScene, va, vb, x1: np.ndarray, x2: np.ndarray, tol_abs: float, tol_rel: float
) -> int:
    """Count pairs whose claim survives independent per-pair ray tracing.

    For each pair: trace A's ray through x1 to its surface point, re-project
    it into B (must land on x2), then trace B's ray through x2 and require
    the first hit to be that same point: the 3D gap |t_b - z| * ||dir_b||
    must stay within the occlusion budget max(tol_abs, tol_rel * z). No depth
    maps are involved anywhere.
    """
    ka, kb = va.intrinsics, vb.intrinsics
    agree = 0
    for i in range(x1.shape[0]):
        ta = ray_depth_point(scene, ka, va.pose, x1[i, 0], x1[i, 1])
        if ta <= 0:
            continue
        da = np.array([(x1[i, 0] - ka.cx) / ka.fx, (x1[i, 1] - ka.cy) / ka.fy, 1.0])
        pa = va.pose.rotation.T @ (ta * da - va.pose.translation)
        pc = vb.pose.rotation @ pa + vb.pose.translation
        z = pc[2]
        if z <= 0:
            continue
        u = kb.fx * pc[0] / z + kb.cx
        v = kb.fy * pc[1] / z + kb.cy
        if abs(u - x2[i, 0]) > 1e-6 or abs(v - x2[i, 1]) > 1e-6:
            continue  # claimed target pixel is not the reprojection
        tb = ray_depth_point(scene, kb, vb.pose, x2[i, 0], x2[i, 1])
        if tb <= 0:
            continue
        db_len = float(
            np.linalg.norm([(x2[i, 0] - kb.cx) / kb.fx, (x2[i, 1] - kb.cy) / kb.fy, 1.0])
        )
        if abs(tb - z) * db_len <= max(tol_abs, tol_rel * z):
            agree += 1
    return agree
