"""Built-in oracle suites: gradient checks, brute-force equivalences, PnP recovery.

`mveq selfcheck` runs every check and prints a PASS/FAIL table; any failure
exits with code 3. MVEQ_SELFCHECK_CORRUPT=<check-name> injects a deliberate
perturbation into that check (a test hook proving the harness can fail).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import kernels, oracles
from .errors import MveqError
from .featstore import FeatureMap, l2_normalize_rows
from .geometry import (
    Intrinsics,
    OcclusionTolerance,
    backproject,
    gt_correspondences,
    project,
    rotation_error_deg,
)
from .matching import CandidateField, CandidateGrid, best_match, coarse_to_fine_match, mutual_matches
from .metrics import pck, tracking_metrics
from .pose import RansacConfig, solve_pnp_ransac
from .rng import SplitMix64
from .smoothap import RankingInstance, exact_ap, smooth_ap, smooth_ap_grad
from .synth import random_pose, scene_preset, synth_views
from .tasks import eval_equivariance


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _rand_unit_rows(rng: SplitMix64, n: int, c: int) -> np.ndarray:
    return l2_normalize_rows(rng.normal_array(n * c).reshape(n, c))


def _corrupted(name: str) -> bool:
    return os.environ.get("MVEQ_SELFCHECK_CORRUPT", "") == name


def check_geometry_roundtrip() -> tuple[bool, str]:
    rng = SplitMix64(101)
    worst = 0.0
    for _ in range(1000):
        pose = random_pose(rng)
        k = Intrinsics(
            fx=50 + 400 * rng.uniform(),
            fy=50 + 400 * rng.uniform(),
            cx=32 * rng.uniform() + 16,
            cy=32 * rng.uniform() + 16,
            width=64,
            height=64,
        )
        x = (rng.uniform() * 63, rng.uniform() * 63)
        d = 0.1 + 10 * rng.uniform()
        (u, v), z = project(backproject(x, d, k, pose), k, pose)
        worst = max(worst, abs(u - x[0]), abs(v - x[1]), abs(z - d))
    return worst < 1e-9, f"max roundtrip error {worst:.3e}"


def check_gt_identity() -> tuple[bool, str]:
    scene = scene_preset("sphere")
    view = synth_views(scene, 1, image_size=32)[0]
    corr = gt_correspondences(view, view, stride=4)
    same = np.allclose(corr.x1, corr.x2, atol=0)
    return (
        same and corr.n_rejected == 0 and len(corr) > 0,
        f"{len(corr)} pairs, {corr.n_rejected} rejected",
    )


def check_gt_raytrace() -> tuple[bool, str]:
    scene = scene_preset("boxsphere")
    views = synth_views(scene, 4, image_size=32)
    occ = OcclusionTolerance()
    total = agree = 0
    for a, b in ((0, 1), (1, 2), (2, 3)):
        corr = gt_correspondences(views[a], views[b], stride=2, occ_tol=occ)
        total += len(corr)
        agree += oracles.verify_correspondence_raytrace(
            scene, views[a], views[b], corr.x1, corr.x2, occ.abs_tol, occ.rel_tol
        )
    return agree == total and total > 0, f"{agree}/{total} pairs re-verified"


def check_metric_oracles() -> tuple[bool, str]:
    rng = SplitMix64(202)
    n = 1000
    x2 = rng.normal_array(2 * n).reshape(n, 2) * 10 + 32
    pred = x2 + rng.normal_array(2 * n).reshape(n, 2) * 3
    from .geometry import CorrespondenceSet
    from .metrics import ape as ape_fn
    from .metrics import pcdp as pcdp_fn

    gt = CorrespondenceSet("a", "b", x1=x2.copy(), x2=x2, image_w=64, image_h=64)

    @dataclass
    class P:
        position: np.ndarray

    preds = [P(pred[i]) for i in range(n)]
    d_ape = abs(ape_fn(gt, preds) - oracles.ape_loop(x2, pred, 64, 64))
    d_pcdp = max(
        abs(pcdp_fn(gt, preds, d) - oracles.pcdp_loop(x2, pred, 64, 64, d))
        for d in (0.05, 0.1, 0.2)
    )
    d_pck = abs(pck(x2, pred, 48.0, 0.05) - oracles.pck_loop(x2, pred, 48.0, 0.05))
    worst = max(d_ape, d_pcdp, d_pck)
    return worst <= 1e-9, f"max metric deviation {worst:.3e}"


def check_mutual_oracle() -> tuple[bool, str]:
    rng = SplitMix64(303)
    fa = FeatureMap(rng.normal_array(8 * 8 * 4).reshape(8, 8, 4).astype(np.float32), 1, 8, 8)
    fb = FeatureMap(rng.normal_array(8 * 8 * 4).reshape(8, 8, 4).astype(np.float32), 1, 8, 8)
    grid = CandidateGrid(stride=1)
    count, pairs = mutual_matches(fa, fb, grid, px_tol=1.0)
    field_a = CandidateField(fa, grid)
    field_b = CandidateField(fb, grid)
    fwd, _ = field_b.match_batch(field_a.feats)
    bwd, _ = field_a.match_batch(field_b.feats)
    ref = oracles.mutual_pairs_loop(field_a.coords, fwd, field_b.coords, bwd, 1.0)
    got = {(tuple(a), tuple(b)) for a, b in pairs}
    want = {(tuple(map(float, a)), tuple(map(float, b))) for a, b in ref}
    return count == len(ref) and got == want, f"{count} mutual pairs"


def check_smoothap_grad() -> tuple[bool, str]:
    rng = SplitMix64(404)
    worst = 0.0
    for _ in range(10):
        inst = RankingInstance(
            _rand_unit_rows(rng, 1, 6)[0],
            _rand_unit_rows(rng, 2, 6),
            _rand_unit_rows(rng, 5, 6),
            temperature=0.5 + rng.uniform(),
        )
        lg = smooth_ap_grad(inst)
        if _corrupted("smoothap-grad"):
            lg.d_query = lg.d_query + 1e-2
        for attr, grad in (
            ("query", lg.d_query),
            ("positives", lg.d_positives),
            ("negatives", lg.d_negatives),
        ):
            base = getattr(inst, attr).copy()

            def f(x, attr=attr, inst=inst, base=base):
                obj = RankingInstance.__new__(RankingInstance)
                obj.query, obj.positives, obj.negatives = inst.query, inst.positives, inst.negatives
                obj.temperature = inst.temperature
                setattr(obj, attr, x)
                return 1.0 - smooth_ap(obj)

            fd = oracles.finite_difference(f, base)
            scale = max(np.max(np.abs(fd)), 1e-8)
            worst = max(worst, float(np.max(np.abs(fd - grad)) / scale))
    return worst < 1e-4, f"max relative gradient error {worst:.3e}"


def check_smoothap_limit() -> tuple[bool, str]:
    rng = SplitMix64(505)
    worst = 0.0
    for _ in range(20):
        q = _rand_unit_rows(rng, 1, 8)[0]
        pos = _rand_unit_rows(rng, 1, 8)
        neg = _rand_unit_rows(rng, 4, 8)
        scores = np.concatenate([pos @ q, neg @ q])
        gaps = np.abs(scores[:, None] - scores[None, :])[np.triu_indices(5, 1)]
        if gaps.min() < 1e-3:
            continue
        sap = smooth_ap(RankingInstance(q, pos, neg, temperature=1e-5))
        eap = exact_ap(pos @ q, neg @ q)
        worst = max(worst, abs(sap - eap))
    return worst < 1e-3, f"max |smooth_ap - exact_ap| = {worst:.3e}"


def check_conv_oracle() -> tuple[bool, str]:
    rng = SplitMix64(606)
    x = rng.normal_array(5 * 5 * 4).reshape(5, 5, 4)
    w = rng.normal_array(3 * 4 * 9).reshape(3, 4, 3, 3)
    b = rng.normal_array(3)
    out = kernels.conv3x3_forward(x, w, b)
    ref = oracles.conv3x3_loop(x, w, b)
    fwd_err = float(np.max(np.abs(out - ref)))

    d_out = rng.normal_array(5 * 5 * 3).reshape(5, 5, 3)
    dx, dw, db = kernels.conv3x3_backward(x, w, d_out)
    fd_dw = oracles.finite_difference(
        lambda wv: float(np.sum(kernels.conv3x3_forward(x, wv, b) * d_out)), w.copy()
    )
    bwd_err = float(np.max(np.abs(fd_dw - dw)) / max(np.max(np.abs(fd_dw)), 1e-8))
    return fwd_err < 1e-5 and bwd_err < 1e-6, f"fwd {fwd_err:.2e}, dW rel {bwd_err:.2e}"


def check_coarse_to_fine() -> tuple[bool, str]:
    rng = SplitMix64(707)
    mismatches = 0
    for _ in range(10):
        coarse = rng.normal_array(4 * 4 * 3).reshape(4, 4, 3)
        up = np.kron(coarse, np.ones((4, 4, 1)))  # smooth-ish 16x16 field
        fmap = FeatureMap(up.astype(np.float32), 2, 32, 32)
        q = _rand_unit_rows(rng, 1, 3)[0]
        got = coarse_to_fine_match(q, fmap, refine_radius=1)
        ref = best_match(q, fmap, CandidateGrid(stride=1))
        if not np.array_equal(got.position, ref.position):
            mismatches += 1
    return mismatches == 0, f"{mismatches} mismatches vs exhaustive"


def check_pnp_recovery() -> tuple[bool, str]:
    rng = SplitMix64(808)
    k = Intrinsics(fx=600.0, fy=600.0, cx=255.5, cy=255.5, width=512, height=512)
    eye = 3.5 * l2_normalize_rows(rng.normal_array(3).reshape(1, 3))[0]
    from .synth import look_at

    pose = look_at(eye)
    pts = rng.normal_array(150).reshape(50, 3) * 0.4
    pts_cam = pts @ pose.rotation.T + pose.translation
    pix = np.stack(
        [
            k.fx * pts_cam[:, 0] / pts_cam[:, 2] + k.cx,
            k.fy * pts_cam[:, 1] / pts_cam[:, 2] + k.cy,
        ],
        axis=1,
    )
    outliers = rng.sample(50, 15)
    for i in outliers:
        pix[i] = (rng.uniform() * 511, rng.uniform() * 511)
    est = solve_pnp_ransac((pix, pts), k, RansacConfig(iterations=10000, inlier_threshold=8.0, seed=3))
    rot_err = rotation_error_deg(est.pose.rotation, pose.rotation)
    t_err = float(np.linalg.norm(est.pose.translation - pose.translation))
    ok = rot_err < 0.01 and t_err < 1e-4 and est.inlier_count == 35
    return ok, f"rot {rot_err:.2e} deg, trans {t_err:.2e}, inliers {est.inlier_count}"


def check_tracking_fixture() -> tuple[bool, str]:
    # 2 points, 2 frames; point 0 off by 3 px in frame 1, point 1 flagged wrong.
    gt_pos = np.array([[[10.0, 10.0], [12.0, 10.0]], [[40.0, 40.0], [40.0, 42.0]]])
    pred_pos = np.array([[[10.0, 10.0], [15.0, 10.0]], [[40.0, 40.0], [40.0, 42.0]]])
    gt_vis = np.array([[True, True], [True, True]])
    pred_vis = np.array([[True, True], [True, False]])
    rep = tracking_metrics(pred_pos, pred_vis, gt_pos, gt_vis, eval_size=256, src_size=(256, 256))
    # Hand analysis: OA = 3/4. delta per thr {1,2,4,8,16} over 4 visible:
    # 3px error in at thr {4,8,16}; flagged point still within dist.
    # delta = (3/4 + 3/4 + 4/4 + 4/4 + 4/4)/5 = 0.90
    # Jaccard: thr 1,2: TP=2 (pt0f0, pt1f0), FP=1 (pt0f1 pred-vis outside), FN=2 -> 2/5
    # thr 4,8,16: TP=3, FP=0, FN=1 -> 3/4 ;  AJ = (2/5+2/5+3/4+3/4+3/4)/5 = 0.61
    ok = (
        abs(rep.oa - 75.0) < 1e-9
        and abs(rep.delta_avg - 90.0) < 1e-9
        and abs(rep.aj - 61.0) < 1e-9
    )
    return ok, f"AJ {rep.aj}, delta {rep.delta_avg}, OA {rep.oa}"


def check_determinism() -> tuple[bool, str]:
    from .synth import OracleFeatureSpec

    views = synth_views(
        scene_preset("sphere"), 6, image_size=24,
        feature_spec=OracleFeatureSpec(noise_sigma=0.05), seed=7, duplicate_first=True,
    )
    payloads = []
    for _ in range(2):
        payload = eval_equivariance({"obj": list(views)}, stride=4)
        payloads.append(json.dumps(payload, sort_keys=True))
    return payloads[0] == payloads[1], "two runs byte-identical"


_CHECKS = [
    ("geometry-roundtrip", check_geometry_roundtrip),
    ("gt-identity", check_gt_identity),
    ("gt-raytrace", check_gt_raytrace),
    ("metric-oracles", check_metric_oracles),
    ("mutualnn-oracle", check_mutual_oracle),
    ("smoothap-grad", check_smoothap_grad),
    ("smoothap-limit", check_smoothap_limit),
    ("conv-oracle", check_conv_oracle),
    ("coarse-to-fine", check_coarse_to_fine),
    ("pnp-recovery", check_pnp_recovery),
    ("tracking-fixture", check_tracking_fixture),
    ("determinism", check_determinism),
]


def run_selfcheck() -> list[CheckResult]:
    results = []
    for name, fn in _CHECKS:
        start = time.perf_counter()
        try:
            passed, detail = fn()
        except MveqError as exc:
            passed, detail = False, f"error: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results
