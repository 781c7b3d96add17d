"""Command-line entry points.

Commands: gen-synth, eval-equivariance, train-head, eval-pose, eval-track,
eval-semcorr, calibrate-occ, selfcheck. Global flags --seed, --threads,
--report. Exit codes: 0 ok, 1 usage, 2 data error, 3 failed check.

Heavy imports happen inside command handlers so that --threads can pin BLAS
thread counts before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage is 1
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="mveq", description=__doc__)
    p.add_argument("--threads", type=int, default=1, help="BLAS/compute threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate an analytic synthetic fixture")
    g.add_argument("--scene", default="sphere", help="sphere|box|boxsphere|plane")
    g.add_argument("--n-views", type=int, default=8)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--cam-radius", type=float, default=3.0)
    g.add_argument("--layout", choices=["sphere", "ring"], default="sphere")
    g.add_argument("--features", choices=["none", "oracle"], default="oracle")
    g.add_argument("--noise", type=float, default=0.0, help="feature noise sigma")
    g.add_argument("--patch", type=int, default=1, help="feature patch size")
    g.add_argument("--lift", type=float, default=4.0, help="constant lift channel")
    g.add_argument("--duplicate-first", action="store_true",
                   help="append a copy of view 0's camera (identical-view pair)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    e = sub.add_parser("eval-equivariance", help="APE/PCDP over all view pairs")
    e.add_argument("--manifest", required=True)
    e.add_argument("--stride", type=int, default=4, help="query grid stride")
    e.add_argument("--search", choices=["fg", "full", "both"], default="fg")
    e.add_argument("--head", help="HED1 checkpoint applied before sampling")
    e.add_argument("--occ-abs", type=float, default=1e-4)
    e.add_argument("--occ-rel", type=float, default=0.01)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", required=True)

    t = sub.add_parser("train-head", help="finetune the conv head on GT correspondences")
    t.add_argument("--manifest", required=True)
    t.add_argument("--iterations", type=int, default=1000)
    t.add_argument("--pixels-per-pair", type=int, default=256)
    t.add_argument("--loss", choices=["smooth_ap", "contrastive"], default="smooth_ap")
    t.add_argument("--tau", type=float, default=1.0)
    t.add_argument("--temp", type=float, default=0.07)
    t.add_argument("--lr", type=float, default=1e-5)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--layers", type=int, default=1)
    t.add_argument("--no-residual", action="store_true")
    t.add_argument("--corr-stride", type=int, default=1)
    t.add_argument("--include-self-term", action="store_true")
    t.add_argument("--positive-mode", choices=["nearest", "ball"], default="nearest")
    t.add_argument("--positive-radius", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="HED1 checkpoint path")
    t.add_argument("--loss-csv", help="per-iteration loss curve CSV")
    t.add_argument("--report")

    po = sub.add_parser("eval-pose", help="one-shot pose estimation accuracy")
    po.add_argument("--manifest", required=True)
    po.add_argument("--ransac-iters", type=int, default=10000)
    po.add_argument("--threshold", type=float, default=8.0,
                    help="inlier threshold in px at the manifest working resolution")
    po.add_argument("--stride", type=int, default=4)
    po.add_argument("--ref-views", help="e.g. 0-31 or 0,2,4 (default: first 3/4)")
    po.add_argument("--query-views", help="e.g. 32-41 (default: the rest)")
    po.add_argument("--score-floor", type=float)
    po.add_argument("--no-refine", action="store_true")
    po.add_argument("--head")
    po.add_argument("--seed", type=int, default=0)
    po.add_argument("--report", required=True)

    tr = sub.add_parser("eval-track", help="point tracking over a frame sequence")
    tr.add_argument("--frames", required=True, help="directory of FTB1 files (sorted)")
    tr.add_argument("--queries", required=True, help="JSON: [{point: [x,y], frame: t}]")
    tr.add_argument("--gt", required=True, help="JSON: per-point per-frame [x, y, visible]")
    tr.add_argument("--refine-radius", type=int, default=3)
    tr.add_argument("--temperature", type=float, default=0.05)
    tr.add_argument("--occ-threshold", type=float, default=0.55)
    tr.add_argument("--eval-size", type=int, default=256)
    tr.add_argument("--head")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--report", required=True)

    se = sub.add_parser("eval-semcorr", help="semantic keypoint transfer PCK")
    se.add_argument("--pairs", required=True, help="pair manifest JSON")
    se.add_argument("--features-dir", required=True, help="directory of <id>.ftb files")
    se.add_argument("--head")
    se.add_argument("--seed", type=int, default=0)
    se.add_argument("--report", required=True)

    ca = sub.add_parser("calibrate-occ", help="sweep occlusion threshold to maximize OA")
    ca.add_argument("--frames", required=True)
    ca.add_argument("--queries", required=True)
    ca.add_argument("--gt", required=True)
    ca.add_argument("--refine-radius", type=int, default=3)
    ca.add_argument("--temperature", type=float, default=0.05)
    ca.add_argument("--head")
    ca.add_argument("--seed", type=int, default=0)
    ca.add_argument("--report", required=True)

    sc = sub.add_parser("selfcheck", help="run the built-in oracle suites")
    sc.add_argument("--report")
    sc.add_argument("--seed", type=int, default=0)
    return p


def _set_threads(n: int) -> None:
    # Must run before numpy loads; command handlers import lazily for this.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(n)


def _parse_indices(text: str | None):
    if text is None:
        return None
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _load_head(path):
    if not path:
        return None
    from .convhead import load_head

    return load_head(path)


def _emit(report_path, report: dict) -> None:
    from .manifest import write_json_atomic

    if report_path:
        write_json_atomic(report_path, report)
    print(json.dumps({k: v for k, v in report.items() if k not in ("config", "per_frame")},
                     sort_keys=True, indent=2))


def cmd_gen_synth(args) -> int:
    from .featstore import save_feature_map
    from .geometry import save_depth
    from .manifest import DatasetManifest, ObjectEntry, ViewEntry, save_manifest
    from .synth import OracleFeatureSpec, scene_preset, synth_views

    if args.n_views < 2:
        raise SystemExit("gen-synth needs --n-views >= 2")
    scene = scene_preset(args.scene)
    spec = None
    if args.features == "oracle":
        spec = OracleFeatureSpec(patch=args.patch, lift=args.lift, noise_sigma=args.noise)
    views = synth_views(
        scene, args.n_views, image_size=args.image_size, cam_radius=args.cam_radius,
        feature_spec=spec, seed=args.seed, duplicate_first=args.duplicate_first,
        layout=args.layout,
    )
    out = args.out
    os.makedirs(out, exist_ok=True)
    entries = []
    for i, view in enumerate(views):
        depth_rel = f"view{i:03d}.dpt"
        save_depth(os.path.join(out, depth_rel), view.depth)
        feat_rel = None
        if view.features is not None:
            feat_rel = f"view{i:03d}.ftb"
            save_feature_map(os.path.join(out, feat_rel), view.features)
        entries.append(ViewEntry(view.intrinsics, view.pose, depth_rel, feat_rel))
    manifest = DatasetManifest(
        units="meters",
        working_resolution=args.image_size,
        objects=[ObjectEntry(object_id=f"{args.scene}0", views=entries)],
    )
    save_manifest(os.path.join(out, "manifest.json"), manifest)
    print(f"wrote {len(views)} views to {out}")
    return 0


def cmd_eval_equivariance(args) -> int:
    from .geometry import OcclusionTolerance
    from .manifest import load_manifest, make_report
    from .tasks import eval_equivariance, load_object_views

    manifest = load_manifest(args.manifest)
    views = load_object_views(manifest, head=_load_head(args.head))
    payload = eval_equivariance(
        views,
        stride=args.stride,
        occ_tol=OcclusionTolerance(abs_tol=args.occ_abs, rel_tol=args.occ_rel),
        search=args.search,
    )
    config = {
        "manifest": os.path.abspath(args.manifest), "stride": args.stride,
        "search": args.search, "head": args.head and os.path.abspath(args.head),
        "occ_abs": args.occ_abs, "occ_rel": args.occ_rel, "seed": args.seed,
    }
    _emit(args.report, make_report("eval-equivariance", config, payload))
    return 0


def cmd_train_head(args) -> int:
    from .convhead import TrainConfig, save_head, save_loss_curve, train
    from .manifest import load_manifest, make_report
    from .tasks import load_object_views

    manifest = load_manifest(args.manifest)
    views = load_object_views(manifest)
    cfg = TrainConfig(
        iterations=args.iterations,
        pixels_per_pair=args.pixels_per_pair,
        seed=args.seed,
        loss=args.loss,
        tau=args.tau,
        temp=args.temp,
        lr=args.lr,
        weight_decay=args.weight_decay,
        n_layers=args.layers,
        residual=not args.no_residual,
        corr_stride=args.corr_stride,
        include_self_term=args.include_self_term,
        positive_mode=args.positive_mode,
        positive_radius=args.positive_radius,
    )
    params, losses = train(views, cfg)
    save_head(args.out, params)
    if args.loss_csv:
        save_loss_curve(args.loss_csv, losses)
    config = {
        "manifest": os.path.abspath(args.manifest), "iterations": args.iterations,
        "pixels_per_pair": args.pixels_per_pair, "loss": args.loss, "tau": args.tau,
        "temp": args.temp, "lr": args.lr, "weight_decay": args.weight_decay,
        "layers": args.layers, "residual": not args.no_residual,
        "corr_stride": args.corr_stride, "seed": args.seed,
    }
    payload = {
        "checkpoint": os.path.abspath(args.out),
        "final_loss": losses[-1] if losses else None,
        "iterations": len(losses),
    }
    _emit(args.report, make_report("train-head", config, payload))
    return 0


def cmd_eval_pose(args) -> int:
    from .manifest import load_manifest, make_report
    from .pose import RansacConfig
    from .tasks import eval_pose, load_object_views

    manifest = load_manifest(args.manifest)
    views = load_object_views(manifest, head=_load_head(args.head))
    sizes = [
        min(v.intrinsics.width, v.intrinsics.height)
        for records in views.values()
        for v in records
    ]
    # The paper's threshold is defined at the manifest working resolution.
    scale = min(sizes) / manifest.working_resolution
    cfg = RansacConfig(
        iterations=args.ransac_iters,
        inlier_threshold=args.threshold * scale,
        seed=args.seed,
        refine=not args.no_refine,
    )
    payload = eval_pose(
        views,
        _parse_indices(args.ref_views),
        _parse_indices(args.query_views),
        cfg,
        match_stride=args.stride,
        units=manifest.units,
        score_floor=args.score_floor,
    )
    config = {
        "manifest": os.path.abspath(args.manifest), "ransac_iters": args.ransac_iters,
        "threshold": args.threshold, "stride": args.stride,
        "ref_views": args.ref_views, "query_views": args.query_views,
        "score_floor": args.score_floor, "refine": not args.no_refine,
        "head": args.head and os.path.abspath(args.head), "seed": args.seed,
    }
    _emit(args.report, make_report("eval-pose", config, payload))
    return 0


def _load_track_inputs(args):
    from .convhead import head_forward
    from .errors import DataError
    from .featstore import load_feature_map
    from .tracking import TrackQuery

    frame_dir = args.frames
    names = sorted(n for n in os.listdir(frame_dir) if n.endswith((".ftb", ".ftb1")))
    if not names:
        raise DataError(f"no FTB1 files in {frame_dir}")
    frames = [load_feature_map(os.path.join(frame_dir, n)) for n in names]
    head = _load_head(args.head)
    if head is not None:
        frames = [head_forward(f, head) for f in frames]
    with open(args.queries, "r", encoding="utf-8") as fh:
        queries = [TrackQuery(point=tuple(q["point"]), frame_index=int(q.get("frame", 0)))
                   for q in json.load(fh)]
    with open(args.gt, "r", encoding="utf-8") as fh:
        gt_raw = json.load(fh)
    import numpy as np

    gt_arr = np.asarray(gt_raw, dtype=np.float64)  # (P, F, 3): x, y, visible
    if gt_arr.ndim != 3 or gt_arr.shape[2] != 3:
        raise DataError("GT tracks must be per-point arrays of [x, y, visible] per frame")
    return frames, queries, gt_arr[:, :, :2], gt_arr[:, :, 2] > 0.5


def cmd_eval_track(args) -> int:
    from .manifest import make_report
    from .tracking import TrackConfig, evaluate_tracking, track

    frames, queries, gt_pos, gt_vis = _load_track_inputs(args)
    cfg = TrackConfig(
        refine_radius=args.refine_radius,
        temperature=args.temperature,
        occ_threshold=args.occ_threshold,
    )
    results = track(frames, queries, cfg)
    report = evaluate_tracking(
        results, gt_pos, gt_vis, src_size=(frames[0].img_w, frames[0].img_h),
        eval_size=args.eval_size,
    )
    config = {
        "frames": os.path.abspath(args.frames), "queries": os.path.abspath(args.queries),
        "gt": os.path.abspath(args.gt), "refine_radius": args.refine_radius,
        "temperature": args.temperature, "occ_threshold": args.occ_threshold,
        "eval_size": args.eval_size, "head": args.head and os.path.abspath(args.head),
        "seed": args.seed,
    }
    payload = {"tracking": report.to_dict(), "n_points": len(queries), "n_frames": len(frames)}
    _emit(args.report, make_report("eval-track", config, payload))
    return 0


def cmd_calibrate_occ(args) -> int:
    from .manifest import make_report
    from .tracking import TrackConfig, calibrate_occlusion_threshold, track

    frames, queries, _, gt_vis = _load_track_inputs(args)
    cfg = TrackConfig(refine_radius=args.refine_radius, temperature=args.temperature)
    results = track(frames, queries, cfg)
    thr, oa = calibrate_occlusion_threshold(results, gt_vis)
    config = {
        "frames": os.path.abspath(args.frames), "queries": os.path.abspath(args.queries),
        "gt": os.path.abspath(args.gt), "refine_radius": args.refine_radius,
        "temperature": args.temperature, "head": args.head and os.path.abspath(args.head),
        "seed": args.seed,
    }
    _emit(args.report, make_report("calibrate-occ", config,
                                   {"best_threshold": thr, "best_oa": oa}))
    return 0


def cmd_eval_semcorr(args) -> int:
    from .convhead import head_forward
    from .errors import DataError
    from .featstore import load_feature_map
    from .manifest import make_report
    from .semcorr import KeypointPair, evaluate_semcorr

    with open(args.pairs, "r", encoding="utf-8") as fh:
        raw_pairs = json.load(fh)
    pairs = [
        KeypointPair(
            src_image=p["src"], dst_image=p["dst"],
            src_kpts=p["src_kpts"], dst_kpts=p["dst_kpts"],
            dst_bbox=tuple(p["dst_bbox"]) if p.get("dst_bbox") else None,
        )
        for p in raw_pairs
    ]
    head = _load_head(args.head)
    feats = {}
    for pair in pairs:
        for image_id in (pair.src_image, pair.dst_image):
            if image_id in feats:
                continue
            for suffix in (".ftb", ".ftb1"):
                path = os.path.join(args.features_dir, image_id + suffix)
                if os.path.exists(path):
                    fmap = load_feature_map(path)
                    feats[image_id] = head_forward(fmap, head) if head else fmap
                    break
    if not feats:
        raise DataError(f"no feature files found under {args.features_dir}")
    payload = evaluate_semcorr(pairs, feats)
    config = {
        "pairs": os.path.abspath(args.pairs),
        "features_dir": os.path.abspath(args.features_dir),
        "head": args.head and os.path.abspath(args.head), "seed": args.seed,
    }
    _emit(args.report, make_report("eval-semcorr", config, payload))
    return 0


def cmd_selfcheck(args) -> int:
    from .manifest import make_report
    from .selfcheck import run_selfcheck

    results = run_selfcheck()
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  {r.seconds:6.2f}s  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    if args.report:
        # No wall-clock times in the report: identical configs must emit
        # identical bytes (timings stay on the console table).
        payload = {
            "checks": [
                {"name": r.name, "passed": r.passed, "detail": r.detail} for r in results
            ],
            "passed": n_fail == 0,
        }
        _emit(args.report, make_report("selfcheck", {"seed": args.seed}, payload))
    return 3 if n_fail else 0


_HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "eval-equivariance": cmd_eval_equivariance,
    "train-head": cmd_train_head,
    "eval-pose": cmd_eval_pose,
    "eval-track": cmd_eval_track,
    "eval-semcorr": cmd_eval_semcorr,
    "calibrate-occ": cmd_calibrate_occ,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _set_threads(args.threads)
    from .errors import DataError, MveqError

    try:
        return _HANDLERS[args.command](args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MveqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
