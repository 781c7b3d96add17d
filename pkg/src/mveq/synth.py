"""Analytic synthetic fixtures: camera rings, ray-traced depth, oracle features.

Cameras sit on a Fibonacci sphere looking at the origin, mimicking a
uniformly distributed multi-view capture. "Oracle" feature maps encode each
patch center's 3D surface point (x, y, z, lift): with lift much larger than
the scene radius, cosine similarity between lifted vectors decreases
monotonically with 3D distance, so the true nearest-neighbor correspondence
is known analytically. Optional iid Gaussian noise on the coordinate
channels gives fixtures with a closed-form error model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .featstore import FeatureMap
from .geometry import (
    Box,
    Intrinsics,
    Plane,
    RigidPose,
    Sphere,
    SyntheticScene,
    raytrace_depth,
)
from .records import ViewRecord
from .rng import SplitMix64

SCENE_PRESETS = ("sphere", "box", "boxsphere", "plane")


def scene_preset(name: str) -> SyntheticScene:
    if name == "sphere":
        return SyntheticScene([Sphere((0.0, 0.0, 0.0), 1.0)])
    if name == "box":
        return SyntheticScene([Box((-0.7, -0.5, -0.6), (0.7, 0.5, 0.6))])
    if name == "boxsphere":
        return SyntheticScene(
            [Box((-0.9, -0.6, -0.4), (0.1, 0.6, 0.4)), Sphere((0.7, 0.0, 0.0), 0.45)]
        )
    if name == "plane":
        return SyntheticScene([Plane((0.0, 0.0, 1.0), 0.0)])
    raise ConfigurationError(f"unknown scene preset {name!r}; choose from {SCENE_PRESETS}")


def fibonacci_sphere(n: int) -> np.ndarray:
    """n approximately uniform unit directions (golden-angle spiral)."""
    if n < 1:
        raise ConfigurationError("need at least one direction")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * (np.pi * (3.0 - np.sqrt(5.0)))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> RigidPose:
    """World-to-camera pose for a camera at eye looking at target.

    Camera frame is the usual CV one: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(fwd, up)) < 1e-6:
        up = np.array([0.0, 1.0, 0.0])  # gaze parallel to up: switch axis
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    return RigidPose(r, -r @ eye)


def ring_intrinsics(image_size: int, focal_scale: float = 1.2) -> Intrinsics:
    c = (image_size - 1) / 2.0
    return Intrinsics(
        fx=focal_scale * image_size,
        fy=focal_scale * image_size,
        cx=c,
        cy=c,
        width=image_size,
        height=image_size,
    )


def generate_cameras(
    n_views: int,
    image_size: int = 64,
    cam_radius: float = 3.0,
    focal_scale: float = 1.2,
    layout: str = "sphere",
) -> list[tuple[Intrinsics, RigidPose]]:
    """Cameras looking at the origin: 'sphere' covers all directions
    (Fibonacci spiral), 'ring' circles above the scene (every view overlaps
    every other, useful for plane scenes)."""
    k = ring_intrinsics(image_size, focal_scale)
    if layout == "sphere":
        dirs = fibonacci_sphere(n_views)
    elif layout == "ring":
        ang = 2.0 * np.pi * np.arange(n_views) / n_views
        dirs = np.stack(
            [0.433 * np.cos(ang), 0.433 * np.sin(ang), np.full(n_views, 0.901)], axis=1
        )
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    else:
        raise ConfigurationError(f"unknown camera layout {layout!r}")
    return [(k, look_at(cam_radius * d)) for d in dirs]


@dataclass(frozen=True)
class OracleFeatureSpec:
    patch: int = 1
    lift: float = 4.0
    noise_sigma: float = 0.0
    background_point: tuple[float, float, float] = (0.0, 0.0, -8.0)


def oracle_feature_map(
    scene: SyntheticScene,
    k: Intrinsics,
    pose: RigidPose,
    spec: OracleFeatureSpec,
    rng: SplitMix64,
) -> FeatureMap:
    """World-coordinate features at patch centers (see module docstring).

    The surface point under each patch center is obtained by ray tracing at
    the center ray itself, not by depth-map lookup, so the encoding is exact
    for any patch size.
    """
    import math

    hf = math.ceil(k.height / spec.patch)
    wf = math.ceil(k.width / spec.patch)
    jj, ii = np.meshgrid(np.arange(wf), np.arange(hf), indexing="xy")
    cx = (jj.ravel() + 0.5) * spec.patch - 0.5
    cy = (ii.ravel() + 0.5) * spec.patch - 0.5

    # Depth along each patch-center ray (same parameterization as raytrace_depth).
    origin = pose.camera_center()
    d_cam = np.stack(
        [(cx - k.cx) / k.fx, (cy - k.cy) / k.fy, np.ones_like(cx)], axis=1
    )
    dirs = d_cam @ pose.rotation
    from .geometry import _INTERSECTORS  # analytic per-primitive intersection

    best = np.full(dirs.shape[0], np.inf)
    for prim in scene.primitives:
        best = np.minimum(best, _INTERSECTORS[type(prim)](origin, dirs, prim))
    hit = np.isfinite(best)
    world = np.broadcast_to(np.asarray(spec.background_point), (dirs.shape[0], 3)).copy()
    world[hit] = origin + best[hit, None] * dirs[hit]

    data = np.empty((hf * wf, 4), dtype=np.float64)
    data[:, :3] = world
    data[:, 3] = spec.lift
    if spec.noise_sigma > 0.0:
        noise = rng.normal_array(hf * wf * 3).reshape(hf * wf, 3)
        data[:, :3] += spec.noise_sigma * noise
    return FeatureMap(
        data.reshape(hf, wf, 4).astype(np.float32), spec.patch, k.width, k.height
    )


def random_rotation(rng: SplitMix64) -> np.ndarray:
    """Uniform-ish random rotation from a normalized Gaussian quaternion."""
    q = rng.normal_array(4)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose(rng: SplitMix64, t_scale: float = 2.0) -> RigidPose:
    r = random_rotation(rng)
    t = rng.normal_array(3) * t_scale
    return RigidPose(r, t)


def synth_views(
    scene: SyntheticScene,
    n_views: int,
    image_size: int = 64,
    cam_radius: float = 3.0,
    feature_spec: OracleFeatureSpec | None = None,
    seed: int = 0,
    duplicate_first: bool = False,
    layout: str = "sphere",
) -> list[ViewRecord]:
    """Ray-traced ViewRecords (and oracle features when requested).

    duplicate_first appends a copy of view 0's camera as an extra view, which
    gives fixtures an identical-view pair with exactly integral GT targets.
    """
    cams = generate_cameras(n_views, image_size, cam_radius, layout=layout)
    if duplicate_first:
        cams.append(cams[0])
    views = []
    for idx, (k, pose) in enumerate(cams):
        depth = raytrace_depth(scene, k, pose)
        features = None
        if feature_spec is not None:
            features = oracle_feature_map(scene, k, pose, feature_spec, SplitMix64(seed, stream=idx))
        views.append(ViewRecord(f"view{idx:03d}", k, pose, depth, features))
    return views
