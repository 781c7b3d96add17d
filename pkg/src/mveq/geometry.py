"""Pinhole camera math, ground-truth correspondences and analytic scenes.

Coordinate conventions (used by every module in this package):

  * Image points are pixel-index coordinates: the center of pixel
    (row i, col j) is exactly (x=j, y=i). Intrinsics cx, cy live in the
    same scale. A continuous point is in bounds iff it lies inside the
    convex hull of pixel centers, 0 <= x <= W-1 and 0 <= y <= H-1, so
    bilinear lookups never extrapolate.
  * Poses are world-to-camera: p_cam = R @ p_world + t.
  * Depth maps store distance along the camera optical axis (Z), not ray
    length. Values <= 0 mark invalid/background pixels.

All operations here are pure over immutable inputs; evaluating view pairs or
pixels in parallel requires no synchronization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CameraPlaneError,
    ConfigurationError,
    FormatError,
    InvalidDepthError,
    InvalidRotationError,
)

_DPT1_MAGIC = b"DPT1"


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )


class RigidPose:
    """World-to-camera rigid transform: p_cam = rotation @ p_world + translation."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        r = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ConfigurationError(f"rotation must be 3x3, got {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidRotationError("rotation is not orthonormal with unit determinant (tol 1e-9)")
        self.rotation = r
        self.rotation.flags.writeable = False
        self.translation = t
        self.translation.flags.writeable = False

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates, -R^T t."""
        return -self.rotation.T @ self.translation

    def compose_world_point(self, p_cam: np.ndarray) -> np.ndarray:
        return self.rotation.T @ (p_cam - self.translation)


@dataclass
class DepthMap:
    """Optical-axis depth per pixel; <= 0 means invalid/background."""

    values: np.ndarray  # (H, W) float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ConfigurationError(f"depth map must be 2D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("depth map contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class CorrespondenceSet:
    """Ground-truth pixel pairs x1 (in view A) -> x2 (in view B)."""

    view_a: str
    view_b: str
    x1: np.ndarray  # (N, 2) float64, pixel-index coords in A
    x2: np.ndarray  # (N, 2) float64, pixel-index coords in B
    image_w: int  # view B dims (metric normalization uses these)
    image_h: int
    n_rejected: int = 0

    def __len__(self) -> int:
        return self.x1.shape[0]


@dataclass(frozen=True)
class OcclusionTolerance:
    """Combined absolute/relative depth-agreement test.

    A reprojected point with camera depth z matches the target depth d when
    |z - d| <= max(abs_tol, rel_tol * z).
    """

    abs_tol: float = 1e-4
    rel_tol: float = 0.01


# --- analytic scene primitives -------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigurationError("sphere radius must be positive")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by componentwise min/max corners."""

    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]

    def __post_init__(self):
        if not all(a < b for a, b in zip(self.min_corner, self.max_corner)):
            raise ConfigurationError("box min corner must be strictly below max corner")


@dataclass(frozen=True)
class Plane:
    """Points p with normal . p = offset."""

    normal: tuple[float, float, float]
    offset: float


@dataclass
class SyntheticScene:
    primitives: list = field(default_factory=list)

    def __post_init__(self):
        if not self.primitives:
            raise ConfigurationError("scene must contain at least one primitive")


# --- core camera operations ----------------------------------------------------


def backproject(x, depth: float, k: Intrinsics, pose: RigidPose) -> np.ndarray:
    """Lift pixel x at the given optical-axis depth to a world point."""
    if depth <= 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    u, v = float(x[0]), float(x[1])
    p_cam = np.array([depth * (u - k.cx) / k.fx, depth * (v - k.cy) / k.fy, depth])
    return pose.rotation.T @ (p_cam - pose.translation)


def backproject_many(xy: np.ndarray, depths: np.ndarray, k: Intrinsics, pose: RigidPose) -> np.ndarray:
    """Vectorized backproject: (N, 2) pixels + (N,) depths -> (N, 3) world points."""
    xy = np.asarray(xy, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    p_cam = np.empty((xy.shape[0], 3))
    p_cam[:, 0] = depths * (xy[:, 0] - k.cx) / k.fx
    p_cam[:, 1] = depths * (xy[:, 1] - k.cy) / k.fy
    p_cam[:, 2] = depths
    return (p_cam - pose.translation) @ pose.rotation


def project(p, k: Intrinsics, pose: RigidPose) -> tuple[tuple[float, float], float]:
    """Project world point p; returns ((u, v), camera depth Z).

    Z's sign/bounds are the caller's to inspect; only a point numerically on
    the camera plane is an error.
    """
    p_cam = pose.rotation @ np.asarray(p, dtype=np.float64) + pose.translation
    z = p_cam[2]
    if abs(z) < 1e-12:
        raise CameraPlaneError("point lies on the camera plane")
    return (k.fx * p_cam[0] / z + k.cx, k.fy * p_cam[1] / z + k.cy), float(z)


def project_many(pts: np.ndarray, k: Intrinsics, pose: RigidPose) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized project; points at |Z| < 1e-12 get NaN pixel coords."""
    p_cam = np.asarray(pts, dtype=np.float64) @ pose.rotation.T + pose.translation
    z = p_cam[:, 2].copy()
    safe = np.where(np.abs(z) < 1e-12, np.nan, z)
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = k.fx * p_cam[:, 0] / safe + k.cx
    uv[:, 1] = k.fy * p_cam[:, 1] / safe + k.cy
    return uv, z


def sample_depth_bilinear(depth: DepthMap, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth at continuous pixel coords, rejecting invalid stencils.

    Returns (values, valid). A sample is invalid when any stencil neighbor
    with nonzero weight is <= 0 (never interpolate across a silhouette).
    Callers must pass in-bounds coords (0 <= x <= W-1).
    """
    d = depth.values
    h, w = d.shape
    xy = np.asarray(xy, dtype=np.float64)
    gx = np.clip(xy[:, 0], 0.0, w - 1.0)
    gy = np.clip(xy[:, 1], 0.0, h - 1.0)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    if w > 1:
        x0 = np.minimum(x0, w - 2)
    if h > 1:
        y0 = np.minimum(y0, h - 2)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = gx - x0
    fy = gy - y0
    weights = np.stack(
        [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=0
    )
    corners = np.stack([d[y0, x0], d[y0, x1], d[y1, x0], d[y1, x1]], axis=0)
    values = (weights * corners).sum(axis=0)
    valid = np.all((weights <= 1e-12) | (corners > 0.0), axis=0)
    return values, valid


def gt_correspondences(
    a,
    b,
    stride: int = 1,
    occ_tol: OcclusionTolerance = OcclusionTolerance(),
) -> CorrespondenceSet:
    """Ground-truth correspondences from A's valid-depth stride grid into B.

    Each valid pixel of A is back-projected to 3D and reprojected into B; the
    pair is kept iff the reprojection is in front of the camera, in bounds,
    and agrees with B's (bilinearly sampled) depth within occ_tol.
    """
    if a.depth is None or b.depth is None:
        raise ConfigurationError("both views need a depth map for GT correspondences")
    if (a.depth.height, a.depth.width) != (a.intrinsics.height, a.intrinsics.width):
        raise ConfigurationError("view A depth dims disagree with its intrinsics")
    if (b.depth.height, b.depth.width) != (b.intrinsics.height, b.intrinsics.width):
        raise ConfigurationError("view B depth dims disagree with its intrinsics")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")

    da = a.depth.values
    vs, us = np.meshgrid(
        np.arange(0, da.shape[0], stride), np.arange(0, da.shape[1], stride), indexing="ij"
    )
    us = us.ravel()
    vs = vs.ravel()
    dvals = da[vs, us]
    sel = dvals > 0.0
    x1 = np.stack([us[sel], vs[sel]], axis=1).astype(np.float64)
    dvals = dvals[sel]

    world = backproject_many(x1, dvals, a.intrinsics, a.pose)
    x2, z = project_many(world, b.intrinsics, b.pose)

    wb, hb = b.intrinsics.width, b.intrinsics.height
    keep = (z > 1e-12) & np.all(np.isfinite(x2), axis=1)
    keep &= (x2[:, 0] >= 0.0) & (x2[:, 0] <= wb - 1.0)
    keep &= (x2[:, 1] >= 0.0) & (x2[:, 1] <= hb - 1.0)

    idx = np.nonzero(keep)[0]
    if idx.size:
        depth_b, valid_b = sample_depth_bilinear(b.depth, x2[idx])
        tol = np.maximum(occ_tol.abs_tol, occ_tol.rel_tol * z[idx])
        ok = valid_b & (np.abs(z[idx] - depth_b) <= tol)
        idx = idx[ok]

    return CorrespondenceSet(
        view_a=a.view_id,
        view_b=b.view_id,
        x1=x1[idx],
        x2=x2[idx],
        image_w=wb,
        image_h=hb,
        n_rejected=int(x1.shape[0] - idx.size),
    )


# --- analytic ray tracing ------------------------------------------------------


def _ray_grid(k: Intrinsics, pose: RigidPose) -> tuple[np.ndarray, np.ndarray]:
    """World-space rays through every pixel center, parameterized so that the
    ray parameter equals optical-axis depth (camera-frame z of the direction
    is 1)."""
    us, vs = np.meshgrid(np.arange(k.width), np.arange(k.height), indexing="xy")
    d_cam = np.stack(
        [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us, dtype=np.float64)], axis=-1
    )
    d_world = d_cam.reshape(-1, 3) @ pose.rotation  # R^T applied row-wise
    origin = pose.camera_center()
    return origin, d_world


def _intersect_sphere(origin, dirs, sphere: Sphere) -> np.ndarray:
    oc = origin - np.asarray(sphere.center, dtype=np.float64)
    a = np.einsum("ij,ij->i", dirs, dirs)
    bq = 2.0 * dirs @ oc
    cq = oc @ oc - sphere.radius**2
    disc = bq * bq - 4.0 * a * cq
    t = np.full(dirs.shape[0], np.inf)
    hit = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = (-bq - sq) / (2.0 * a)
    t2 = (-bq + sq) / (2.0 * a)
    near = np.where(t1 > 1e-12, t1, np.where(t2 > 1e-12, t2, np.inf))
    t[hit] = near[hit]
    return t


def _intersect_box(origin, dirs, box: Box) -> np.ndarray:
    lo = np.asarray(box.min_corner, dtype=np.float64)
    hi = np.asarray(box.max_corner, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    # Axis-parallel rays: inside the slab -> (-inf, inf), outside -> empty.
    par = np.abs(dirs) < 1e-300
    inside = (origin >= lo) & (origin <= hi)
    t0 = np.where(par, np.where(inside, -np.inf, np.inf), t0)
    t1 = np.where(par, np.where(inside, np.inf, -np.inf), t1)
    tmin = np.minimum(t0, t1).max(axis=1)
    tmax = np.maximum(t0, t1).min(axis=1)
    t = np.where(tmin > 1e-12, tmin, tmax)  # inside the box: exit face
    miss = (tmax < tmin) | (t <= 1e-12)
    return np.where(miss, np.inf, t)


def _intersect_plane(origin, dirs, plane: Plane) -> np.ndarray:
    n = np.asarray(plane.normal, dtype=np.float64)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane.offset - origin @ n) / denom
    t = np.where((np.abs(denom) < 1e-300) | (t <= 1e-12) | ~np.isfinite(t), np.inf, t)
    return t


_INTERSECTORS = {Sphere: _intersect_sphere, Box: _intersect_box, Plane: _intersect_plane}


def raytrace_depth(scene: SyntheticScene, k: Intrinsics, pose: RigidPose) -> DepthMap:
    """Per-pixel nearest intersection as optical-axis depth; 0 where no hit."""
    origin, dirs = _ray_grid(k, pose)
    best = np.full(dirs.shape[0], np.inf)
    for prim in scene.primitives:
        t = _INTERSECTORS[type(prim)](origin, dirs, prim)
        best = np.minimum(best, t)
    depth = np.where(np.isfinite(best), best, 0.0)
    return DepthMap(depth.reshape(k.height, k.width))


def rotation_error_deg(ra, rb) -> float:
    """Geodesic angle between two rotations, in degrees."""
    ra = np.asarray(ra, dtype=np.float64)
    rb = np.asarray(rb, dtype=np.float64)
    for name, r in (("ra", ra), ("rb", rb)):
        if r.shape != (3, 3) or np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise InvalidRotationError(f"{name} is not orthonormal within 1e-6")
    cos_angle = np.clip((np.trace(ra.T @ rb) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos_angle)))


# --- DPT1 depth file format ------------------------------------------------


def save_depth(path, depth: DepthMap) -> None:
    """Write the DPT1 format: magic, u32 LE width/height, f32 LE row-major."""
    payload = depth.values.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_DPT1_MAGIC)
        fh.write(struct.pack("<II", depth.width, depth.height))
        fh.write(payload)


def load_depth(path) -> DepthMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _DPT1_MAGIC:
        raise FormatError(f"bad DPT1 magic in {path}", offset=0)
    if len(blob) < 12:
        raise FormatError(f"truncated DPT1 header in {path}", offset=len(blob))
    width, height = struct.unpack_from("<II", blob, 4)
    expected = 12 + 4 * width * height
    if len(blob) < expected:
        raise FormatError(f"truncated DPT1 payload in {path}", offset=len(blob))
    values = np.frombuffer(blob, dtype="<f4", count=width * height, offset=12)
    values = values.reshape(height, width).astype(np.float64)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise FormatError(f"non-finite depth value in {path}", offset=12 + 4 * bad)
    return DepthMap(values)
