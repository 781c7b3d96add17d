"""Dense feature maps: FTB1 loading, normalization, per-pixel interpolation.

Feature grids live at patch resolution (hf = ceil(H/p), wf = ceil(W/p)). A
pixel-index coordinate x maps to the feature grid at

    u_f = (x + 0.5) / p - 0.5

so the center pixel of patch (i, j) lands exactly on grid node (i, j). Grid
coords are clamped (border cells replicate). Normalization happens after
interpolation; outputs are float64 unit vectors.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, DegenerateFeatureError, FormatError

_FTB1_MAGIC = b"FTB1"


@dataclass
class FeatureMap:
    """Patch-resolution feature tensor for one image."""

    data: np.ndarray  # (hf, wf, C) float32
    patch: int
    img_w: int
    img_h: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ConfigurationError(f"feature data must be (hf, wf, C), got {self.data.shape}")
        if self.patch < 1:
            raise ConfigurationError(f"patch size must be >= 1, got {self.patch}")
        hf, wf = self.data.shape[:2]
        if hf != math.ceil(self.img_h / self.patch) or wf != math.ceil(self.img_w / self.patch):
            raise ConfigurationError(
                f"grid {hf}x{wf} inconsistent with image {self.img_w}x{self.img_h} at patch {self.patch}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ConfigurationError("feature map contains non-finite values")

    @property
    def hf(self) -> int:
        return self.data.shape[0]

    @property
    def wf(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def grid_coords(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-index coords -> (clamped) feature grid coords."""
        xy = np.asarray(xy, dtype=np.float64)
        gx = np.clip((xy[..., 0] + 0.5) / self.patch - 0.5, 0.0, self.wf - 1.0)
        gy = np.clip((xy[..., 1] + 0.5) / self.patch - 0.5, 0.0, self.hf - 1.0)
        return gx, gy


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """v / ||v||_2 as float64; raises on (near-)zero vectors."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise DegenerateFeatureError("cannot normalize a zero feature vector")
    return v / norm


def l2_normalize_rows(mat: np.ndarray, on_zero: str = "raise") -> np.ndarray:
    """Row-wise normalization; on_zero is 'raise' or 'zero' (leave zero rows)."""
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    zero = norms[:, 0] < 1e-12
    if zero.any():
        if on_zero == "raise":
            raise DegenerateFeatureError("cannot normalize a zero feature vector")
        norms = np.where(norms < 1e-12, 1.0, norms)
        out = mat / norms
        out[zero] = 0.0
        return out
    return mat / norms


def sample_features(m: FeatureMap, xy: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Bilinear per-pixel features at (N, 2) pixel-index coords.

    Returns (N, C) float64; unit rows when normalize is set.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    if np.any(xy[:, 0] < 0) or np.any(xy[:, 0] > m.img_w - 1) or np.any(
        xy[:, 1] < 0
    ) or np.any(xy[:, 1] > m.img_h - 1):
        raise ConfigurationError("sample coords outside image bounds")
    gx, gy = m.grid_coords(xy)
    vals = kernels.bilinear_gather(m.data, gx, gy)
    if normalize:
        vals = l2_normalize_rows(vals, on_zero="raise")
    return vals


def sample_feature(m: FeatureMap, x, normalize: bool = True) -> np.ndarray:
    """Single-point convenience wrapper around sample_features."""
    return sample_features(m, np.asarray(x, dtype=np.float64).reshape(1, 2), normalize)[0]


# --- FTB1 file format -----------------------------------------------------


def save_feature_map(path, m: FeatureMap) -> None:
    """Write FTB1: magic, u32 LE hf, wf, C, p, img_w, img_h, f32 LE payload."""
    with open(path, "wb") as fh:
        fh.write(_FTB1_MAGIC)
        fh.write(struct.pack("<6I", m.hf, m.wf, m.channels, m.patch, m.img_w, m.img_h))
        fh.write(m.data.astype("<f4").tobytes(order="C"))


def load_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _FTB1_MAGIC:
        raise FormatError(f"bad FTB1 magic in {path}", offset=0)
    if len(blob) < 28:
        raise FormatError(f"truncated FTB1 header in {path}", offset=len(blob))
    hf, wf, channels, patch, img_w, img_h = struct.unpack_from("<6I", blob, 4)
    expected = 28 + 4 * hf * wf * channels
    if len(blob) < expected:
        raise FormatError(f"truncated FTB1 payload in {path}", offset=len(blob))
    data = np.frombuffer(blob, dtype="<f4", count=hf * wf * channels, offset=28)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data))[0])
        raise FormatError(f"non-finite feature value in {path}", offset=28 + 4 * bad)
    try:
        return FeatureMap(data.reshape(hf, wf, channels).copy(), patch, img_w, img_h)
    except ConfigurationError as exc:
        raise FormatError(f"inconsistent FTB1 header in {path}: {exc}", offset=4) from exc
