"""Dataset manifests, report envelopes and atomic JSON output.

A manifest is human-diffable JSON describing objects and their views (camera,
depth path, feature path); binary data stays in DPT1/FTB1 sidecar files.
Reports embed a stable config hash and the toolkit version so identical
configurations provably produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__
from .errors import ConfigurationError, DataError
from .featstore import load_feature_map
from .geometry import Intrinsics, RigidPose, load_depth
from .records import ViewRecord


@dataclass
class ViewEntry:
    intrinsics: Intrinsics
    pose: RigidPose
    depth_path: Optional[str] = None
    feature_path: Optional[str] = None


@dataclass
class ObjectEntry:
    object_id: str
    views: list[ViewEntry] = field(default_factory=list)


@dataclass
class DatasetManifest:
    units: str
    working_resolution: int
    objects: list[ObjectEntry]
    base_dir: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        return self.base_dir / rel

    def load_view(self, obj_idx: int, view_idx: int, with_features: bool = True) -> ViewRecord:
        entry = self.objects[obj_idx].views[view_idx]
        depth = load_depth(self.resolve(entry.depth_path)) if entry.depth_path else None
        features = None
        if with_features and entry.feature_path:
            features = load_feature_map(self.resolve(entry.feature_path))
        return ViewRecord(
            view_id=f"{self.objects[obj_idx].object_id}/{view_idx}",
            intrinsics=entry.intrinsics,
            pose=entry.pose,
            depth=depth,
            features=features,
        )


def _pose_to_json(pose: RigidPose) -> dict:
    return {
        "rotation": [[float(x) for x in row] for row in pose.rotation],
        "translation": [float(x) for x in pose.translation],
    }


def _intrinsics_to_json(k: Intrinsics) -> dict:
    return {
        "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
        "width": k.width, "height": k.height,
    }


def manifest_to_json(m: DatasetManifest) -> dict:
    return {
        "units": m.units,
        "working_resolution": m.working_resolution,
        "objects": [
            {
                "id": obj.object_id,
                "views": [
                    {
                        "intrinsics": _intrinsics_to_json(v.intrinsics),
                        "pose": _pose_to_json(v.pose),
                        "depth": v.depth_path,
                        "features": v.feature_path,
                    }
                    for v in obj.views
                ],
            }
            for obj in m.objects
        ],
    }


def save_manifest(path, m: DatasetManifest) -> None:
    write_json_atomic(path, manifest_to_json(m))


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if "units" not in raw:
        raise ConfigurationError(f"manifest {path} lacks the mandatory 'units' field")
    base = path.parent
    objects = []
    for obj in raw.get("objects", []):
        views = []
        for v in obj.get("views", []):
            ki = v["intrinsics"]
            entry = ViewEntry(
                intrinsics=Intrinsics(
                    fx=ki["fx"], fy=ki["fy"], cx=ki["cx"], cy=ki["cy"],
                    width=int(ki["width"]), height=int(ki["height"]),
                ),
                pose=RigidPose(v["pose"]["rotation"], v["pose"]["translation"]),
                depth_path=v.get("depth"),
                feature_path=v.get("features"),
            )
            if check_files:
                for rel in (entry.depth_path, entry.feature_path):
                    if rel and not (base / rel).exists():
                        raise DataError(f"manifest {path} references missing file {rel}")
            views.append(entry)
        objects.append(ObjectEntry(object_id=obj["id"], views=views))
    return DatasetManifest(
        units=raw["units"],
        working_resolution=int(raw.get("working_resolution", 512)),
        objects=objects,
        base_dir=base,
    )


# --- reports ----------------------------------------------------------------


def config_hash(config: dict) -> str:
    """Stable short hash of a canonicalized config dict."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def make_report(command: str, config: dict, payload: dict) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config": config,
        "config_hash": config_hash(config),
        **payload,
    }


def write_json_atomic(path, obj: dict) -> None:
    """Write canonical JSON via temp file + rename (idempotent, crash-safe)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=True) + "\n"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
