"""Per-view record bundling camera, depth and features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .featstore import FeatureMap
from .geometry import DepthMap, Intrinsics, RigidPose


@dataclass
class ViewRecord:
    """One observation of an object: camera + optional depth and features."""

    view_id: str
    intrinsics: Intrinsics
    pose: RigidPose
    depth: Optional[DepthMap] = None
    features: Optional[FeatureMap] = None

    def with_features(self, features: FeatureMap) -> "ViewRecord":
        return ViewRecord(self.view_id, self.intrinsics, self.pose, self.depth, features)
