import numpy as np
import pytest

from mveq.featstore import FeatureMap
from mveq.rng import SplitMix64


def rand_map(rng: SplitMix64, hf: int, wf: int, c: int, patch: int = 1) -> FeatureMap:
    data = rng.normal_array(hf * wf * c).reshape(hf, wf, c).astype(np.float32)
    return FeatureMap(data, patch, wf * patch, hf * patch)


@pytest.fixture
def rng():
    return SplitMix64(2024)


@pytest.fixture(scope="session")
def sphere_views():
    from mveq.synth import scene_preset, synth_views

    return synth_views(scene_preset("sphere"), 6, image_size=32)


@pytest.fixture(scope="session")
def plane_oracle_views():
    """Ring of cameras over a plane with noisy oracle features (train fixture)."""
    from mveq.synth import OracleFeatureSpec, scene_preset, synth_views

    spec = OracleFeatureSpec(patch=2, lift=4.0, noise_sigma=0.3)
    return synth_views(
        scene_preset("plane"), 10, image_size=48, feature_spec=spec, seed=11, layout="ring"
    )
