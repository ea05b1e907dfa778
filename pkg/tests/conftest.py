"""Session-wide fixtures: synthetic datasets are rendered once and shared."""
from __future__ import annotations

import numpy as np
import pytest

from volvid.manifest import load_manifest
from volvid.synth import preset_audio, preset_scene


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory):
    """Small trainable dataset with audio; cheap enough for many tests."""
    root = tmp_path_factory.mktemp("tiny_scene")
    scene = preset_scene(str(root), seed=5, num_cameras=4, image_size=48,
                         num_frames=4, num_static=30, num_dynamic=3)
    return scene


@pytest.fixture(scope="session")
def tiny_manifest(tiny_scene):
    return load_manifest(tiny_scene.manifest_path)


@pytest.fixture(scope="session")
def audio_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("audio_scene")
    return preset_audio(str(root), seed=3)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
