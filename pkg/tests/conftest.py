"""Shared fixtures for unit and integration tests"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from data_synth import generate, split_clips  # noqa: E402
from lstr_model import LSTRModel  # noqa: E402
from run_config import RunConfig  # noqa: E402

# 32x32 frames, 4-frame clips, two backbone stages (stride 4 -> 8x8 feature map)
TINY_OVERRIDES = {
    "data": {
        "num_videos": 2,
        "heldout_videos": 2,
        "frames_per_video": 8,
        "image_size": 32,
        "num_classes": 2,
        "min_size": 8,
        "max_size": 12,
        "clip_length": 4,
    },
    "tpn": {
        "channels": [4, 6],
        "anchor_scales": [8.0, 16.0],
        "aspect_ratios": [1.0],
        "minibatch": 16,
        "proposal_cap": 6,
        "train_proposal_cap": 6,
    },
    "short_term": {"embed_dim": 8},
    "long_term": {"radius": 1, "neighbors_k": 3},
    "classifier": {"rois_per_clip": 4},
    "train": {"epochs": 1, "warmup_epochs": 0.3},
    "experiments": {"seeds": [0], "radii": [0, 1]},
    "ui": {"progress": False, "quiet": True},
}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return RunConfig(TINY_OVERRIDES)


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    """TINY_OVERRIDES as a --config document"""
    path = tmp_path_factory.mktemp("config") / "tiny_config.json"
    path.write_text(json.dumps(TINY_OVERRIDES))
    return path


@pytest.fixture
def tiny_model(tiny_config):
    return LSTRModel(tiny_config)


@pytest.fixture
def tiny_videos(tiny_config):
    return generate(tiny_config.synth_config("train"))


@pytest.fixture
def tiny_clips(tiny_config, tiny_videos):
    """Clips of the first synthetic video"""
    return split_clips(tiny_videos[0], tiny_config.clip_length)


@pytest.fixture
def tiny_dataset(tiny_config, tiny_videos):
    """{video_id: clips} as the trainer and detector consume it"""
    return {v.video_id: split_clips(v, tiny_config.clip_length) for v in tiny_videos}
