"""Shared fixtures: synthetic worlds and a d=16 encoder bundle."""

import os
import sys
from dataclasses import replace

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from utils.config import EncoderConfig, WorldConfig, substream  # noqa: E402
from utils.encoders import RESERVED_WORDS, FrozenEncoders  # noqa: E402
from utils.pcm import init_mapping  # noqa: E402
from utils.synth_world import generate_world, random_triplets  # noqa: E402

SMALL_WORLD = WorldConfig(concept_count=16, style_count=3, image_count=96, image_size=224, grid=4,
                          concepts_per_image=(2, 3), crops_per_image=3, seed=0)
REFERENCE_WORLD = WorldConfig(concept_count=64, style_count=4, image_count=2000, coverage=0.6)
REFERENCE_D = 32


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SMALL_WORLD, EncoderConfig(d=16, seed=0))


@pytest.fixture(scope="session")
def reference_world():
    """Desk-scale world per seed, built once per session."""
    built = {}

    def build(seed):
        if seed not in built:
            built[seed] = generate_world(replace(REFERENCE_WORLD, seed=seed), EncoderConfig(d=REFERENCE_D, seed=seed))
        return built[seed]
    return build


@pytest.fixture(scope="session")
def encoders16():
    words = list(RESERVED_WORDS) + [f"word{i}" for i in range(12)]
    return FrozenEncoders.build(EncoderConfig(d=16, seed=0), words)


@pytest.fixture
def triplets8(encoders16):
    return random_triplets(encoders16, 8, seed=1)


@pytest.fixture
def params16():
    return init_mapping(16, 16, substream(1, "init"))
