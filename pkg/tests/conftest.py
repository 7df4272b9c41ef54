import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hssn.data import load_manifest  # noqa: E402
from hssn.model import Block, ModelConfig  # noqa: E402
from hssn.synthetic import generate_synthetic  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    """Two pooled blocks on 3x8x8 input, both tapped."""
    return ModelConfig(
        blocks=(Block(4, 3, True), Block(6, 3, True)),
        tap_indices=(0, 1),
        embedding_dim=5,
        style_out_dim=3,
        input_shape=(3, 8, 8),
    )


@pytest.fixture(scope="session")
def synth8(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth8")
    manifest = generate_synthetic(root, 8, 32, 4, seed=3)
    return manifest, load_manifest(manifest)
