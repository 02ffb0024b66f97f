import numpy as np
import pytest

from vidnce.data import load_manifest
from vidnce.encoder import EncoderConfig
from vidnce.synthetic import SyntheticConfig, generate_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_rows():
    """Factory for float32 matrices whose rows are exactly unit length."""

    def make(n: int, d: int, generator: np.random.Generator) -> np.ndarray:
        m = generator.standard_normal((n, d))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        m = m.astype(np.float32)
        # renormalize once more in float32 to land inside the strict tolerance
        m /= np.linalg.norm(m, axis=1, keepdims=True).astype(np.float32)
        return m

    return make


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small labeled corpus on disk: 4 classes x 6 videos x 4 frames."""
    root = tmp_path_factory.mktemp("corpus")
    config = SyntheticConfig(num_classes=4, videos_per_class=6, frames_per_video=4, image_size=48, seed=11)
    generate_corpus(root, config)
    return root


@pytest.fixture(scope="session")
def tiny_records(tiny_corpus):
    return load_manifest(tiny_corpus / "manifest.jsonl")


@pytest.fixture(scope="session")
def lean_encoder():
    return EncoderConfig(
        input_size=32,
        trunk=((8, 3, 2), (16, 3, 2), (32, 3, 2)),
        hidden_dim=64,
        embed_dim=16,
    )
