import pytest

from buildseg.data import fuse, generate_synthetic


@pytest.fixture(scope="session")
def corpus_a(tmp_path_factory):
    """Six domain-A scenes (24 patches) written through the public pipeline."""
    base = tmp_path_factory.mktemp("corpus_a")
    raw = generate_synthetic(base / "raw", seed=7, n_scenes=6, domain="A")
    manifest, _ = fuse([(raw, "synthetic")], base / "store", seed=7)
    return manifest


@pytest.fixture(scope="session")
def corpus_b(tmp_path_factory):
    base = tmp_path_factory.mktemp("corpus_b")
    raw = generate_synthetic(base / "raw", seed=3, n_scenes=6, domain="B")
    manifest, _ = fuse([(raw, "synthetic")], base / "store", seed=3)
    return manifest
