import numpy as np
import pytest

from bsentinel.cachefile import EmbeddingCache
from bsentinel.encoders import EncoderConfig, build_toy_encoders
from bsentinel.triggers import default_specs


def make_separable_cache(n_per_class: int, dim: int, noise: float, seed: int,
                         direction_seed: int = 0) -> EmbeddingCache:
    """Embedding cache with clean vectors clustered at +u and backdoored at -u.

    The clusters are linearly separable by construction: thresholding
    dot(vector, u) at zero labels every sample correctly (checked by tests
    before any training-based assertion relies on it). ``seed`` draws the
    samples; ``direction_seed`` fixes u, so different draws from the same
    distribution share it.
    """
    rng_u = np.random.default_rng([direction_seed, 0xD17])
    u = rng_u.standard_normal(dim)
    u /= np.linalg.norm(u)
    rng = np.random.default_rng([seed, 0xCAFE])
    clean = u + noise * rng.standard_normal((n_per_class, dim))
    bad = -u + noise * rng.standard_normal((n_per_class, dim))
    vectors = np.concatenate([clean, bad])
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    detection = np.concatenate(
        [np.zeros(n_per_class, dtype=np.uint8), np.ones(n_per_class, dtype=np.uint8)]
    )
    provenance = np.where(detection == 1, 1, 0).astype(np.uint8)  # code 1 = BadnetsSQ
    cache = EmbeddingCache(
        dim=dim,
        ids=np.arange(2 * n_per_class, dtype=np.uint64),
        provenance=provenance,
        detection=detection,
        vectors=vectors.astype(np.float32),
    )
    cache.separating_direction = u  # test-only attribute for oracle checks
    return cache


@pytest.fixture(scope="session")
def toy_stack():
    return build_toy_encoders(EncoderConfig(), seed=0)


@pytest.fixture(scope="session")
def trigger_specs():
    return default_specs(seed=0)
