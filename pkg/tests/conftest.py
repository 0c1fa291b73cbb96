import numpy as np
import pytest

from mmalign import TrainConfig, generate_synthetic_pair
from mmalign.kg import MMKGPair, split_seeds


@pytest.fixture(scope="session")
def tiny_benchmark():
    """A 40-entity noisy pair with a 30/70 seed split, shared across tests."""
    pair, bundles = generate_synthetic_pair(
        n_entities=40, n_relations=8, n_attributes=6, feature_dim=32,
        structure_noise=0.1, rng_seed=0)
    train, test = split_seeds(pair.train_seeds, 0.3, 0)
    return MMKGPair(pair.source, pair.target, train, test), bundles


@pytest.fixture
def small_config():
    """A fast config matching the tiny benchmark's dimensions."""
    return TrainConfig(
        embed_dim=16, node_dim=16, segments=4, attn_heads=2, attn_head_dim=4,
        adaptor_dim=6, mine_hidden=8, epochs=3, batch_size=8,
        momentum_start=2, stability_window=2, reorder_stop=2,
        eval_every=0, checkpoint_every=0, rng_seed=0)


def unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)
