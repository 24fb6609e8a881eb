import numpy as np
import pytest

from gcnrefine.data import EmbeddingSet, normalize
from gcnrefine.graph import SimilarityGraph


def random_unit(n, d, seed):
    rng = np.random.default_rng(seed)
    return normalize(EmbeddingSet(rng.standard_normal((n, d))))


def random_graph(n, p, seed, nonneg=False):
    """Erdos-Renyi graph with random similarities in [-1, 1] (or [0, 1])."""
    rng = np.random.default_rng(seed)
    src, dst = np.triu_indices(n, 1)
    keep = rng.random(src.size) < p
    lo = 0.0 if nonneg else -1.0
    sims = rng.uniform(lo, 1.0, keep.sum())
    return SimilarityGraph.from_edges(n, src[keep], dst[keep], sims)


@pytest.fixture
def triangle():
    return SimilarityGraph.from_edges(3, [0, 0, 1], [1, 2, 2], [0.9, 0.8, 0.7])


@pytest.fixture
def path3():
    return SimilarityGraph.from_edges(3, [0, 1], [1, 2], [0.5, 0.6])
