import numpy as np
import pytest

from crossview.data import generate_scene_pairs, save_dataset
from crossview.losses import soft_margin_triplet


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """16 small pairs on disk; enough for trainer smoke/determinism tests."""
    root = tmp_path_factory.mktemp("tiny_ds")
    pairs = generate_scene_pairs(42, 16, ground_hw=(32, 64), aerial_hw=(32, 32))
    manifest = save_dataset(pairs, root)
    return manifest


def brute_triplet_exhaustive(d, alpha):
    """Direct enumeration of all 2*N*(N-1) ordered triplets."""
    n = len(d)
    terms = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            terms.append(soft_margin_triplet(d[i][i], d[i][j], alpha))
            terms.append(soft_margin_triplet(d[i][i], d[j][i], alpha))
    return float(np.mean(terms))
