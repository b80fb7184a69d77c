import numpy as np
import pytest
import torch

from emovc.corpus import generate_corpus
from emovc.domains import build_catalog

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_catalog():
    return build_catalog(
        ["alpha", "bravo", "charlie"], ["neutral", "bright", "dark"],
        [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 0)],
    )


@pytest.fixture(scope="session")
def small_corpus(small_catalog):
    # 7 seen cells x 6 utterances: big enough for batching and probes in
    # unit tests, small enough to generate in under a second
    return generate_corpus(small_catalog, per_cell=6, seed=7)


@pytest.fixture(scope="session")
def smoke_corpus(small_catalog):
    # the acceptance-scale corpus (per-cell 20 -> 140 utterances)
    return generate_corpus(small_catalog, per_cell=20, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
