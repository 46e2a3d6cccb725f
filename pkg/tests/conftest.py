import numpy as np
import pytest
import torch

from cmfd.synth import TransformRanges, procedural_corpus, synthesize_forgery


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def small_corpus():
    return procedural_corpus(6, size=128, seed=3)


@pytest.fixture(scope="session")
def forged_sample(small_corpus):
    item = small_corpus[0]
    return synthesize_forgery(item.image, item.regions[0], TransformRanges.easy(), seed=1, size=128)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
