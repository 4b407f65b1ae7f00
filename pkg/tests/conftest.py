import os

import numpy as np
import pytest

# Noiseless sketches are the test oracle mode; the library refuses the flag
# without this key so no production path can reach it.
os.environ.setdefault("DPKPS_ALLOW_NOISELESS", "1")

from dpkps.corpus import Document, vocabulary_from_terms
from dpkps.embeddings import table_from_vectors


@pytest.fixture
def tiny_vocab():
    return vocabulary_from_terms(["beta blocker", "heart", "rate"], max_words=2)


@pytest.fixture
def tiny_doc():
    return Document(id="d1", text="the beta blocker reduced heart rate", label="cardiac")


def random_unit_table(terms, dim, seed):
    rng = np.random.default_rng(seed)
    return table_from_vectors({t: rng.standard_normal(dim) for t in terms})


@pytest.fixture
def unit_table():
    return random_unit_table([f"t{i:02d}" for i in range(20)], dim=8, seed=99)
