import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from toyfix import make_toy_store, toy_model_cfg, toy_train_cfg


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """(store, stats) for the 4-class synthetic corpus, built once."""
    directory = tmp_path_factory.mktemp("toy_store")
    return make_toy_store(directory, n_tracks=200, seed=0)


@pytest.fixture(scope="session")
def toy_fit(toy_corpus):
    """A trained toy model, shared by training/probe/acceptance tests."""
    from maest.train import fit

    store, stats = toy_corpus
    result = fit(store, toy_train_cfg(), toy_model_cfg(), stats=stats)
    return result, store, stats
