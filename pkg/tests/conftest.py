"""Shared fixtures: small taxonomies, a toy model config and synthetic records."""

import numpy as np
import pytest

from geoloc.data import generate_synthetic, synthetic_taxonomy
from geoloc.model import toy_config
from geoloc.taxonomy import build_taxonomy


@pytest.fixture
def toy_taxonomy():
    """8 cities / 4 states / 2 countries / 2 continents."""
    return synthetic_taxonomy(8, 4, 2, 2)


@pytest.fixture
def disjoint_taxonomy():
    """Two cities with fully separate ancestor chains."""
    return build_taxonomy([
        ("c1", "s1", "k1", "t1"),
        ("c2", "s2", "k2", "t2"),
    ])


@pytest.fixture
def small_config():
    return toy_config(seed=0)


@pytest.fixture
def toy_records(toy_taxonomy):
    """10 samples per city, 16-dim features, sigma 0.1."""
    return generate_synthetic(toy_taxonomy, 10, 0.1, seed=3, feature_dim=16, num_scenes=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
