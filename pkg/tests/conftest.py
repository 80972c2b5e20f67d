"""Shared test fixtures."""

import numpy as np
import pytest


@pytest.fixture
def rng():
    """Seeded generator; each test gets a fresh, reproducible stream."""
    return np.random.default_rng(1234)
