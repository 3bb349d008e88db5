"""Shared fixtures: the production weight tables (cached across sessions)."""
from __future__ import annotations

import pytest

from ctquad.weights import build_weight_table


@pytest.fixture(scope="session")
def table02():
    """Order-2 table for the k=0 (1/|x|-type) term."""
    return build_weight_table(0, 2)


@pytest.fixture(scope="session")
def table11():
    """Order-1 table for the k=1 (|x|-type) term."""
    return build_weight_table(1, 1)
