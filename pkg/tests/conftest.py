# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
"""
import os

import numpy as np
import pytest

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture_path(name):
    return os.path.join(FIXTURES, name)


@pytest.fixture
def golden_readings():
    return fixture_path("golden_readings.csv")


@pytest.fixture
def golden_labels():
    return fixture_path("golden_labels.txt")


@pytest.fixture
def tiny_config():
    return fixture_path("tiny.yaml")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
