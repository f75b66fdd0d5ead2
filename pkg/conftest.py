import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from services.smoothing import NoiseBatch  # noqa: E402


@pytest.fixture
def worked_scores():
    return np.array([2.4, 2.6, 2.3, 0.5])


@pytest.fixture
def worked_noise():
    """Three hand-picked perturbation directions for the worked score vector."""
    return NoiseBatch.from_array(
        [
            [0.2, -0.1, 0.1, 0.3],
            [0.1, 0.1, -0.1, 0.1],
            [-0.1, -0.1, 0.1, -0.1],
        ]
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _isolated_settings(monkeypatch, tmp_path):
    for key in ("TOPK_OUTPUT_DIR", "TOPK_LOG_LEVEL", "TOPK_SEED", "TOPK_WORKERS"):
        monkeypatch.delenv(key, raising=False)
    from services.settings import get_settings

    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
