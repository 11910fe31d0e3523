"""
Pytest configuration and shared fixtures for splat lab tests.
"""

import numpy as np
import pytest

from core.logging import configure_logging
from core.settings import LabSettings, get_settings


@pytest.fixture(scope="session", autouse=True)
def quiet_logging():
    """Keep test output readable: warnings and above only."""
    configure_logging("WARNING")


@pytest.fixture(scope="function")
def rng():
    """Fixed-seed generator so every test is reproducible."""
    return np.random.default_rng(20240611)


@pytest.fixture(scope="function")
def lab_settings(tmp_path, monkeypatch):
    """
    Settings pointing the output directory at a temporary path.

    Clears the cached settings so code calling ``get_settings`` sees them.
    """
    monkeypatch.setenv("SPLATLAB_OUTPUT_DIR", str(tmp_path / "runs"))
    get_settings.cache_clear()
    yield LabSettings()
    get_settings.cache_clear()
