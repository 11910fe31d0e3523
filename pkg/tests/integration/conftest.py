"""
Pytest configuration and fixtures for splat lab integration tests.

Integration tests run whole experiments on tiny scenes; they are slower
than unit tests but stay well under a minute in total.
"""

import pytest

from models.config import SuiteConfig
from services.scenes import generate_scene
from services.training_service import run_experiment
from tests.helpers.fixtures import small_scene_spec, tiny_config


@pytest.fixture(scope="session")
def tiny_scene():
    """The small rigid-orbit scene shared by single-run tests."""
    return generate_scene(small_scene_spec())


@pytest.fixture(scope="session")
def baseline_result(tiny_scene):
    """
    One baseline run, computed once per session.

    Tests must not mutate the returned result.
    """
    return run_experiment(tiny_config("baseline"), tiny_scene)


@pytest.fixture(scope="function")
def tiny_suite():
    """Two presets on one small scene with two seeds."""
    base = tiny_config()
    return SuiteConfig(
        name="tiny",
        presets=("baseline", "A2"),
        scenes=(small_scene_spec(),),
        seeds=(0, 1),
        base=base,
    )


@pytest.fixture(scope="function")
def tiny_config_file(tmp_path):
    """A tiny ExperimentConfig written to disk for CLI tests."""
    path = tmp_path / "tiny.json"
    path.write_text(tiny_config().model_dump_json(indent=2))
    return path
