import numpy as np
import pytest
from l0_dynamics.config import config
from l0_dynamics.pendulum import collect_dataset


@pytest.fixture(autouse=True)
def quiet_settings(monkeypatch, tmp_path):
    monkeypatch.setattr(config, "root_dir", tmp_path)
    monkeypatch.setattr(config, "show_progress", False)
    monkeypatch.setattr(config, "record_wall_time", False)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def small_dataset():
    return collect_dataset(episodes=6, steps_per_episode=40, seed=0)


@pytest.fixture(scope="session")
def small_test_dataset():
    return collect_dataset(episodes=3, steps_per_episode=40, seed=1)
