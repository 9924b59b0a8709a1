import numpy as np
import pytest
import torch

from dt4rec.config import ModelConfig, SyntheticWorldConfig, TrainConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(d=8, n_buckets=4, n_heads=2, n_layers=1, dropout=0.0,
                       state_len=4, action_len=3)


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(max_trajectory_length=2, allow_any_length=True, epochs=1,
                       batch_size=4, n_neg=1, seed=0)


@pytest.fixture
def small_world_cfg():
    return SyntheticWorldConfig(n_users=30, n_items=20, n_genres=4, n_days=20, seed=3)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
