import numpy as np
import pytest

from diffref3d.config import TrainConfig, train_config_from_flat, to_flat
from diffref3d.pipeline import DiffRef3D, train
from diffref3d.scene import generate_corpus

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_config(**overrides) -> TrainConfig:
    flat = {**to_flat(TrainConfig()), "epochs": 2, "batch_scenes": 4, **overrides}
    return train_config_from_flat(flat)


@pytest.fixture(scope="session")
def tiny_scenes():
    return generate_corpus(3, 16)


@pytest.fixture(scope="session")
def tiny_model(tiny_scenes):
    model = DiffRef3D(small_config())
    train(model, tiny_scenes)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_boxes(rng, n, spread=5.0):
    centers = rng.uniform(-spread, spread, size=(n, 3))
    extents = rng.uniform(0.3, 4.0, size=(n, 3))
    yaw = rng.uniform(-np.pi, np.pi, size=(n, 1))
    return np.hstack([centers, extents, yaw])


def jitter_near(rng, boxes, scale=0.3):
    out = boxes.copy()
    out[:, :3] += rng.normal(0.0, scale, size=(len(boxes), 3)) * boxes[:, 3:6]
    out[:, 3:6] *= np.exp(rng.normal(0.0, scale, size=(len(boxes), 3)))
    out[:, 6] += rng.normal(0.0, scale, size=len(boxes))
    return out
