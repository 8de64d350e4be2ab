"""Shared pytest fixtures: tiny seeded datasets and models that train in seconds."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from app.modules.data import gen_dataset
from app.modules.nn import Dense, Model, ReLU, build_model, train_sgd
from app.modules.runconfig import RunConfig

TINY_SHAPE = (1, 8, 8)
TINY_CLASSES = 4


@pytest.fixture(scope="session")
def tiny_train():
    return gen_dataset(seed=0, n=400, classes=TINY_CLASSES, shape=TINY_SHAPE, split="train")


@pytest.fixture(scope="session")
def tiny_test():
    return gen_dataset(seed=0, n=80, classes=TINY_CLASSES, shape=TINY_SHAPE, split="test")


@pytest.fixture(scope="session")
def tiny_suite(tiny_train):
    """Trained vgg source plus mlp and logistic victims on the tiny data."""
    suite = {}
    for arch in ("vgg", "mlp", "logistic"):
        model = build_model(arch, TINY_SHAPE, TINY_CLASSES, seed=0)
        suite[arch] = train_sgd(model, tiny_train, epochs=8, lr=0.05, batch=20, seed=0)
    return suite


DESK_SHAPE = (1, 16, 16)
DESK_CLASSES = 4


@pytest.fixture(scope="session")
def desk_data():
    """Default generator settings with fewer classes and samples: (train, test)."""
    train = gen_dataset(seed=0, n=1600, classes=DESK_CLASSES, shape=DESK_SHAPE, split="train")
    test = gen_dataset(seed=0, n=400, classes=DESK_CLASSES, shape=DESK_SHAPE, split="test")
    return train, test


@pytest.fixture(scope="session")
def desk_suite(desk_data):
    """vgg and logistic trained for six epochs on ``desk_data``."""
    train, _ = desk_data
    return {
        arch: train_sgd(build_model(arch, DESK_SHAPE, DESK_CLASSES, seed=0), train, epochs=6, lr=0.05, batch=20, seed=0)
        for arch in ("vgg", "logistic")
    }


@pytest.fixture
def tiny_config(tmp_path):
    cfg = RunConfig()
    return cfg.with_values(
        data={"train_size": 400, "test_size": 80, "classes": TINY_CLASSES, "height": 8, "width": 8},
        model={"source": "vgg", "victims": ["mlp", "logistic"], "epochs": 8, "batch": 20,
               "accuracy_floor": 0.0},
        attack={"steps": 4, "epsilon": 0.05, "step_size": 0.01},
        enhance={"steps": 5},
        bench={"population": 6},
        run={"threads": 1, "out": str(tmp_path / "run")},
    )


@pytest.fixture
def random_mlp():
    """Seeded two-layer MLP on 2-d inputs with a tap after the hidden ReLU."""
    rng = np.random.default_rng(7)
    layers = [Dense(2, 3), ReLU(), Dense(3, 2)]
    params = [
        {"W": rng.normal(size=(3, 2)), "b": rng.normal(size=3)},
        {},
        {"W": rng.normal(size=(2, 3)), "b": rng.normal(size=2)},
    ]
    return Model(arch="custom", input_shape=(2,), layers=layers,
                 taps={0: "fc1", 1: "hidden", 2: "logits"}, params=params)
