"""
Pytest configuration and shared fixtures for ssl_cr tests.
"""

import os

import pytest

from ssl_cr.configuration import resolve_config
from ssl_cr.pyramid_data import build_corpus
from ssl_cr.seeding import RngStreams

# Small enough for every phase to finish in seconds on CPU.
TINY_OVERRIDES = {
    "progress": False,
    "data.level0_size": 256,
    "data.patch_size": 32,
    "data.n_train_slides": 2,
    "data.n_test_slides": 1,
    "data.n_pretrain_tuples": 24,
    "data.n_pretrain_val_tuples": 8,
    "pretrain.epochs": 2,
    "pretrain.batch_size": 8,
    "moco.queue_size": 32,
    "finetune.epochs": 3,
    "finetune.milestones": [1, 2],
    "finetune.batch_size": 8,
    "consistency.epochs": 2,
    "consistency.milestones": [1],
    "consistency.batch_size": 4,
    "consistency.mu": 2,
    "augment.strong_n_aug": 2,
}


def pytest_addoption(parser):
    """Add command-line options to pytest."""
    parser.addoption("--run-slow", action="store_true", help="Run long acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance test")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow") or os.getenv("RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="needs --run-slow or RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def tiny_config(**overrides):
    """Synthetic profile shrunk to test size; keyword names use __ for dots."""
    extra = {k.replace("__", "."): v for k, v in overrides.items()}
    return resolve_config(profile="synthetic", overrides={**TINY_OVERRIDES, **extra}, environ={})


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def classification_config():
    return tiny_config(data__task="classification", data__n_classes=3)


@pytest.fixture(scope="session")
def regression_corpus():
    return build_corpus(tiny_config().data, seed=0)


@pytest.fixture(scope="session")
def classification_corpus():
    return build_corpus(tiny_config(data__task="classification", data__n_classes=3).data, seed=0)


@pytest.fixture
def streams():
    return RngStreams(0)


@pytest.fixture
def make_config():
    return tiny_config
