"""Shared fixtures: a seconds-scale corpus, texture pool, and trained model."""

from __future__ import annotations

import sys

import pytest

from madseg import dataio
from madseg.commands import load_texture_pool
from madseg.synthetic import CorpusSpec, build_corpus
from madseg.trainer import TrainConfig, train

TINY_SIZE = 32


def tiny_train_config(**overrides) -> TrainConfig:
    """A training configuration that finishes in a few seconds at 32x32."""
    base = dict(
        steps=6,
        batch_size=4,
        warmup_steps=2,
        image_size=TINY_SIZE,
        base_width=4,
        memory_n=4,
        occ_count=2,
        occ_components=2,
        labeler_refresh_every=3,
        labeler_pool=8,
        projection_dim=4,
        plateau_window=3,
        plateau_patience=100,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def corpus_root(tmp_path_factory):
    """Synthetic 32x32 corpus: 12 train / 4 normal / 4 anomalous + textures."""
    root = tmp_path_factory.mktemp("corpus")
    build_corpus(
        root,
        CorpusSpec(
            size=TINY_SIZE,
            n_train=12,
            n_test_normal=4,
            n_test_anomalous=4,
            n_textures=4,
            seed=0,
        ),
    )
    return root


@pytest.fixture(scope="session")
def dataset_index(corpus_root):
    return dataio.load_dataset(corpus_root, "stripes")


@pytest.fixture(scope="session")
def texture_pool(corpus_root):
    return load_texture_pool(str(corpus_root / "textures"), TINY_SIZE)


@pytest.fixture(scope="session")
def train_normals(dataset_index):
    return [dataio.load_image(p, TINY_SIZE) for p in dataset_index.train_normals]


@pytest.fixture(scope="session")
def smoke_result(train_normals, texture_pool):
    """One finished 6-step training run shared by read-only tests."""
    return train(tiny_train_config(), train_normals, texture_pool=texture_pool)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance pass/fail lines into the terminal summary."""
    mod = sys.modules.get("tests.test_acceptance") or sys.modules.get(
        "test_acceptance"
    )
    lines = getattr(mod, "RESULTS", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
