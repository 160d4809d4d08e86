from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch
from pytest import TempPathFactory

from pcreid.config import (
    EncoderConfig,
    PretrainConfig,
    RunConfig,
    SensorConfig,
    SynthConfig,
    TemporalConfig,
    TrainConfig,
)
from pcreid.dataset import SyntheticDataset
from pcreid.synth import generate_dataset


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def torch_seed() -> None:
    torch.manual_seed(0)


@pytest.fixture
def encoder_config() -> EncoderConfig:
    return EncoderConfig(
        points=32, k=4, backbone_widths=(8, 8), branch_width=8, erase_neighbors=3
    )


@pytest.fixture
def temporal_config() -> TemporalConfig:
    return TemporalConfig(layers=1, heads=2, feedforward=16, max_length=8)


def tiny_run_config() -> RunConfig:
    return RunConfig(
        synth=SynthConfig(
            identities=6,
            views=2,
            frames=4,
            test_fraction=0.34,
            truth_points=64,
            sensor=SensorConfig(max_rays=2048),
        ),
        encoder=EncoderConfig(
            points=32, k=4, backbone_widths=(8, 8), branch_width=8, erase_neighbors=3
        ),
        temporal=TemporalConfig(layers=1, heads=2, feedforward=16, max_length=8),
        pretrain=PretrainConfig(
            epochs=2,
            batch_size=8,
            coarse_points=16,
            decoder_width=16,
            folding_width=16,
            shape_widths=(8, 8),
            checkpoint_every=1,
        ),
        train=TrainConfig(
            epochs=2,
            identities_per_batch=2,
            sequences_per_identity=2,
            sequence_length=4,
            checkpoint_every=1,
        ),
    )


@pytest.fixture
def run_config() -> RunConfig:
    return tiny_run_config()


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory: TempPathFactory) -> Path:
    path = tmp_path_factory.mktemp("dataset")
    generate_dataset(tiny_run_config().synth, path, seed=7)
    return path


@pytest.fixture
def dataset(dataset_dir: Path) -> SyntheticDataset:
    return SyntheticDataset(dataset_dir)
