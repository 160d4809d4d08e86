from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from pcreid.checkpoint import load_checkpoint
from pcreid.config import RunConfig, TrainConfig
from pcreid.dataset import SyntheticDataset
from pcreid.errors import InvalidInputError
from pcreid.evaluation import build_gallery_split, embed_samples, evaluate
from pcreid.network import ReIDNetwork
from pcreid.synth import generate_dataset
from pcreid.training import (
    REID_METRICS,
    MetricsLog,
    batch_hard_triplet,
    cosine_learning_rate,
    load_reid_network,
    make_optimizer,
    reid_loss,
    sample_batch,
    train,
)


def test_cosine_schedule_cycle_ends() -> None:
    assert cosine_learning_rate(0, 5e-5, 1e-7, 200) == pytest.approx(5e-5)
    assert cosine_learning_rate(200, 5e-5, 1e-7, 200) == pytest.approx(5e-5)


def test_cosine_schedule_floor_at_half_cycle() -> None:
    rates = [cosine_learning_rate(epoch, 5e-5, 1e-7, 200) for epoch in range(201)]
    assert int(np.argmin(rates)) == 100
    assert rates[100] == pytest.approx(1e-7)


def test_scheduler_follows_cosine_formula() -> None:
    module = torch.nn.Linear(2, 2)
    optimizer, scheduler = make_optimizer(module, 5e-5, 5e-5, 1e-7, 4)
    rates = []
    for _ in range(5):
        rates.append(optimizer.param_groups[0]["lr"])
        optimizer.step()
        scheduler.step()

    expected = [cosine_learning_rate(epoch, 5e-5, 1e-7, 4) for epoch in range(5)]
    assert rates == pytest.approx(expected)


def test_cosine_schedule_negative_epoch() -> None:
    with pytest.raises(InvalidInputError):
        cosine_learning_rate(-1, 5e-5, 1e-7, 200)


def test_triplet_separated_embeddings() -> None:
    embeddings = torch.tensor([0.0, 1.0, 5.0])
    loss = batch_hard_triplet(embeddings, torch.tensor([0, 0, 1]), margin=0.3)
    assert loss.item() == 0.0


def test_triplet_collapsed_embeddings() -> None:
    embeddings = torch.zeros(4, 8)
    loss = batch_hard_triplet(embeddings, torch.tensor([0, 0, 1, 1]), margin=0.3)
    assert loss.item() == pytest.approx(0.3)


def test_triplet_hand_computed() -> None:
    embeddings = torch.tensor([0.0, 1.0, 1.5, 4.0])
    loss = batch_hard_triplet(embeddings, torch.tensor([0, 0, 1, 1]), margin=0.0)
    # per-anchor hinges: 0, 0.5, 2.0, 0
    assert loss.item() == pytest.approx((0.0 + 0.5 + 2.0 + 0.0) / 4)


def test_triplet_no_usable_anchor() -> None:
    with pytest.raises(InvalidInputError, match="positive and a negative"):
        batch_hard_triplet(torch.randn(3, 4), torch.tensor([0, 1, 2]))


def test_triplet_single_identity() -> None:
    with pytest.raises(InvalidInputError):
        batch_hard_triplet(torch.randn(3, 4), torch.tensor([0, 0, 0]))


def test_triplet_gradient() -> None:
    embeddings = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    assert gradcheck(lambda x: batch_hard_triplet(x, labels, 1.0), (embeddings,))


def test_triplet_rotation_invariance() -> None:
    embeddings = torch.randn(8, 4, dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
    rotation, _ = torch.linalg.qr(torch.randn(4, 4, dtype=torch.float64))
    torch.testing.assert_close(
        batch_hard_triplet(embeddings @ rotation, labels),
        batch_hard_triplet(embeddings, labels),
        atol=1e-6,
        rtol=0,
    )


def test_triplet_zero_distance_gradient_is_finite() -> None:
    embeddings = torch.zeros(4, 3, requires_grad=True)
    batch_hard_triplet(embeddings, torch.tensor([0, 0, 1, 1])).backward()
    assert torch.isfinite(embeddings.grad).all()


def test_reid_loss_triplet_weight_zero() -> None:
    logits = torch.tensor([[0.0, 0.0]])
    loss = reid_loss(logits, torch.tensor([0]), torch.zeros(1, 4), triplet_weight=0)
    assert loss.item() == pytest.approx(np.log(2))


def test_reid_loss_sum_of_terms() -> None:
    logits = torch.zeros(4, 2)
    labels = torch.tensor([0, 0, 1, 1])
    loss = reid_loss(logits, labels, torch.zeros(4, 8), triplet_weight=2.0, margin=0.3)
    assert loss.item() == pytest.approx(np.log(2) + 0.6)


def test_reid_loss_gradient() -> None:
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    logits = torch.randn(6, 3, dtype=torch.float64, requires_grad=True)
    embeddings = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    # a wide margin keeps every hinge active
    assert gradcheck(
        lambda x, e: reid_loss(x, labels, e, triplet_weight=0.5, margin=10.0),
        (logits, embeddings),
    )


def test_sample_batch_shapes(dataset: SyntheticDataset, run_config: RunConfig) -> None:
    batch = sample_batch(dataset, np.random.default_rng(0), run_config.train, points=32)
    assert batch.points.shape == (4, 4, 32, 3)
    assert batch.num_sequences == 4
    assert batch.num_frames == 16
    assert len(set(batch.identities)) == 2
    counts = np.bincount(batch.labels.numpy())
    assert sorted(counts[counts > 0].tolist()) == [2, 2]
    assert set(batch.identities) <= set(dataset.identity_ids("train"))


def test_sample_batch_deterministic(dataset: SyntheticDataset, run_config: RunConfig) -> None:
    first = sample_batch(dataset, np.random.default_rng(3), run_config.train, points=32)
    second = sample_batch(dataset, np.random.default_rng(3), run_config.train, points=32)
    assert torch.equal(first.points, second.points)
    assert torch.equal(first.labels, second.labels)


def test_sample_batch_short_sequences_repeat_last_frame(dataset: SyntheticDataset) -> None:
    config = TrainConfig(identities_per_batch=2, sequences_per_identity=1, sequence_length=6)
    batch = sample_batch(dataset, np.random.default_rng(0), config, points=32)
    assert batch.points.shape == (2, 6, 32, 3)
    assert all(len(record) == 4 for record in batch.records)


def test_sample_batch_too_few_identities(dataset: SyntheticDataset) -> None:
    config = TrainConfig(identities_per_batch=5)
    with pytest.raises(InvalidInputError, match="at least 5"):
        sample_batch(dataset, np.random.default_rng(0), config)


def test_metrics_log_resume(tmp_path: Path) -> None:
    log = MetricsLog(tmp_path / "metrics.csv", REID_METRICS)
    log.start()
    for epoch in range(3):
        log.append({"epoch": epoch, "loss": 1.0 / (epoch + 1), "lr": 5e-5})

    log.start(resume_epoch=2)
    with log.path.open(newline="") as fp:
        rows = list(csv.reader(fp))

    assert rows[0] == list(REID_METRICS)
    assert [row[0] for row in rows[1:]] == ["0", "1"]
    assert rows[2][1] == "0.5"
    assert rows[2][3] == ""


def test_train_writes_outputs(
    dataset: SyntheticDataset, run_config: RunConfig, tmp_path: Path
) -> None:
    result = train(dataset, run_config, tmp_path, seed=1)
    assert result.checkpoint == tmp_path / "reid.ckpt"
    assert (tmp_path / "reid-epoch0001.ckpt").exists()
    assert (tmp_path / "reid-epoch0002.ckpt").exists()
    assert [row["epoch"] for row in result.history] == [0, 1]
    assert all(np.isfinite(row["loss"]) for row in result.history)

    checkpoint = load_checkpoint(result.checkpoint, kind="reid")
    assert checkpoint.epoch == 2
    assert checkpoint.metadata["identities"] == dataset.identity_ids("train")

    network, config = load_reid_network(result.checkpoint)
    assert config == run_config
    assert network.classifier.out_features == 4


def test_train_resume_matches_uninterrupted_run(
    dataset: SyntheticDataset, run_config: RunConfig, tmp_path: Path
) -> None:
    full = train(dataset, run_config, tmp_path / "full", seed=2)

    short_config = run_config.model_copy(
        update={"train": run_config.train.model_copy(update={"epochs": 1})}
    )
    train(dataset, short_config, tmp_path / "split", seed=2)
    resumed = train(
        dataset, run_config, tmp_path / "split", seed=2,
        resume=tmp_path / "split" / "reid.ckpt",
    )
    assert [row["epoch"] for row in resumed.history] == [1]
    assert resumed.history[0]["loss"] == pytest.approx(full.history[1]["loss"], rel=1e-4)

    with (tmp_path / "split" / "reid-metrics.csv").open(newline="") as fp:
        assert [row["epoch"] for row in csv.DictReader(fp)] == ["0", "1"]


def test_train_init_from_pretraining_checkpoint_kind(
    dataset: SyntheticDataset, run_config: RunConfig, tmp_path: Path
) -> None:
    train(dataset, run_config, tmp_path, seed=1)
    with pytest.raises(InvalidInputError, match="expected 'pretrain'"):
        train(dataset, run_config, tmp_path / "again", init=tmp_path / "reid.ckpt")


@pytest.mark.slow
def test_cross_view_retrieval_on_separable_identities(tmp_path: Path) -> None:
    config = RunConfig.model_validate(
        {
            "synth": {
                "identities": 12,
                "views": 4,
                "sequences_per_view": 2,
                "frames": 30,
                "min_shape_separation": 1.0,
            },
            "encoder": {"backbone_widths": [16, 32, 128], "branch_width": 128},
            "temporal": {"feedforward": 512},
            "train": {
                "epochs": 60,
                "identities_per_batch": 4,
                "sequences_per_identity": 4,
                "sequence_length": 10,
            },
        }
    )
    generate_dataset(config.synth, tmp_path / "data", seed=21)
    dataset = SyntheticDataset(tmp_path / "data")
    samples = list(dataset.iter_samples("test"))
    split = build_gallery_split(
        [sample.identity for sample in samples], [sample.view for sample in samples], seed=0
    )

    def rank1(network: ReIDNetwork) -> float:
        embeddings = embed_samples(network, samples, config.encoder.points, seed=0)
        return evaluate(split, embeddings).rank(1)

    torch.manual_seed(0)
    baseline = rank1(
        ReIDNetwork(config.encoder, config.temporal, len(dataset.identity_ids("train")))
    )
    trained = rank1(train(dataset, config, tmp_path / "run", seed=0).network)
    assert trained >= 0.9
    assert trained > baseline
