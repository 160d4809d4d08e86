"""Supervised ReID training: identity-balanced batches, cross-entropy plus batch-hard triplet."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR
from tqdm import tqdm

from .checkpoint import (
    Checkpoint,
    capture_rng,
    load_checkpoint,
    load_weights,
    restore_rng,
    save_checkpoint,
)
from .config import RunConfig, TrainConfig
from .dataset import SequenceRecord, SyntheticDataset
from .errors import InvalidInputError
from .functional import softmax_cross_entropy
from .geometry import resample
from .network import ReIDNetwork

REID_METRICS = ("epoch", "loss", "lr", "cross_entropy", "triplet")

logger = logging.getLogger(__name__)


def cosine_learning_rate(epoch: int, base: float, floor: float, cycle: int) -> float:
    """
    Learning rate of ``epoch`` under cosine annealing with warm restarts.

    Starts at ``base``, reaches ``floor`` halfway through each ``cycle`` and returns
    to ``base`` at the end of it.

    """
    if epoch < 0:
        raise InvalidInputError("epoch must be non-negative")

    return floor + (base - floor) * (1 + math.cos(2 * math.pi * epoch / cycle)) / 2


def make_optimizer(
    module: nn.Module, learning_rate: float, weight_decay: float, floor: float, cycle: int
) -> tuple[AdamW, LambdaLR]:
    optimizer = AdamW(module.parameters(), lr=learning_rate, weight_decay=weight_decay)
    scheduler = LambdaLR(
        optimizer,
        lambda epoch: cosine_learning_rate(epoch, learning_rate, floor, cycle) / learning_rate,
    )
    return optimizer, scheduler


class MetricsLog:
    """Append-only CSV log with a header row written once."""

    def __init__(self, path: Path, columns: Sequence[str]):
        self.path = path
        self.columns = tuple(columns)

    def start(self, resume_epoch: int | None = None) -> None:
        """Create the log, or keep the rows up to ``resume_epoch`` of an existing one."""
        rows: list[list[str]] = []
        if resume_epoch is not None and self.path.exists():
            with self.path.open(newline="") as fp:
                reader = csv.reader(fp)
                header = next(reader, None)
                if header == list(self.columns):
                    rows = [row for row in reader if row and int(row[0]) < resume_epoch]

        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as fp:
            writer = csv.writer(fp, lineterminator="\n")
            writer.writerow(self.columns)
            writer.writerows(rows)

    def append(self, values: Mapping[str, Any]) -> None:
        with self.path.open("a", newline="") as fp:
            writer = csv.writer(fp, lineterminator="\n")
            writer.writerow([_format_cell(values.get(column)) for column in self.columns])


def _format_cell(value: Any) -> str:
    if value is None:
        return ""

    if isinstance(value, float):
        return f"{value:.8g}"

    return str(value)


@dataclass
class TrainBatch:
    """``P * K`` sequences of ``T`` frames each, grouped by identity."""

    points: torch.Tensor
    labels: torch.Tensor
    identities: list[int]
    records: list[SequenceRecord]

    @property
    def num_sequences(self) -> int:
        return int(self.points.shape[0])

    @property
    def num_frames(self) -> int:
        return int(self.points.shape[0] * self.points.shape[1])


def _fragment(record: SequenceRecord, length: int, rng: np.random.Generator) -> list[str]:
    paths = list(record.clouds)
    if len(paths) > length:
        start = int(rng.integers(len(paths) - length + 1))
        return paths[start:start + length]

    return paths + [paths[-1]] * (length - len(paths))


def sample_batch(
    dataset: SyntheticDataset,
    rng: np.random.Generator,
    config: TrainConfig | None = None,
    points: int = 256,
    label_map: Mapping[int, int] | None = None,
) -> TrainBatch:
    """
    Draw ``P`` training identities and ``K`` sequence fragments of ``T`` frames for each.

    Fragments start at a random offset, so draws overlap in time. Sequences shorter
    than ``T`` repeat their last frame. Identities with fewer than ``K`` sequences
    are sampled with replacement.

    """
    config = config or TrainConfig()
    identities = dataset.identity_ids("train")
    if len(identities) < config.identities_per_batch:
        raise InvalidInputError(
            f"need at least {config.identities_per_batch} training identities, "
            f"got {len(identities)}"
        )

    if label_map is None:
        label_map = {identity: label for label, identity in enumerate(identities)}

    by_identity: dict[int, list[SequenceRecord]] = {}
    for record in dataset.sequences("train"):
        by_identity.setdefault(record.identity, []).append(record)

    chosen = rng.choice(identities, size=config.identities_per_batch, replace=False)
    records: list[SequenceRecord] = []
    sequences: list[torch.Tensor] = []
    labels: list[int] = []
    for identity in (int(i) for i in chosen):
        candidates = by_identity[identity]
        picks = rng.choice(
            len(candidates),
            size=config.sequences_per_identity,
            replace=len(candidates) < config.sequences_per_identity,
        )
        for pick in picks:
            record = candidates[int(pick)]
            frames = [
                resample(dataset.load_cloud(path), points, rng).to_tensor()
                for path in _fragment(record, config.sequence_length, rng)
            ]
            sequences.append(torch.stack(frames))
            records.append(record)
            labels.append(label_map[identity])

    return TrainBatch(
        points=torch.stack(sequences),
        labels=torch.tensor(labels, dtype=torch.long),
        identities=[int(i) for i in chosen],
        records=records,
    )


def _euclidean(embeddings: torch.Tensor) -> torch.Tensor:
    # zero distances get a zero gradient instead of NaN
    differences = embeddings.unsqueeze(1) - embeddings.unsqueeze(0)
    squared = (differences**2).sum(dim=-1)
    positive = squared > 0
    return torch.where(positive, squared, torch.ones_like(squared)).sqrt() * positive


def batch_hard_triplet(
    embeddings: torch.Tensor, labels: torch.Tensor, margin: float = 0.3
) -> torch.Tensor:
    """
    Batch-hard triplet loss over ``(B, D)`` embeddings.

    Every anchor with at least one positive and one negative contributes
    ``max(0, hardest positive - hardest negative + margin)``; the result is the mean
    over those anchors.

    """
    if embeddings.ndim == 1:
        embeddings = embeddings.unsqueeze(-1)

    labels = torch.as_tensor(labels, device=embeddings.device)
    if labels.shape != embeddings.shape[:1]:
        raise InvalidInputError(
            f"{labels.numel()} labels given for {embeddings.shape[0]} embeddings"
        )

    distances = _euclidean(embeddings)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    itself = torch.eye(len(labels), dtype=torch.bool, device=embeddings.device)
    positives = same & ~itself
    negatives = ~same
    usable = positives.any(dim=1) & negatives.any(dim=1)
    if not usable.any():
        raise InvalidInputError(
            "no anchor has both a positive and a negative in the batch"
        )

    hardest_positive = torch.where(positives, distances, float("-inf")).amax(dim=1)
    hardest_negative = torch.where(negatives, distances, float("inf")).amin(dim=1)
    hinge = torch.relu(hardest_positive - hardest_negative + margin)
    return hinge[usable].mean()


def reid_loss_terms(
    logits: torch.Tensor,
    labels: torch.Tensor,
    embeddings: torch.Tensor,
    margin: float = 0.3,
) -> tuple[torch.Tensor, torch.Tensor]:
    return (
        softmax_cross_entropy(logits, labels),
        batch_hard_triplet(embeddings, labels, margin),
    )


def reid_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    embeddings: torch.Tensor,
    triplet_weight: float = 1.0,
    margin: float = 0.3,
) -> torch.Tensor:
    """Sequence-level cross-entropy plus ``triplet_weight`` times the triplet term."""
    if triplet_weight == 0:
        return softmax_cross_entropy(logits, labels)

    cross_entropy, triplet = reid_loss_terms(logits, labels, embeddings, margin)
    return cross_entropy + triplet_weight * triplet


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    epochs: int
    network: ReIDNetwork
    history: list[dict[str, float]]


def train(
    dataset: SyntheticDataset,
    config: RunConfig,
    out_dir: Path | str,
    seed: int = 0,
    init: Path | str | None = None,
    resume: Path | str | None = None,
) -> TrainResult:
    """
    Train the ReID network on the training identities of ``dataset``.

    :param init: pre-training checkpoint whose encoder weights initialize the network
    :param resume: ReID checkpoint to continue from (restores optimizer, schedule and
        random state)
    :return: the path of the latest checkpoint and of the metrics log

    """
    cfg = config.train
    out_dir = Path(out_dir)
    identities = dataset.identity_ids("train")
    label_map = {identity: label for label, identity in enumerate(identities)}
    if len(identities) < cfg.identities_per_batch:
        raise InvalidInputError(
            f"the training split has {len(identities)} identities, "
            f"fewer than the {cfg.identities_per_batch} needed per batch"
        )

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    network = ReIDNetwork(config.encoder, config.temporal, num_classes=len(identities))
    optimizer, scheduler = make_optimizer(
        network, cfg.learning_rate, cfg.weight_decay, cfg.lr_floor, cfg.lr_cycle
    )
    start = 0
    if resume is not None:
        checkpoint = load_checkpoint(resume, kind="reid")
        load_weights(network, checkpoint.tensors)
        if checkpoint.optimizer is None or checkpoint.scheduler is None:
            raise InvalidInputError(f"{resume} holds no optimizer state to resume from")

        optimizer.load_state_dict(checkpoint.optimizer)
        scheduler.load_state_dict(checkpoint.scheduler)
        restore_rng(rng, checkpoint.rng)
        start = checkpoint.epoch
        logger.info("Resuming training from epoch %d of %s", start, resume)
    elif init is not None:
        pretrained = load_checkpoint(init, kind="pretrain")
        load_weights(network.encoder, pretrained.subset("encoder."))
        logger.info("Initialized the frame encoder from %s", init)

    batches = cfg.batches_per_epoch or math.ceil(len(identities) / cfg.identities_per_batch)
    metrics = MetricsLog(out_dir / "reid-metrics.csv", REID_METRICS)
    metrics.start(start if resume is not None else None)
    latest = out_dir / "reid.ckpt"
    history: list[dict[str, float]] = []
    for epoch in tqdm(range(start, cfg.epochs), desc="train", unit="epoch", disable=None):
        network.train()
        totals = np.zeros(3)
        for _ in range(batches):
            batch = sample_batch(dataset, rng, cfg, config.encoder.points, label_map)
            embeddings, logits = network(batch.points)
            cross_entropy, triplet = reid_loss_terms(
                logits, batch.labels, embeddings, cfg.margin
            )
            loss = cross_entropy + cfg.triplet_weight * triplet
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            totals += [loss.item(), cross_entropy.item(), triplet.item()]

        learning_rate = optimizer.param_groups[0]["lr"]
        scheduler.step()
        loss_value, ce_value, triplet_value = (totals / batches).tolist()
        row = {
            "epoch": epoch,
            "loss": loss_value,
            "lr": learning_rate,
            "cross_entropy": ce_value,
            "triplet": triplet_value,
        }
        metrics.append(row)
        history.append(row)
        logger.info(
            "epoch %d: loss %.4f (cross-entropy %.4f, triplet %.4f), lr %.3g",
            epoch, loss_value, ce_value, triplet_value, learning_rate,
        )

        done = epoch + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
            checkpoint = Checkpoint(
                kind="reid",
                tensors=network.state_dict(),
                metadata={
                    "epoch": done,
                    "seed": seed,
                    "config": config.model_dump(mode="json"),
                    "identities": identities,
                },
                optimizer=optimizer.state_dict(),
                scheduler=scheduler.state_dict(),
                rng=capture_rng(rng),
            )
            save_checkpoint(out_dir / f"reid-epoch{done:04d}.ckpt", checkpoint)
            save_checkpoint(latest, checkpoint)

    return TrainResult(latest, metrics.path, cfg.epochs, network, history)


def load_reid_network(path: Path | str) -> tuple[ReIDNetwork, RunConfig]:
    """Rebuild a trained ReID network from the configuration stored in its checkpoint."""
    checkpoint = load_checkpoint(path, kind="reid")
    config = RunConfig.model_validate(checkpoint.metadata["config"])
    classifier = checkpoint.tensors.get("classifier.weight")
    if classifier is None:
        raise InvalidInputError(f"{path} holds no classifier weights")

    network = ReIDNetwork(config.encoder, config.temporal, num_classes=classifier.shape[0])
    load_weights(network, checkpoint.tensors)
    network.eval()
    return network, config
