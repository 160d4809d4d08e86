"""
Multi-task pre-training of the frame encoder.

The encoder embeds a single-view frame (paired with itself) into a latent vector
that feeds two heads: a coarse-to-fine completion decoder reconstructing the full
body surface, and a regression head predicting the 10 body-shape coefficients.

"""

from __future__ import annotations

import bisect
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from .checkpoint import (
    Checkpoint,
    capture_rng,
    load_checkpoint,
    load_weights,
    restore_rng,
    save_checkpoint,
)
from .config import EncoderConfig, PretrainConfig, RunConfig
from .dataset import SyntheticDataset
from .errors import InvalidInputError
from .functional import DEFAULT_NEGATIVE_SLOPE, leaky_relu, mse
from .geometry import batch_chamfer_distance, resample
from .models import SHAPE_PARAM_COUNT, PointCloud
from .network import build_encoder
from .training import MetricsLog, make_optimizer

PRETRAIN_METRICS = (
    "epoch",
    "loss",
    "lr",
    "completion",
    "shape",
    "delta",
    "val_chamfer",
    "val_shape_mse",
)
FOLDING_SCALE = 0.05

logger = logging.getLogger(__name__)


def folding_grid(size: int, scale: float = FOLDING_SCALE) -> torch.Tensor:
    """The ``(size * size, 2)`` square grid folded around every coarse point."""
    steps = torch.linspace(-scale, scale, steps=size) if size > 1 else torch.zeros(1)
    u, v = torch.meshgrid(steps, steps, indexing="ij")
    return torch.stack([u.reshape(-1), v.reshape(-1)], dim=-1)


@dataclass
class CompletionOutput:
    coarse: torch.Tensor
    detail: torch.Tensor

    def clouds(self) -> tuple[PointCloud, PointCloud]:
        """Return the unbatched coarse and detail predictions as point clouds."""
        if self.coarse.ndim != 2:
            raise InvalidInputError("clouds() needs an unbatched completion output")

        return PointCloud.from_tensor(self.coarse), PointCloud.from_tensor(self.detail)


class CompletionDecoder(nn.Module):
    """
    Coarse-to-fine decoder.

    A fully connected stage maps the latent vector to the coarse cloud. The folding
    stage then turns every (grid offset, coarse point, latent vector) triple into
    one detail point, relative to its coarse point.

    """

    def __init__(
        self,
        latent_dim: int,
        coarse_points: int = 128,
        grid_size: int = 2,
        width: int = 1024,
        folding_width: int = 512,
    ):
        super().__init__()
        self.latent_dim = latent_dim
        self.coarse_points = coarse_points
        self.grid_size = grid_size
        self.coarse_mlp = nn.Sequential(
            nn.Linear(latent_dim, width),
            nn.ReLU(),
            nn.Linear(width, width),
            nn.ReLU(),
            nn.Linear(width, coarse_points * 3),
        )
        self.folding = nn.Sequential(
            nn.Linear(latent_dim + 3 + 2, folding_width),
            nn.ReLU(),
            nn.Linear(folding_width, folding_width),
            nn.ReLU(),
            nn.Linear(folding_width, 3),
        )
        self.register_buffer("grid", folding_grid(grid_size), persistent=False)

    @property
    def detail_points(self) -> int:
        return self.coarse_points * self.grid_size**2

    def forward(self, latent: torch.Tensor) -> CompletionOutput:
        return decode(latent, self)


def decode(latent: torch.Tensor, decoder: CompletionDecoder) -> CompletionOutput:
    """Decode ``(..., latent_dim)`` vectors into coarse and detail clouds."""
    if latent.shape[-1] != decoder.latent_dim:
        raise InvalidInputError(
            f"decoder expects {decoder.latent_dim}-d latent vectors, "
            f"got {latent.shape[-1]}"
        )

    batch = latent.shape[:-1]
    cells = decoder.grid_size**2
    coarse = decoder.coarse_mlp(latent).reshape(*batch, decoder.coarse_points, 3)
    anchors = coarse.repeat_interleave(cells, dim=-2)
    grid = decoder.grid.to(latent.dtype).repeat(decoder.coarse_points, 1)
    grid = grid.expand(*batch, *grid.shape)
    codes = latent.unsqueeze(-2).expand(*batch, decoder.detail_points, latent.shape[-1])
    detail = decoder.folding(torch.cat([grid, anchors, codes], dim=-1)) + anchors
    return CompletionOutput(coarse, detail)


class ShapeHead(nn.Module):
    """Fully connected regression of the shape coefficients (LeakyReLU hidden layers)."""

    def __init__(
        self,
        latent_dim: int,
        widths: Sequence[int] = (256, 128),
        negative_slope: float = DEFAULT_NEGATIVE_SLOPE,
    ):
        super().__init__()
        self.negative_slope = negative_slope
        dims = [latent_dim, *widths]
        self.hidden = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(len(widths))
        )
        self.output = nn.Linear(dims[-1], SHAPE_PARAM_COUNT)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        return predict_shape(latent, self)


def predict_shape(latent: torch.Tensor, head: ShapeHead) -> torch.Tensor:
    x = latent
    for layer in head.hidden:
        x = leaky_relu(layer(x), head.negative_slope)

    return head.output(x)


def completion_loss(
    output: CompletionOutput, truth: torch.Tensor, delta: float
) -> torch.Tensor:
    """``CD(coarse, truth) + delta * CD(detail, truth)``, averaged over the batch."""
    if delta < 0:
        raise InvalidInputError("the detail weight must be non-negative")

    coarse = batch_chamfer_distance(output.coarse, truth)
    detail = batch_chamfer_distance(output.detail, truth)
    return (coarse + delta * detail).mean()


def pretrain_loss(
    output: CompletionOutput,
    truth: torch.Tensor,
    shape: torch.Tensor,
    predicted_shape: torch.Tensor,
    delta: float,
    shape_weight: float = 1.0,
) -> torch.Tensor:
    return completion_loss(output, truth, delta) + shape_weight * mse(shape, predicted_shape)


def delta_schedule(
    epoch: int,
    milestones: Sequence[int] = (100, 200, 400),
    values: Sequence[float] = (0.01, 0.1, 0.5, 1.0),
) -> float:
    """Step schedule of the detail weight: ``values[i]`` from ``milestones[i - 1]`` on."""
    if epoch < 0:
        raise InvalidInputError("epoch must be non-negative")

    if len(values) != len(milestones) + 1:
        raise InvalidInputError("the schedule needs one more value than milestones")

    return float(values[bisect.bisect_right(list(milestones), epoch)])


class PretrainNetwork(nn.Module):
    def __init__(self, encoder_config: EncoderConfig, config: PretrainConfig):
        super().__init__()
        self.encoder = build_encoder(encoder_config)
        latent_dim = self.encoder.output_dim
        self.decoder = CompletionDecoder(
            latent_dim,
            config.coarse_points,
            config.grid_size,
            config.decoder_width,
            config.folding_width,
        )
        self.shape_head = ShapeHead(
            latent_dim, config.shape_widths, encoder_config.negative_slope
        )

    def latent(self, points: torch.Tensor) -> torch.Tensor:
        return self.encoder.encode_frames(points)

    def forward(self, points: torch.Tensor) -> tuple[CompletionOutput, torch.Tensor]:
        latent = self.latent(points)
        return self.decoder(latent), self.shape_head(latent)


def complete_cloud(
    network: PretrainNetwork, cloud: PointCloud, points: int, seed: int = 0
) -> CompletionOutput:
    """Predict the coarse and detail completions of one normalized single-view cloud."""
    dtype = next(network.parameters()).dtype
    frame = resample(cloud, points, seed).to_tensor(dtype)
    network.eval()
    with torch.no_grad():
        output, _ = network(frame.unsqueeze(0))

    return CompletionOutput(output.coarse[0], output.detail[0])


def _load_frames(
    dataset: SyntheticDataset,
    triples: Sequence[tuple[str, str, int]],
    points: int,
    rngs: Sequence[np.random.Generator | int],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    clouds = [
        resample(dataset.load_cloud(cloud), points, rng).to_tensor()
        for (cloud, _, _), rng in zip(triples, rngs)
    ]
    truths = [dataset.load_cloud(truth).to_tensor() for _, truth, _ in triples]
    shapes = [
        torch.tensor(dataset.shape_of(identity).values, dtype=torch.float32)
        for _, _, identity in triples
    ]
    return torch.stack(clouds), torch.stack(truths), torch.stack(shapes)


def validate_pretraining(
    network: PretrainNetwork,
    dataset: SyntheticDataset,
    points: int,
    split: str = "test",
    batch_size: int = 32,
) -> tuple[float, float] | None:
    """
    Mean ``CD(detail, truth)`` and shape MSE over every frame of ``split``.

    Frames are resampled with fixed per-frame seeds, so values are comparable across
    epochs. Returns ``None`` when the split is empty.

    """
    triples = dataset.frame_triples(split)
    if not triples:
        return None

    network.eval()
    chamfer_total = shape_total = 0.0
    with torch.no_grad():
        for start in range(0, len(triples), batch_size):
            chunk = triples[start:start + batch_size]
            seeds = list(range(start, start + len(chunk)))
            clouds, truths, shapes = _load_frames(dataset, chunk, points, seeds)
            output, predicted = network(clouds)
            chamfer_total += batch_chamfer_distance(output.detail, truths).sum().item()
            shape_total += ((predicted - shapes) ** 2).mean(dim=-1).sum().item()

    return chamfer_total / len(triples), shape_total / len(triples)


@dataclass
class PretrainResult:
    checkpoint: Path
    metrics: Path
    network: PretrainNetwork
    history: list[dict[str, float | None]]


def run_pretraining(
    dataset: SyntheticDataset,
    config: RunConfig,
    out_dir: Path | str,
    seed: int = 0,
    resume: Path | str | None = None,
) -> PretrainResult:
    """
    Pre-train the encoder with the completion and shape heads on the training frames.

    The checkpoint stores the encoder under ``encoder.``, the key prefix the ReID
    network uses, so its weights initialize ReID training directly.

    """
    cfg = config.pretrain
    out_dir = Path(out_dir)
    triples = dataset.frame_triples("train")
    if not triples:
        raise InvalidInputError("the training split has no frames")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    network = PretrainNetwork(config.encoder, cfg)
    optimizer, scheduler = make_optimizer(
        network, cfg.learning_rate, cfg.weight_decay, cfg.lr_floor, cfg.lr_cycle
    )
    start = 0
    if resume is not None:
        checkpoint = load_checkpoint(resume, kind="pretrain")
        load_weights(network, checkpoint.tensors)
        if checkpoint.optimizer is None or checkpoint.scheduler is None:
            raise InvalidInputError(f"{resume} holds no optimizer state to resume from")

        optimizer.load_state_dict(checkpoint.optimizer)
        scheduler.load_state_dict(checkpoint.scheduler)
        restore_rng(rng, checkpoint.rng)
        start = checkpoint.epoch
        logger.info("Resuming pre-training from epoch %d of %s", start, resume)

    metrics = MetricsLog(out_dir / "pretrain-metrics.csv", PRETRAIN_METRICS)
    metrics.start(start if resume is not None else None)
    latest = out_dir / "pretrain.ckpt"
    history: list[dict[str, float | None]] = []
    points = config.encoder.points
    for epoch in tqdm(range(start, cfg.epochs), desc="pretrain", unit="epoch", disable=None):
        delta = delta_schedule(epoch, cfg.delta_milestones, cfg.delta_values)
        network.train()
        order = rng.permutation(len(triples))
        totals = np.zeros(3)
        batches = 0
        for begin in range(0, len(order), cfg.batch_size):
            chunk = [triples[int(i)] for i in order[begin:begin + cfg.batch_size]]
            clouds, truths, shapes = _load_frames(
                dataset, chunk, points, [rng] * len(chunk)
            )
            output, predicted = network(clouds)
            completion = completion_loss(output, truths, delta)
            shape = mse(shapes, predicted)
            loss = completion + cfg.shape_weight * shape
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            totals += [loss.item(), completion.item(), shape.item()]
            batches += 1

        learning_rate = optimizer.param_groups[0]["lr"]
        scheduler.step()
        validation = validate_pretraining(network, dataset, points, batch_size=cfg.batch_size)
        loss_value, completion_value, shape_value = (totals / batches).tolist()
        row: dict[str, float | None] = {
            "epoch": epoch,
            "loss": loss_value,
            "lr": learning_rate,
            "completion": completion_value,
            "shape": shape_value,
            "delta": delta,
            "val_chamfer": validation[0] if validation else None,
            "val_shape_mse": validation[1] if validation else None,
        }
        metrics.append(row)
        history.append(row)
        logger.info(
            "epoch %d: loss %.4f (completion %.4f, shape %.4f), delta %g, lr %.3g",
            epoch, loss_value, completion_value, shape_value, delta, learning_rate,
        )

        done = epoch + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
            checkpoint = Checkpoint(
                kind="pretrain",
                tensors=network.state_dict(),
                metadata={
                    "epoch": done,
                    "seed": seed,
                    "config": config.model_dump(mode="json"),
                },
                optimizer=optimizer.state_dict(),
                scheduler=scheduler.state_dict(),
                rng=capture_rng(rng),
            )
            save_checkpoint(out_dir / f"pretrain-epoch{done:04d}.ckpt", checkpoint)
            save_checkpoint(latest, checkpoint)

    return PretrainResult(latest, metrics.path, network, history)


def load_pretrain_network(path: Path | str) -> tuple[PretrainNetwork, RunConfig]:
    checkpoint = load_checkpoint(path, kind="pretrain")
    config = RunConfig.model_validate(checkpoint.metadata["config"])
    network = PretrainNetwork(config.encoder, config.pretrain)
    load_weights(network, checkpoint.tensors)
    network.eval()
    return network, config
