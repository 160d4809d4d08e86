from __future__ import annotations

from importlib.metadata import entry_points

import torch
from torch import nn

from .config import EncoderConfig, TemporalConfig
from .gcee import FrameEncoder
from .temporal import TemporalModule

ENCODER_GROUP = "pcreid.encoders"
TEMPORAL_GROUP = "pcreid.temporal"


def _load_plugin(group: str, name: str) -> type:
    plugins = {ep.name: ep for ep in entry_points(group=group)}
    try:
        return plugins[name].load()  # type: ignore[no-any-return]
    except KeyError:
        available = ", ".join(sorted(plugins)) or "none"
        raise LookupError(
            f"No {group!r} plugin named {name!r} (available: {available})"
        ) from None


def build_encoder(config: EncoderConfig) -> FrameEncoder:
    encoder_class = _load_plugin(ENCODER_GROUP, config.name)
    if not issubclass(encoder_class, FrameEncoder):
        raise TypeError(f"{encoder_class.__qualname__} is not a FrameEncoder subclass")

    return encoder_class(config)


def build_temporal(config: TemporalConfig, width: int) -> TemporalModule:
    temporal_class = _load_plugin(TEMPORAL_GROUP, config.name)
    if not issubclass(temporal_class, TemporalModule):
        raise TypeError(
            f"{temporal_class.__qualname__} is not a TemporalModule subclass"
        )

    return temporal_class(config, width)


class ReIDNetwork(nn.Module):
    """
    Frame encoder, temporal module and an identity classifier.

    The classifier exists for the cross-entropy term only; retrieval uses the fused
    sequence embedding.

    """

    def __init__(
        self,
        encoder_config: EncoderConfig,
        temporal_config: TemporalConfig,
        num_classes: int,
    ):
        super().__init__()
        self.encoder = build_encoder(encoder_config)
        self.temporal = build_temporal(temporal_config, self.encoder.output_dim)
        self.classifier = nn.Linear(self.temporal.output_dim, num_classes)

    @property
    def embedding_dim(self) -> int:
        return self.temporal.output_dim

    def embed(self, points: torch.Tensor) -> torch.Tensor:
        """
        Embed ``(B, T, N, 3)`` sequences.

        Frames are encoded over the whole sequence. Frame vectors of sequences longer
        than the temporal module accepts are cut into consecutive chunks; the embedding
        is the mean over chunk embeddings.

        """
        limit = self.temporal.config.max_length
        frames = self.encoder.encode_sequences(points)
        chunks = [
            self.temporal.fuse(frames[:, start:start + limit])
            for start in range(0, frames.shape[1], limit)
        ]
        return torch.stack(chunks).mean(dim=0)

    def forward(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        embeddings = self.embed(points)
        return embeddings, self.classifier(embeddings)
