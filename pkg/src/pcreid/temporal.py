from __future__ import annotations

import math
from abc import ABCMeta, abstractmethod

import torch
from torch import nn

from .config import TemporalConfig
from .errors import InvalidInputError


def sinusoidal_encoding(length: int, width: int) -> torch.Tensor:
    """Fixed ``(length, width)`` sine/cosine position table."""
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    frequency = torch.exp(
        torch.arange(0, width, 2, dtype=torch.float64) * (-math.log(10000.0) / width)
    )
    table = torch.zeros(length, width, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * frequency)
    table[:, 1::2] = torch.cos(position * frequency[: width // 2])
    return table.to(torch.get_default_dtype())


class TemporalModule(nn.Module, metaclass=ABCMeta):
    """Base class of modules aggregating frame vectors into one sequence vector."""

    def __init__(self, config: TemporalConfig, width: int):
        super().__init__()
        self.config = config
        self.width = width

    @property
    def output_dim(self) -> int:
        return self.width

    @abstractmethod
    def fuse(self, sequences: torch.Tensor) -> torch.Tensor:
        """Map ``(B, n, width)`` (or ``(n, width)``) frame vectors to ``(B, D_T)``."""

    def forward(self, sequences: torch.Tensor) -> torch.Tensor:
        return self.fuse(sequences)

    def check_sequences(self, sequences: torch.Tensor) -> torch.Tensor:
        if sequences.ndim == 2:
            sequences = sequences.unsqueeze(0)

        if sequences.ndim != 3 or sequences.shape[-1] != self.width:
            raise InvalidInputError(
                f"expected (B, n, {self.width}) frame vectors, "
                f"got {tuple(sequences.shape)}"
            )

        length = sequences.shape[1]
        if not 1 <= length <= self.config.max_length:
            raise InvalidInputError(
                f"sequence length {length} is outside 1..{self.config.max_length}"
            )

        return sequences


class TransformerFusion(TemporalModule):
    """
    Transformer encoder over frame vectors followed by mean pooling over positions.

    Post-norm encoder layers (self-attention and feed-forward, each with a residual
    connection and layer normalization), without dropout.

    """

    def __init__(self, config: TemporalConfig, width: int):
        super().__init__(config, width)
        if width % config.heads:
            raise InvalidInputError(
                f"model width {width} is not divisible by {config.heads} heads"
            )

        layer = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=config.heads,
            dim_feedforward=config.feedforward,
            dropout=0.0,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=config.layers, enable_nested_tensor=False
        )
        self.register_buffer(
            "positions",
            sinusoidal_encoding(config.max_length, width),
            persistent=False,
        )

    def embed_positions(self, sequences: torch.Tensor) -> torch.Tensor:
        if self.config.positional == "none":
            return sequences

        table = self.positions[: sequences.shape[1]].to(sequences.dtype)
        return sequences + table

    def fuse(self, sequences: torch.Tensor) -> torch.Tensor:
        squeeze = sequences.ndim == 2
        sequences = self.check_sequences(sequences)
        encoded = self.encoder(self.embed_positions(sequences))
        fused = encoded.mean(dim=1)
        return fused.squeeze(0) if squeeze else fused

    def attention_weights(self, sequences: torch.Tensor) -> list[torch.Tensor]:
        """Return the ``(B, heads, n, n)`` attention matrices of every layer."""
        x = self.embed_positions(self.check_sequences(sequences))
        weights = []
        for layer in self.encoder.layers:
            _, attention = layer.self_attn(
                x, x, x, need_weights=True, average_attn_weights=False
            )
            weights.append(attention)
            x = layer(x)

        return weights
