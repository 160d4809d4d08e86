from __future__ import annotations

import io
import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .errors import CheckpointMismatchError, InvalidInputError

CHECKPOINT_FORMAT = "pcreid-checkpoint"
CHECKPOINT_VERSION = 1

logger = logging.getLogger(__name__)


def package_version() -> str:
    try:
        return version("pcreid")
    except PackageNotFoundError:
        return "unknown"


@dataclass
class Checkpoint:
    """Named float32 tensors plus the state needed to resume a training run."""

    kind: str
    tensors: dict[str, torch.Tensor]
    metadata: dict[str, Any] = field(default_factory=dict)
    optimizer: dict[str, Any] | None = None
    scheduler: dict[str, Any] | None = None
    rng: dict[str, Any] | None = None

    @property
    def epoch(self) -> int:
        return int(self.metadata.get("epoch", 0))

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        """Return the tensors under ``prefix`` with the prefix stripped."""
        return {
            key[len(prefix):]: value
            for key, value in self.tensors.items()
            if key.startswith(prefix)
        }


def save_checkpoint(path: Path | str, checkpoint: Checkpoint) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": checkpoint.kind,
        "metadata": {"package_version": package_version(), **checkpoint.metadata},
        "tensors": {
            key: value.detach().cpu().to(torch.float32).contiguous()
            for key, value in checkpoint.tensors.items()
        },
        "optimizer": checkpoint.optimizer,
        "scheduler": checkpoint.scheduler,
        "rng": checkpoint.rng,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    path.write_bytes(buffer.getvalue())
    logger.debug("Wrote %s checkpoint to %s", checkpoint.kind, path)


def load_checkpoint(path: Path | str, kind: str | None = None) -> Checkpoint:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise InvalidInputError(f"{path} is not a readable checkpoint: {exc}") from exc

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"{path} is not a {CHECKPOINT_FORMAT} file")

    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(
            f"{path} has checkpoint version {payload.get('version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )

    if kind is not None and payload["kind"] != kind:
        raise InvalidInputError(
            f"{path} is a {payload['kind']!r} checkpoint, expected {kind!r}"
        )

    return Checkpoint(
        kind=payload["kind"],
        tensors=payload["tensors"],
        metadata=payload["metadata"],
        optimizer=payload["optimizer"],
        scheduler=payload["scheduler"],
        rng=payload["rng"],
    )


def capture_rng(rng: np.random.Generator) -> dict[str, Any]:
    """Snapshot the torch and numpy random states in checkpoint-safe form."""
    return {
        "torch": torch.get_rng_state(),
        "numpy": json.dumps(rng.bit_generator.state, sort_keys=True),
    }


def restore_rng(rng: np.random.Generator, state: Mapping[str, Any] | None) -> None:
    if not state:
        raise InvalidInputError("checkpoint holds no random state to resume from")

    torch.set_rng_state(state["torch"])
    rng.bit_generator.state = json.loads(state["numpy"])


def shape_diff(
    expected: Mapping[str, torch.Tensor], actual: Mapping[str, torch.Tensor]
) -> list[str]:
    """List missing keys, unexpected keys and shape mismatches between state dicts."""
    problems = [f"missing: {key}" for key in expected if key not in actual]
    problems += [f"unexpected: {key}" for key in actual if key not in expected]
    for key, tensor in expected.items():
        if key in actual and actual[key].shape != tensor.shape:
            problems.append(
                f"{key}: expected {tuple(tensor.shape)} got {tuple(actual[key].shape)}"
            )

    return problems


def load_weights(module: nn.Module, tensors: Mapping[str, torch.Tensor]) -> None:
    """Load ``tensors`` into ``module``, reporting every mismatch at once."""
    expected = module.state_dict()
    problems = shape_diff(expected, tensors)
    if problems:
        raise CheckpointMismatchError(problems)

    module.load_state_dict(
        {key: value.to(expected[key].dtype) for key, value in tensors.items()}
    )
