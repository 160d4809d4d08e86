from __future__ import annotations

import json
import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import InvalidInputError
from .formats import read_lpc
from .models import PointCloud, SequenceSample, ShapeParams
from .synth import MANIFEST_FORMAT, MANIFEST_NAME, MANIFEST_VERSION

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SequenceRecord:
    """Manifest entry of one sequence; frame files are loaded on demand."""

    identity: int
    sequence: int
    view: int
    split: str
    timestamps: tuple[float, ...]
    clouds: tuple[str, ...]
    truths: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.clouds)


class SyntheticDataset:
    """
    Read access to a dataset directory written by :func:`~pcreid.synth.generate_dataset`.

    Decoded clouds are cached per instance.

    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        manifest_path = self.root / MANIFEST_NAME
        try:
            manifest = json.loads(manifest_path.read_text())
        except FileNotFoundError:
            raise InvalidInputError(f"no dataset manifest at {manifest_path}") from None
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{manifest_path} is not valid JSON: {exc}") from exc

        if manifest.get("format") != MANIFEST_FORMAT:
            raise InvalidInputError(f"{manifest_path} is not a {MANIFEST_FORMAT} manifest")

        if manifest.get("version") != MANIFEST_VERSION:
            raise InvalidInputError(
                f"unsupported manifest version {manifest.get('version')} in {manifest_path}"
            )

        self.manifest: dict[str, Any] = manifest
        self._identities = {int(entry["identity"]): entry for entry in manifest["identities"]}
        self.records = [
            SequenceRecord(
                identity=int(entry["identity"]),
                sequence=int(entry["sequence"]),
                view=int(entry["view"]),
                split=entry["split"],
                timestamps=tuple(float(frame["time"]) for frame in entry["frames"]),
                clouds=tuple(frame["cloud"] for frame in entry["frames"]),
                truths=tuple(frame.get("truth", "") for frame in entry["frames"]),
            )
            for entry in manifest["sequences"]
        ]
        self._cache: dict[str, PointCloud] = {}
        logger.debug("Loaded manifest with %d sequences from %s", len(self.records), self.root)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({str(self.root)!r})"

    def identity_ids(self, split: str | None = None) -> list[int]:
        return sorted(
            identity
            for identity, entry in self._identities.items()
            if split is None or entry["split"] == split
        )

    def sequences(self, split: str | None = None) -> list[SequenceRecord]:
        return [record for record in self.records if split is None or record.split == split]

    def shape_of(self, identity: int) -> ShapeParams:
        try:
            return ShapeParams(self._identities[identity]["shape"])
        except KeyError:
            raise InvalidInputError(f"identity {identity} has no shape annotation") from None

    def condition_of(self, identity: int) -> str:
        return str(self._identities[identity].get("condition", "unknown"))

    def load_cloud(self, relative: str) -> PointCloud:
        if not relative:
            raise InvalidInputError("frame has no ground truth cloud")

        cloud = self._cache.get(relative)
        if cloud is None:
            try:
                cloud = self._cache[relative] = read_lpc(self.root / relative)
            except FileNotFoundError:
                raise InvalidInputError(f"missing frame file {self.root / relative}") from None

        return cloud

    def load_sequence(self, record: SequenceRecord, with_truth: bool = False) -> SequenceSample:
        return SequenceSample(
            identity=record.identity,
            view=record.view,
            sequence=record.sequence,
            split=record.split,
            frames=[self.load_cloud(path) for path in record.clouds],
            timestamps=list(record.timestamps),
            truths=[self.load_cloud(path) for path in record.truths] if with_truth else None,
            shape=self.shape_of(record.identity) if record.identity in self._identities else None,
        )

    def iter_samples(
        self, split: str | None = None, with_truth: bool = False
    ) -> Iterator[SequenceSample]:
        for record in self.sequences(split):
            yield self.load_sequence(record, with_truth)

    def frame_triples(self, split: str | None = None) -> list[tuple[str, str, int]]:
        """List ``(cloud path, truth path, identity)`` for every frame of ``split``."""
        triples = []
        for record in self.sequences(split):
            if any(not truth for truth in record.truths):
                raise InvalidInputError(
                    f"sequence {record.sequence} of identity {record.identity} "
                    "lacks completion ground truth"
                )

            if record.identity not in self._identities or (
                "shape" not in self._identities[record.identity]
            ):
                raise InvalidInputError(
                    f"identity {record.identity} lacks a shape annotation"
                )

            triples += [
                (cloud, truth, record.identity)
                for cloud, truth in zip(record.clouds, record.truths)
            ]

        return triples
