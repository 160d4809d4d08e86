from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch

from .errors import InvalidInputError

SHAPE_PARAM_COUNT = 10


def _as_float_array(value: Any, name: str) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise InvalidInputError(f"{name} contains non-finite values")

    return array


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An unordered set of 3-D points in meters, stored as an ``(N, 3)`` array."""

    points: np.ndarray

    def __post_init__(self) -> None:
        points = _as_float_array(self.points, "point cloud")
        if points.size == 0:
            points = points.reshape(0, 3)

        if points.ndim != 2 or points.shape[1] != 3:
            raise InvalidInputError(
                f"point cloud must have shape (N, 3), got {points.shape}"
            )

        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(count={len(self)})"

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor) -> PointCloud:
        return cls(tensor.detach().cpu().to(torch.float64).numpy())

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor(self.points, dtype=dtype)

    def translated(self, offset: Sequence[float] | np.ndarray) -> PointCloud:
        return PointCloud(self.points + np.asarray(offset, dtype=np.float64))

    def bounding_box(self) -> Aabb:
        if not len(self):
            raise InvalidInputError("cannot compute the bounding box of an empty cloud")

        return Aabb(self.points.min(axis=0), self.points.max(axis=0))


@dataclass(frozen=True, eq=False)
class Aabb:
    """Axis-aligned box given by its minimum and maximum corners (meters)."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self) -> None:
        lower = _as_float_array(self.min_corner, "box corner").reshape(3)
        upper = _as_float_array(self.max_corner, "box corner").reshape(3)
        if np.any(lower > upper):
            raise InvalidInputError(
                f"box minimum {lower.tolist()} exceeds maximum {upper.tolist()}"
            )

        object.__setattr__(self, "min_corner", lower)
        object.__setattr__(self, "max_corner", upper)

    @property
    def center(self) -> np.ndarray:
        return (self.min_corner + self.max_corner) / 2

    def expanded(self, margin: float) -> Aabb:
        return Aabb(self.min_corner - margin, self.max_corner + margin)

    def encloses(self, cloud: PointCloud, tolerance: float = 1e-6) -> bool:
        if not len(cloud):
            return True

        return bool(
            np.all(cloud.points >= self.min_corner - tolerance)
            and np.all(cloud.points <= self.max_corner + tolerance)
        )


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """
    Directed k-nearest-neighbor graph.

    Row ``i`` of ``indices`` lists the neighbors of point ``i`` by ascending distance,
    ties broken by ascending index. With ``include_self`` the point itself comes first.

    """

    indices: np.ndarray
    include_self: bool

    def __post_init__(self) -> None:
        indices = np.asarray(self.indices)
        if indices.ndim != 2 or not np.issubdtype(indices.dtype, np.integer):
            raise InvalidInputError(
                f"neighbor indices must be a 2-D integer array, got shape {indices.shape}"
            )

        count = indices.shape[0]
        if indices.size and (indices.min() < 0 or indices.max() >= count):
            raise InvalidInputError(f"neighbor indices must lie in [0, {count})")

        if self.include_self and indices.size and np.any(indices[:, 0] != np.arange(count)):
            raise InvalidInputError("every point must list itself as its first neighbor")

        object.__setattr__(self, "indices", indices)

    def neighbors(self, index: int) -> list[int]:
        return [int(i) for i in self.indices[index]]


@dataclass(frozen=True, eq=False)
class ShapeParams:
    """The 10 dimensionless body-shape coefficients (the role SMPL's beta plays)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = _as_float_array(self.values, "shape parameters").reshape(-1)
        if values.shape[0] != SHAPE_PARAM_COUNT:
            raise InvalidInputError(
                f"shape parameters must have {SHAPE_PARAM_COUNT} entries, "
                f"got {values.shape[0]}"
            )

        object.__setattr__(self, "values", values)

    def __getitem__(self, index: int) -> float:
        return float(self.values[index])


@dataclass
class SequenceSample:
    """A time-ordered list of frames of one pedestrian seen from one sensor view."""

    identity: int
    view: int
    sequence: int
    split: str
    frames: list[PointCloud]
    timestamps: list[float]
    truths: list[PointCloud] | None = None
    shape: ShapeParams | None = None

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class GallerySplit:
    """
    Query/gallery partition over a list of evaluated samples.

    ``query`` and ``gallery`` hold indices into ``identities`` / ``views`` (and into
    the embedding matrix handed to :func:`~pcreid.evaluation.evaluate`).

    """

    query: list[int]
    gallery: list[int]
    identities: np.ndarray
    views: np.ndarray

    def __post_init__(self) -> None:
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.views = np.asarray(self.views, dtype=np.int64)
        if self.identities.shape != self.views.shape:
            raise InvalidInputError("identity and view labels must have equal length")

        overlap = set(self.query) & set(self.gallery)
        if overlap:
            raise InvalidInputError(
                f"samples {sorted(overlap)} are in both the query and gallery sets"
            )

        count = len(self.identities)
        if any(not 0 <= i < count for i in (*self.query, *self.gallery)):
            raise InvalidInputError("split refers to samples without labels")


@dataclass
class EvalReport:
    """Retrieval results: CMC curve, mean average precision and the similarities."""

    cmc: np.ndarray
    mean_ap: float
    similarity: np.ndarray
    average_precisions: np.ndarray
    evaluated_queries: list[int] = field(default_factory=list)
    excluded_queries: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def rank(self, r: int) -> float:
        """Return the hit rate at rank ``r`` (1-based), saturating past the curve."""
        if r < 1:
            raise InvalidInputError("ranks start at 1")

        if not len(self.cmc):
            return 0.0

        return float(self.cmc[min(r, len(self.cmc)) - 1])
