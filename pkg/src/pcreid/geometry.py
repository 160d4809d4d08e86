"""Point-cloud geometry kernels: normalization, resampling, KNN graphs, Chamfer distance."""

from __future__ import annotations

from typing import Literal, Union

import numpy as np
import torch

from .errors import InvalidInputError
from .models import Aabb, NeighborGraph, PointCloud

SeedLike = Union[int, np.random.Generator, None]
ResampleMethod = Literal["random", "fps"]

# cdist without the |a|^2 - 2ab + |b|^2 expansion: exact zeros and exact ties
_EXACT_CDIST = "donot_use_mm_for_euclid_dist"


def normalize_to_box_center(
    cloud: PointCloud, box: Aabb, tolerance: float = 1e-6
) -> PointCloud:
    """Translate ``cloud`` so that the center of ``box`` lands on the origin."""
    if not box.encloses(cloud, tolerance):
        raise InvalidInputError("the bounding box does not enclose the point cloud")

    return PointCloud(cloud.points - box.center)


def farthest_point_indices(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    count = points.shape[0]
    selected = np.empty(n, dtype=np.int64)
    selected[0] = rng.integers(count)
    nearest = np.full(count, np.inf)
    for i in range(1, n):
        delta = points - points[selected[i - 1]]
        nearest = np.minimum(nearest, np.einsum("ij,ij->i", delta, delta))
        selected[i] = int(np.argmax(nearest))

    return selected


def resample(
    cloud: PointCloud, n: int, seed: SeedLike = None, method: ResampleMethod = "random"
) -> PointCloud:
    """
    Bring ``cloud`` to exactly ``n`` points.

    Larger clouds are reduced to a subset without replacement (uniformly at random, or
    by farthest-point sampling with ``method="fps"``). Smaller clouds keep every point
    and receive duplicates drawn uniformly at random.

    """
    count = len(cloud)
    if count == 0:
        raise InvalidInputError("cannot resample an empty point cloud")

    if n < 1:
        raise InvalidInputError(f"target point count must be positive, got {n}")

    if count == n:
        return cloud

    rng = np.random.default_rng(seed)
    if count > n:
        if method == "fps":
            indices = farthest_point_indices(cloud.points, n, rng)
        elif method == "random":
            indices = rng.choice(count, size=n, replace=False)
        else:
            raise InvalidInputError(f"unknown resampling method {method!r}")
    else:
        extra = rng.integers(count, size=n - count)
        indices = np.concatenate([np.arange(count), extra])

    return PointCloud(cloud.points[indices])


def pairwise_distances(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Euclidean distances between the rows of ``x`` and ``y`` (batched over leading dims)."""
    return torch.cdist(x, y, compute_mode=_EXACT_CDIST)


def knn_indices(features: torch.Tensor, k: int, include_self: bool = True) -> torch.Tensor:
    """
    Return the ``(..., N, k)`` neighbor indices of every row of ``features``.

    Neighbors are ordered by ascending Euclidean distance with ties broken by
    ascending index. With ``include_self`` each row lists itself first.

    """
    count = features.shape[-2]
    limit = count if include_self else count - 1
    if not 1 <= k <= limit:
        raise InvalidInputError(
            f"k={k} is out of range for {count} points "
            f"({'with' if include_self else 'without'} self-loops)"
        )

    with torch.no_grad():
        distances = pairwise_distances(features.detach(), features.detach())
        diagonal = torch.diagonal(distances, dim1=-2, dim2=-1)
        diagonal.fill_(-1.0 if include_self else float("inf"))
        order = torch.sort(distances, dim=-1, stable=True).indices

    return order[..., :k]


def knn(
    points_or_features: np.ndarray | torch.Tensor | PointCloud,
    k: int,
    include_self: bool = True,
) -> NeighborGraph:
    if isinstance(points_or_features, PointCloud):
        rows = points_or_features.to_tensor(torch.float64)
    else:
        rows = torch.as_tensor(points_or_features)

    if rows.ndim == 1:
        rows = rows.unsqueeze(-1)

    if rows.ndim != 2:
        raise InvalidInputError(f"expected a 2-D feature matrix, got shape {tuple(rows.shape)}")

    if not torch.isfinite(rows).all():
        raise InvalidInputError("feature matrix contains non-finite values")

    indices = knn_indices(rows, k, include_self)
    return NeighborGraph(indices.numpy().astype(np.int64), include_self)


def batch_chamfer_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Differentiable Chamfer distance between ``(..., N, 3)`` and ``(..., M, 3)`` sets.

    Both directional terms average non-squared nearest-neighbor distances.

    """
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise InvalidInputError("Chamfer distance is undefined for empty point sets")

    distances = pairwise_distances(a, b)
    forward = distances.min(dim=-1).values.mean(dim=-1)
    backward = distances.min(dim=-2).values.mean(dim=-1)
    return forward + backward


def chamfer_distance(a: PointCloud, b: PointCloud) -> float:
    if not len(a) or not len(b):
        raise InvalidInputError("Chamfer distance is undefined for empty point clouds")

    value = batch_chamfer_distance(a.to_tensor(torch.float64), b.to_tensor(torch.float64))
    return float(value)
