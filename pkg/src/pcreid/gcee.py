"""
Graph-based complementary enhancement encoder.

A stack of edge convolutions over graphs rebuilt in feature space at every layer
(the backbone), followed by the complementary feature extractor: a salient branch
pooling the primary frame and a supplementary branch pooling the next frame after
the region most correlated with the salient features has been erased from it.

"""

from __future__ import annotations

from abc import ABCMeta, abstractmethod
from collections.abc import Sequence

import torch
from torch import nn

from .config import EncoderConfig
from .errors import InvalidInputError
from .functional import (
    DEFAULT_NEGATIVE_SLOPE,
    affine,
    global_max_pool,
    glorot_uniform_,
    leaky_relu,
)
from .geometry import knn_indices
from .models import NeighborGraph, PointCloud


def gather_neighbors(features: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """Collect ``(..., N, k, D)`` neighbor rows of ``(..., N, D)`` features."""
    *batch, count, width = features.shape
    k = indices.shape[-1]
    flat = indices.reshape(*batch, count * k, 1).expand(*batch, count * k, width)
    return torch.gather(features, -2, flat).reshape(*batch, count, k, width)


class EdgeConv(nn.Module):
    """Edge convolution kernel mapping ``[f_i, f_j - f_i]`` (``2 * D_in``) to ``D_out``."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        negative_slope: float = DEFAULT_NEGATIVE_SLOPE,
    ):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.negative_slope = negative_slope
        self.weight = nn.Parameter(torch.empty(2 * in_dim, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        glorot_uniform_(self.weight, 2 * in_dim, out_dim)

    def forward(self, features: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        return edge_conv(features, neighbors, self)

    def extra_repr(self) -> str:
        return f"{self.in_dim} -> {self.out_dim}"


def edge_conv(
    features: torch.Tensor,
    graph: NeighborGraph | torch.Tensor,
    layer: EdgeConv,
) -> torch.Tensor:
    """
    Apply one edge convolution.

    Every point takes the channel-wise maximum of
    ``LeakyReLU([f_i, f_j - f_i] @ kernel)`` over its neighbors ``j``.

    :param features: ``(..., N, D_in)`` features
    :param graph: the neighbor graph over exactly these rows, or its index tensor
    :param layer: the kernel
    :return: ``(..., N, D_out)`` features

    """
    if isinstance(graph, NeighborGraph):
        neighbors = torch.as_tensor(graph.indices, device=features.device)
    else:
        neighbors = graph

    if neighbors.shape[:-1] != features.shape[:-1]:
        raise InvalidInputError(
            f"graph over {neighbors.shape[-2]} points does not match features with "
            f"{features.shape[-2]} rows"
        )

    if features.shape[-1] != layer.in_dim:
        raise InvalidInputError(
            f"layer expects {layer.in_dim} input channels, got {features.shape[-1]}"
        )

    k = neighbors.shape[-1]
    center = features.unsqueeze(-2).expand(*features.shape[:-1], k, features.shape[-1])
    edges = torch.cat([center, gather_neighbors(features, neighbors) - center], dim=-1)
    response = leaky_relu(affine(edges, layer.weight, layer.bias), layer.negative_slope)
    return response.amax(dim=-2)


class GraphBackbone(nn.Module):
    """Stacked edge convolutions; every layer rebuilds its KNN graph from its input."""

    def __init__(
        self,
        widths: Sequence[int],
        k: int,
        negative_slope: float = DEFAULT_NEGATIVE_SLOPE,
    ):
        super().__init__()
        self.k = k
        dims = [3, *widths]
        self.layers = nn.ModuleList(
            EdgeConv(dims[i], dims[i + 1], negative_slope) for i in range(len(widths))
        )

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        features = points
        for layer in self.layers:
            features = edge_conv(features, knn_indices(features, self.k), layer)

        return features


class SalientPool(nn.Module):
    """A graph convolution over a fresh feature-space graph, then global max pooling."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        k: int,
        negative_slope: float = DEFAULT_NEGATIVE_SLOPE,
    ):
        super().__init__()
        self.k = k
        self.conv = EdgeConv(in_dim, out_dim, negative_slope)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return salient_pool(features, self)


def salient_pool(features: torch.Tensor, branch: SalientPool) -> torch.Tensor:
    graph = knn_indices(features, branch.k)
    return global_max_pool(edge_conv(features, graph, branch.conv))


def correlate(
    supplementary: torch.Tensor, salient: torch.Tensor, omega: torch.Tensor
) -> torch.Tensor:
    """
    Correlate every supplementary row with the projected salient vector.

    :param supplementary: ``(..., N, D)`` features ``F_s``
    :param salient: ``(..., D_C)`` salient vector ``f_p``
    :param omega: ``(D_C, D)`` projection
    :return: ``(..., N)`` correlation vector ``F_s @ (f_p @ omega)^T``

    """
    if omega.ndim != 2 or salient.shape[-1] != omega.shape[0]:
        raise InvalidInputError(
            f"salient vector of width {salient.shape[-1]} does not fit projection "
            f"of shape {tuple(omega.shape)}"
        )

    if supplementary.shape[-1] != omega.shape[1]:
        raise InvalidInputError(
            f"supplementary features of width {supplementary.shape[-1]} do not fit "
            f"projection of shape {tuple(omega.shape)}"
        )

    projected = affine(salient, omega)
    return torch.matmul(supplementary, projected.unsqueeze(-1)).squeeze(-1)


def binarize(
    correlation: torch.Tensor, supplementary: torch.Tensor, erase_neighbors: int = 8
) -> torch.Tensor:
    """
    Select the region to erase and return the binary keep-mask.

    The score of point ``i`` is the summed correlation over ``i`` and its
    ``erase_neighbors`` nearest neighbors in feature space. The best-scoring region
    (lowest index on ties) is zero in the returned ``(..., N)`` mask, the rest is one.

    """
    count = supplementary.shape[-2]
    if correlation.shape != supplementary.shape[:-1]:
        raise InvalidInputError(
            f"correlation of shape {tuple(correlation.shape)} does not match "
            f"{count} feature rows"
        )

    if erase_neighbors < 1 or erase_neighbors + 1 > count:
        raise InvalidInputError(
            f"cannot erase a region of {erase_neighbors + 1} points from {count} points"
        )

    with torch.no_grad():
        regions = knn_indices(supplementary, erase_neighbors + 1)
        correlation = correlation.detach()
        scores = torch.gather(correlation, -1, regions.flatten(-2))
        scores = scores.reshape(regions.shape).sum(dim=-1)
        best = scores.argmax(dim=-1, keepdim=True)
        erased = torch.gather(
            regions, -2, best.unsqueeze(-1).expand(*best.shape, regions.shape[-1])
        ).squeeze(-2)
        mask = torch.ones_like(correlation)
        mask.scatter_(-1, erased, 0.0)

    return mask


def erase(supplementary: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero the rows of ``supplementary`` where ``mask`` is 0."""
    if mask.shape != supplementary.shape[:-1]:
        raise InvalidInputError(
            f"mask of shape {tuple(mask.shape)} does not match "
            f"{supplementary.shape[-2]} feature rows"
        )

    return supplementary * mask.detach().unsqueeze(-1)


class ComplementaryFeatureExtractor(nn.Module):
    def __init__(
        self,
        in_dim: int,
        branch_width: int,
        k: int,
        erase_neighbors: int,
        mode: str = "full",
        negative_slope: float = DEFAULT_NEGATIVE_SLOPE,
    ):
        super().__init__()
        self.mode = mode
        self.erase_neighbors = erase_neighbors
        self.primary = SalientPool(in_dim, branch_width, k, negative_slope)
        self.supplementary = SalientPool(in_dim, branch_width, k, negative_slope)
        self.omega = nn.Parameter(torch.empty(branch_width, in_dim))
        glorot_uniform_(self.omega, branch_width, in_dim)

    @property
    def output_dim(self) -> int:
        width = self.primary.conv.out_dim
        return width if self.mode == "no_cfe" else 2 * width

    def erase_mask(self, primary: torch.Tensor, supplementary: torch.Tensor) -> torch.Tensor:
        salient = salient_pool(primary, self.primary)
        correlation = correlate(supplementary, salient, self.omega)
        return binarize(correlation, supplementary, self.erase_neighbors)

    def forward(self, primary: torch.Tensor, supplementary: torch.Tensor) -> torch.Tensor:
        return cfe_forward(primary, supplementary, self)


def cfe_forward(
    primary: torch.Tensor,
    supplementary: torch.Tensor,
    params: ComplementaryFeatureExtractor,
) -> torch.Tensor:
    """Return ``[f_p, f_s]``, the complementary features of the primary frame."""
    if primary.shape != supplementary.shape:
        raise InvalidInputError(
            f"primary features {tuple(primary.shape)} and supplementary features "
            f"{tuple(supplementary.shape)} differ in shape"
        )

    salient = salient_pool(primary, params.primary)
    if params.mode == "no_cfe":
        return salient

    if params.mode == "full":
        correlation = correlate(supplementary, salient, params.omega)
        mask = binarize(correlation, supplementary, params.erase_neighbors)
        supplementary = erase(supplementary, mask)

    auxiliary = salient_pool(supplementary, params.supplementary)
    return torch.cat([salient, auxiliary], dim=-1)


class FrameEncoder(nn.Module, metaclass=ABCMeta):
    """
    Base class of per-frame point-cloud encoders.

    Subclasses embed a primary frame given its supplementary frame. Sequence encoding
    pairs every frame with the next one and the last frame with itself.

    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config

    @property
    @abstractmethod
    def output_dim(self) -> int:
        pass

    @abstractmethod
    def encode_pairs(
        self, primary: torch.Tensor, supplementary: torch.Tensor
    ) -> torch.Tensor:
        """Embed ``(..., N, 3)`` primary frames as ``(..., output_dim)`` vectors."""

    def encode_frames(self, points: torch.Tensor) -> torch.Tensor:
        """Embed frames using each frame as its own supplementary frame."""
        return self.encode_pairs(points, points)

    def encode_sequences(self, points: torch.Tensor) -> torch.Tensor:
        """Embed ``(B, T, N, 3)`` sequences as ``(B, T, output_dim)`` frame vectors."""
        if points.ndim != 4 or points.shape[1] == 0:
            raise InvalidInputError(
                f"expected (B, T, N, 3) sequences with T >= 1, got {tuple(points.shape)}"
            )

        supplementary = torch.cat([points[:, 1:], points[:, -1:]], dim=1)
        return self.encode_pairs(points, supplementary)


class GraphComplementaryEncoder(FrameEncoder):
    def __init__(self, config: EncoderConfig):
        super().__init__(config)
        self.backbone = GraphBackbone(
            config.backbone_widths, config.k, config.negative_slope
        )
        self.cfe = ComplementaryFeatureExtractor(
            self.backbone.output_dim,
            config.branch_width,
            config.k,
            config.erase_neighbors,
            config.cfe_mode,
            config.negative_slope,
        )

    @property
    def output_dim(self) -> int:
        return self.cfe.output_dim

    def encode_pairs(
        self, primary: torch.Tensor, supplementary: torch.Tensor
    ) -> torch.Tensor:
        return self.cfe(self.backbone(primary), self.backbone(supplementary))

    def encode_frames(self, points: torch.Tensor) -> torch.Tensor:
        features = self.backbone(points)
        return self.cfe(features, features)

    def encode_sequences(self, points: torch.Tensor) -> torch.Tensor:
        if points.ndim != 4 or points.shape[1] == 0:
            raise InvalidInputError(
                f"expected (B, T, N, 3) sequences with T >= 1, got {tuple(points.shape)}"
            )

        # run the backbone once per frame and shift for the supplementary frames
        batch, length = points.shape[:2]
        features = self.backbone(points.flatten(0, 1)).unflatten(0, (batch, length))
        supplementary = torch.cat([features[:, 1:], features[:, -1:]], dim=1)
        return self.cfe(features, supplementary)


def encode_sequence(
    encoder: FrameEncoder, frames: Sequence[PointCloud]
) -> torch.Tensor:
    """Embed one sequence of normalized, resampled frames as ``(n, output_dim)``."""
    if not frames:
        raise InvalidInputError("cannot encode an empty sequence")

    counts = {len(frame) for frame in frames}
    if len(counts) != 1:
        raise InvalidInputError(
            f"all frames must have the same point count, got {sorted(counts)}"
        )

    dtype = next(encoder.parameters()).dtype
    points = torch.stack([frame.to_tensor(dtype) for frame in frames])
    return encoder.encode_sequences(points.unsqueeze(0)).squeeze(0)
