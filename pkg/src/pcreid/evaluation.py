from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import torch
from tqdm import tqdm

from .errors import InvalidInputError
from .geometry import resample
from .models import EvalReport, GallerySplit, SequenceSample
from .network import ReIDNetwork

PROTOCOL_NOTES = (
    "similarity: cosine between sequence embeddings",
    "exclusion: gallery samples sharing the query's identity and view are skipped",
    "ties: equal similarities rank by ascending gallery index",
    "AP: mean over correct matches of the precision at each match's rank",
    "CMC and mAP average over evaluated queries only",
)

logger = logging.getLogger(__name__)


def cosine_similarity(a: np.ndarray | Sequence[float], b: np.ndarray | Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norms = np.linalg.norm(a) * np.linalg.norm(b)
    if norms == 0:
        raise InvalidInputError("cosine similarity is undefined for zero vectors")

    return float(np.clip(a @ b / norms, -1.0, 1.0))


def similarity_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Cosine similarities between the rows of ``queries`` and ``gallery``."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    query_norms = np.linalg.norm(queries, axis=1, keepdims=True)
    gallery_norms = np.linalg.norm(gallery, axis=1, keepdims=True)
    if np.any(query_norms == 0) or np.any(gallery_norms == 0):
        raise InvalidInputError("cosine similarity is undefined for zero embeddings")

    return np.clip((queries / query_norms) @ (gallery / gallery_norms).T, -1.0, 1.0)


def build_gallery_split(
    identities: Sequence[int], views: Sequence[int], seed: int = 0
) -> GallerySplit:
    """Pick one query sample per identity at random; every other sample joins the gallery."""
    identities = np.asarray(identities, dtype=np.int64)
    rng = np.random.default_rng(seed)
    query = [
        int(rng.choice(np.flatnonzero(identities == identity)))
        for identity in np.unique(identities)
    ]
    chosen = set(query)
    gallery = [index for index in range(len(identities)) if index not in chosen]
    return GallerySplit(sorted(query), gallery, identities, np.asarray(views))


def evaluate(split: GallerySplit, embeddings: np.ndarray | torch.Tensor) -> EvalReport:
    """
    Rank the gallery for every query and compute the CMC curve and mean AP.

    Queries whose identity has no eligible gallery sample are excluded and listed in
    the report.

    """
    if isinstance(embeddings, torch.Tensor):
        embeddings = embeddings.detach().cpu().to(torch.float64).numpy()

    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or len(embeddings) != len(split.identities):
        raise InvalidInputError(
            f"expected one embedding row per sample ({len(split.identities)}), "
            f"got shape {embeddings.shape}"
        )

    if not split.gallery:
        raise InvalidInputError("the gallery is empty")

    gallery = np.asarray(split.gallery)
    similarity = similarity_matrix(embeddings[split.query], embeddings[gallery])
    gallery_ids = split.identities[gallery]
    gallery_views = split.views[gallery]
    curves: list[np.ndarray] = []
    precisions: list[float] = []
    evaluated: list[int] = []
    excluded: list[int] = []
    for row, query in enumerate(split.query):
        identity, view = split.identities[query], split.views[query]
        eligible = np.flatnonzero(~((gallery_ids == identity) & (gallery_views == view)))
        order = eligible[np.argsort(-similarity[row, eligible], kind="stable")]
        matches = gallery_ids[order] == identity
        if not matches.any():
            excluded.append(query)
            continue

        hits = np.cumsum(matches)
        curve = (hits > 0).astype(np.float64)
        ranks = np.flatnonzero(matches) + 1
        precisions.append(float(np.mean(hits[ranks - 1] / ranks)))
        curves.append(curve)
        evaluated.append(query)

    notes = list(PROTOCOL_NOTES)
    if excluded:
        notes.append(f"excluded queries without an eligible match: {excluded}")
        logger.warning("%d queries have no eligible gallery match", len(excluded))

    if not curves:
        raise InvalidInputError("no query has an eligible match in the gallery")

    length = max(len(curve) for curve in curves)
    padded = np.stack([np.pad(curve, (0, length - len(curve)), constant_values=1.0) for curve in curves])
    return EvalReport(
        cmc=padded.mean(axis=0),
        mean_ap=float(np.mean(precisions)),
        similarity=similarity,
        average_precisions=np.asarray(precisions),
        evaluated_queries=evaluated,
        excluded_queries=excluded,
        notes=notes,
    )


def embed_samples(
    network: ReIDNetwork,
    samples: Sequence[SequenceSample],
    points: int,
    seed: int = 0,
    sequence_length: int | None = None,
) -> np.ndarray:
    """
    Embed every sample with ``network`` in evaluation mode.

    Frames are resampled to ``points`` with per-sample seeds; ``sequence_length``
    keeps only the leading frames.

    """
    dtype = next(network.parameters()).dtype
    network.eval()
    rows = []
    with torch.no_grad():
        for index, sample in enumerate(tqdm(samples, desc="embed", unit="seq", disable=None)):
            frames = sample.frames[:sequence_length] if sequence_length else sample.frames
            rng = np.random.default_rng([seed, index])
            sequence = torch.stack([resample(frame, points, rng).to_tensor(dtype) for frame in frames])
            rows.append(network.embed(sequence.unsqueeze(0))[0].to(torch.float64).numpy())

    return np.stack(rows)


def write_report(
    report: EvalReport,
    path: Path | str,
    ranks: Sequence[int] = (1, 3, 5, 10),
    conditions: Sequence[str] = (),
) -> None:
    lines = ["# ReID evaluation report"]
    lines += [f"# {note}" for note in report.notes]
    if conditions:
        lines.append(f"# conditions: {', '.join(sorted(set(conditions)))}")

    lines += [
        "",
        f"queries evaluated: {len(report.evaluated_queries)}",
        f"queries excluded: {len(report.excluded_queries)}",
        f"mAP: {report.mean_ap:.6f}",
        "",
        "rank  hit_rate",
    ]
    lines += [f"{rank:<5d} {report.rank(rank):.6f}" for rank in ranks]
    Path(path).write_text("\n".join(lines) + "\n")


def write_cmc_csv(report: EvalReport, path: Path | str) -> None:
    with Path(path).open("w", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["rank", "hit_rate"])
        for rank, value in enumerate(report.cmc, start=1):
            writer.writerow([rank, f"{value:.6f}"])


def export_embeddings(path: Path | str, split: GallerySplit, embeddings: np.ndarray) -> None:
    """Save query and gallery embeddings with their labels as a compressed ``.npz``."""
    query, gallery = np.asarray(split.query), np.asarray(split.gallery)
    np.savez_compressed(
        path,
        query_embeddings=embeddings[query],
        query_identities=split.identities[query],
        query_views=split.views[query],
        gallery_embeddings=embeddings[gallery],
        gallery_identities=split.identities[gallery],
        gallery_views=split.views[gallery],
    )
