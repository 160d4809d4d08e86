from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from pcreid.errors import InvalidInputError
from pcreid.evaluation import (
    build_gallery_split,
    cosine_similarity,
    evaluate,
    export_embeddings,
    similarity_matrix,
    write_cmc_csv,
    write_report,
)
from pcreid.models import GallerySplit


def brute_force_retrieval(split: GallerySplit, embeddings: np.ndarray) -> tuple[list[list[bool]], list[float]]:
    """Per evaluated query: the match flags in ranked order and the naive AP."""
    ranked, precisions = [], []
    for query in split.query:
        scored = []
        for position, index in enumerate(split.gallery):
            if (
                split.identities[index] == split.identities[query]
                and split.views[index] == split.views[query]
            ):
                continue

            similarity = cosine_similarity(embeddings[query], embeddings[index])
            scored.append((-similarity, position, split.identities[index] == split.identities[query]))

        matches = [match for *_, match in sorted(scored)]
        if not any(matches):
            continue

        correct, precision = 0, []
        for rank, match in enumerate(matches, start=1):
            if match:
                correct += 1
                precision.append(correct / rank)

        ranked.append(matches)
        precisions.append(float(np.mean(precision)))

    return ranked, precisions


def test_cosine_identical() -> None:
    assert cosine_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)


def test_cosine_orthogonal() -> None:
    assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == 0.0


def test_cosine_hand_computed() -> None:
    assert cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.70710678)


def test_cosine_zero_vector() -> None:
    with pytest.raises(InvalidInputError, match="zero"):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


def test_cosine_matrix(rng: np.random.Generator) -> None:
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    matrix = similarity_matrix(a, b)
    assert matrix[1, 3] == pytest.approx(cosine_similarity(a[1], b[3]))


def test_evaluate_perfect_retrieval() -> None:
    split = GallerySplit([0, 1], [2, 3], identities=[0, 1, 0, 1], views=[0, 0, 1, 1])
    embeddings = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    report = evaluate(split, embeddings)
    assert report.rank(1) == 1.0
    assert report.mean_ap == 1.0


def test_evaluate_first_correct_ranks_one_and_two() -> None:
    split = GallerySplit([0, 1], [2, 3], identities=[0, 1, 0, 1], views=[0, 0, 1, 1])
    embeddings = np.array([[1.0, 0.0], [1.0, 0.1], [1.0, 0.0], [0.0, 1.0]])
    report = evaluate(split, embeddings)
    assert report.cmc.tolist() == [0.5, 1.0]


def test_evaluate_single_positive_at_rank_two() -> None:
    split = GallerySplit([0], [1, 2, 3], identities=[0, 1, 0, 2], views=[0, 1, 1, 1])
    embeddings = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.5], [0.0, 1.0]])
    report = evaluate(split, embeddings)
    assert report.mean_ap == pytest.approx(0.5)
    assert report.cmc.tolist() == [0.0, 1.0, 1.0]


def test_evaluate_same_view_is_excluded() -> None:
    split = GallerySplit([0], [1, 2], identities=[0, 0, 0], views=[0, 0, 1])
    embeddings = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    report = evaluate(split, embeddings)
    assert report.cmc.tolist() == [1.0]


def test_evaluate_ties_rank_by_gallery_index() -> None:
    split = GallerySplit([0], [1, 2], identities=[0, 1, 0], views=[0, 1, 1])
    embeddings = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    assert evaluate(split, embeddings).cmc.tolist() == [0.0, 1.0]


def test_evaluate_query_without_eligible_match() -> None:
    split = GallerySplit([0, 1], [2, 3], identities=[0, 1, 0, 1], views=[0, 0, 0, 1])
    embeddings = np.eye(4)
    report = evaluate(split, embeddings)
    assert report.excluded_queries == [0]
    assert report.evaluated_queries == [1]
    assert any("excluded" in note for note in report.notes)


def test_evaluate_no_query_evaluable() -> None:
    split = GallerySplit([0], [1], identities=[0, 0], views=[0, 0])
    with pytest.raises(InvalidInputError, match="no query"):
        evaluate(split, np.eye(2))


def test_evaluate_row_count_mismatch() -> None:
    split = GallerySplit([0], [1], identities=[0, 0], views=[0, 1])
    with pytest.raises(InvalidInputError, match="one embedding row"):
        evaluate(split, np.eye(3))


def test_evaluate_scale_invariance(rng: np.random.Generator) -> None:
    identities = np.repeat(np.arange(5), 3)
    views = np.tile(np.arange(3), 5)
    split = build_gallery_split(identities, views, seed=1)
    embeddings = rng.normal(size=(15, 8))
    scaled = embeddings * rng.uniform(0.1, 10.0, size=(15, 1))
    first, second = evaluate(split, embeddings), evaluate(split, scaled)
    np.testing.assert_allclose(first.cmc, second.cmc)
    assert first.mean_ap == pytest.approx(second.mean_ap)


def test_evaluate_matches_brute_force(rng: np.random.Generator) -> None:
    for trial in range(200):
        count = int(rng.integers(2, 21))
        views_per_identity = int(rng.integers(2, 4))
        identities = np.repeat(np.arange(count), views_per_identity)
        views = np.tile(np.arange(views_per_identity), count)
        split = build_gallery_split(identities, views, seed=trial)
        embeddings = rng.normal(size=(len(identities), 6))
        report = evaluate(split, embeddings)

        ranked, precisions = brute_force_retrieval(split, embeddings)
        length = max(len(matches) for matches in ranked)
        for rank in range(1, length + 1):
            expected = np.mean([any(matches[:rank]) for matches in ranked])
            assert report.rank(rank) == expected

        assert report.mean_ap == np.mean(precisions)
        assert np.all(np.diff(report.cmc) >= 0)
        assert report.cmc[-1] == 1.0


def test_gallery_split() -> None:
    identities = [3, 3, 5, 5, 5, 7, 7]
    split = build_gallery_split(identities, [0, 1, 0, 1, 2, 0, 1], seed=4)
    assert sorted(split.identities[split.query].tolist()) == [3, 5, 7]
    assert sorted(split.query + split.gallery) == list(range(7))
    assert build_gallery_split(identities, [0, 1, 0, 1, 2, 0, 1], seed=4).query == split.query


def test_gallery_split_overlap() -> None:
    with pytest.raises(InvalidInputError, match="both"):
        GallerySplit([0], [0, 1], identities=[0, 1], views=[0, 0])


@pytest.fixture
def split() -> GallerySplit:
    return GallerySplit([0, 1], [2, 3], identities=[0, 1, 0, 1], views=[0, 0, 1, 1])


@pytest.fixture
def embeddings() -> np.ndarray:
    return np.array([[1.0, 0.0], [1.0, 0.1], [1.0, 0.0], [0.0, 1.0]])


def test_write_report(split: GallerySplit, embeddings: np.ndarray, tmp_path: Path) -> None:
    path = tmp_path / "report.txt"
    write_report(evaluate(split, embeddings), path, ranks=(1, 3), conditions=["synthetic"])
    lines = path.read_text().splitlines()
    assert "# conditions: synthetic" in lines
    assert "queries evaluated: 2" in lines
    assert "mAP: 0.750000" in lines
    assert lines[-2:] == ["1     0.500000", "3     1.000000"]


def test_write_cmc_csv(split: GallerySplit, embeddings: np.ndarray, tmp_path: Path) -> None:
    path = tmp_path / "cmc.csv"
    write_cmc_csv(evaluate(split, embeddings), path)
    with path.open(newline="") as fp:
        assert list(csv.reader(fp)) == [
            ["rank", "hit_rate"],
            ["1", "0.500000"],
            ["2", "1.000000"],
        ]


def test_export_embeddings(split: GallerySplit, embeddings: np.ndarray, tmp_path: Path) -> None:
    path = tmp_path / "embeddings.npz"
    export_embeddings(path, split, embeddings)
    with np.load(path) as data:
        np.testing.assert_array_equal(data["gallery_embeddings"], embeddings[2:])
        assert data["query_identities"].tolist() == [0, 1]
