"""Ranking metrics and detection-report serialization."""

import pytest

from euphdet.corpus import Corpus, Sentence
from euphdet.datasets import GoldLabels
from euphdet.errors import InputError, InvariantError
from euphdet.evaluation import (
    DetectionReport,
    evaluate_detections,
    precision_at_k,
    rank_summary,
    recall_at_k,
)
from euphdet.index import InvertedIndex


def test_precision_is_per_mille():
    assert precision_at_k(0, 0) == 0.0
    assert precision_at_k(7, 7) == 1000.0
    assert precision_at_k(1, 200) == 5.0
    with pytest.raises(InvariantError):
        precision_at_k(-1, 5)
    with pytest.raises(InvariantError):
        precision_at_k(6, 5)


def test_recall_bounds():
    assert recall_at_k(0, 10) == 0.0
    assert recall_at_k(10, 10) == 1.0
    with pytest.raises(InvariantError):
        recall_at_k(1, 0)
    with pytest.raises(InvariantError):
        recall_at_k(11, 10)


@pytest.fixture
def world():
    corpus = Corpus([
        Sentence(0, ("x", "y", "x"), "dedup"),
        Sentence(1, ("y", "z"), "dedup"),
        Sentence(2, ("x", "q"), "dedup"),
    ])
    index = InvertedIndex.build(corpus)
    # two of the three x occurrences are planted, the z one is not
    gold = GoldLabels({"x": [(0, 0), (2, 0)]}, {"x": "seed"})
    ranking = [("x", -1.0, 3), ("y", -2.0, 2), ("z", -3.0, 1)]
    return index, gold, ranking


def test_evaluate_detections_counts_occurrences(world):
    index, gold, ranking = world
    rows = evaluate_detections(ranking, gold, index, ks=[1, 2, 9])
    assert [r["k"] for r in rows] == [1, 2, 9]
    assert rows[0] == {"k": 1, "k_effective": 1, "n_flagged": 3,
                       "n_impromptu": 2,
                       "precision_permille": pytest.approx(2000 / 3),
                       "recall": 1.0}
    assert rows[1]["n_flagged"] == 5
    assert rows[1]["recall"] == 1.0
    # k beyond the ranking saturates and records it
    assert rows[2]["k_effective"] == 3
    assert rows[2]["n_flagged"] == 6


def test_evaluate_detections_dedupes_and_validates(world):
    index, gold, ranking = world
    rows = evaluate_detections(ranking, gold, index, ks=[2, 2, 1])
    assert [r["k"] for r in rows] == [1, 2]
    with pytest.raises(InputError):
        evaluate_detections(ranking, gold, index, ks=[0])


def test_rank_summary_five_numbers():
    s = rank_summary([4, 1, 2, 3])
    assert s == {"min": 1.0, "q1": 1.75, "median": 2.5, "q3": 3.25,
                 "max": 4.0, "mean": 2.5}
    flat = rank_summary([7])
    assert all(flat[k] == 7.0 for k in ("min", "q1", "median", "q3", "max", "mean"))
    with pytest.raises(InputError):
        rank_summary([])
    with pytest.raises(InvariantError):
        rank_summary([0, 1])


def example_report():
    return DetectionReport(
        seeds=["s1"],
        ranking=[("a", -0.5, 4), ("b", -1.5, 2)],
        metrics=[{"k": 1, "k_effective": 1, "n_flagged": 4, "n_impromptu": 2,
                  "precision_permille": 500.0, "recall": 1.0}],
        gold_ranks={"a": 1},
        rank_stats={"min": 1.0, "q1": 1.0, "median": 1.0, "q3": 1.0,
                    "max": 1.0, "mean": 1.0},
        meta={"rounds": 1})


def test_report_round_trip(tmp_path):
    report = example_report()
    assert DetectionReport.from_dict(report.to_dict()) == report
    p = tmp_path / "report.json"
    report.save_json(p)
    assert DetectionReport.load_json(p) == report
    with pytest.raises(InputError):
        DetectionReport.load_json(tmp_path / "absent.json")


def test_report_json_bytes_are_stable(tmp_path):
    report = example_report()
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    report.save_json(a)
    report.save_json(b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes().endswith(b"\n")


def test_report_csv_format(tmp_path):
    p = tmp_path / "report.csv"
    example_report().save_csv(p)
    assert p.read_text() == (
        "k,n_flagged,n_impromptu,precision_permille,recall\n"
        "1,4,2,500.000000,1.000000\n")
