import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.mitoclass.errors import EmptyInput, ManifestError, SingleClass, TooFewFolds
from src.mitoclass.evaluation import (
    Confusion,
    MetricsReport,
    PredictionSet,
    aggregate_folds,
    balanced_accuracy,
    confusion,
    evaluate,
    format_mean_std,
    read_predictions,
    report_from_dict,
    roc_auc,
    validation_balanced_accuracy,
    write_aggregate,
    write_predictions,
    write_report,
)


def _preds(truth, predicted, scores=None, domains=None) -> PredictionSet:
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if scores is None:
        scores = np.where(predicted == 1, 0.8, 0.2)
    n = len(truth)
    return PredictionSet(
        patch_ids=tuple(f"p{i}" for i in range(n)),
        scores=np.asarray(scores, dtype=np.float64),
        predicted=predicted,
        truth=truth,
        domain_ids=tuple(domains) if domains is not None else ("d1",) * n,
    )


def _brute_auc(scores, truths) -> float:
    pos = [s for s, t in zip(scores, truths) if t == 0]
    neg = [s for s, t in zip(scores, truths) if t == 1]
    credit = sum(1.0 if p < q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return credit / (len(pos) * len(neg))


def _domain_one_fixture() -> PredictionSet:
    # 5 AMF all caught; 25 of 32 NMF correct
    truth = [0] * 5 + [1] * 32
    predicted = [0] * 5 + [1] * 25 + [0] * 7
    return _preds(truth, predicted)


def test_confusion_examples():
    assert confusion(_preds([0, 0, 1, 1], [0, 0, 1, 1])).as_tuple() == (2, 2, 0, 0)
    assert confusion(_preds([0, 1, 1, 1], [1, 1, 1, 1])).as_tuple() == (0, 3, 0, 1)
    with pytest.raises(EmptyInput):
        confusion(_preds([], []))


def test_confusion_addition():
    assert Confusion(1, 2, 3, 4) + Confusion(1, 1, 1, 1) == Confusion(2, 3, 4, 5)


@pytest.mark.parametrize(
    "sens, spec, expected",
    [(1.0, 0.7813, 0.8906), (0.9655, 0.7273, 0.8463), (0.5, 0.5, 0.5)],
)
def test_balanced_accuracy(sens, spec, expected):
    assert balanced_accuracy(sens, spec) == pytest.approx(expected, abs=1e-4)


def test_auc_extremes():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    with pytest.raises(SingleClass):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_with_tie_matches_pair_count():
    scores = [0.1, 0.4, 0.35, 0.4, 0.8, 0.7]
    truths = [0, 0, 1, 1, 1, 0]
    assert roc_auc(scores, truths) == _brute_auc(scores, truths)


def test_auc_matches_pair_count_on_random_sets():
    rng = np.random.default_rng(8)
    for _ in range(25):
        n = int(rng.integers(4, 40))
        truths = np.concatenate([[0, 1], rng.integers(0, 2, n - 2)])
        scores = np.round(rng.random(n), 1)
        assert roc_auc(scores, truths) == pytest.approx(_brute_auc(scores, truths), abs=1e-12)


def test_auc_rank_invariance_and_complement():
    rng = np.random.default_rng(2)
    scores = rng.random(50)
    truths = np.concatenate([[0, 1], rng.integers(0, 2, 48)])
    auc = roc_auc(scores, truths)
    assert roc_auc(scores**3, truths) == pytest.approx(auc, abs=1e-12)
    assert roc_auc(scores, 1 - truths) == pytest.approx(1.0 - auc, abs=1e-12)


def test_domain_one_proportions():
    report = evaluate(_domain_one_fixture())
    assert report.sensitivity == 1.0
    assert report.balanced_accuracy == pytest.approx(0.8906, abs=5e-4)
    assert report.overall.confusion.as_tuple() == (5, 25, 7, 0)
    assert list(report.per_domain) == ["d1"]
    assert report.per_domain["d1"] == report.overall


def test_report_is_order_invariant():
    preds = _domain_one_fixture()
    perm = np.random.default_rng(0).permutation(len(preds))
    shuffled = PredictionSet(
        patch_ids=tuple(preds.patch_ids[i] for i in perm),
        scores=preds.scores[perm],
        predicted=preds.predicted[perm],
        truth=preds.truth[perm],
        domain_ids=tuple(preds.domain_ids[i] for i in perm),
    )
    assert evaluate(shuffled).to_dict() == evaluate(preds).to_dict()


def test_per_domain_confusions_sum_to_overall():
    rng = np.random.default_rng(4)
    truth = np.concatenate([[0, 1, 0, 1], rng.integers(0, 2, 36)])
    predicted = rng.integers(0, 2, 40)
    domains = [f"d{i % 3}" for i in range(40)]
    report = evaluate(_preds(truth, predicted, rng.random(40), domains))
    total = Confusion(0, 0, 0, 0)
    for metrics in report.per_domain.values():
        total = total + metrics.confusion
    assert total == report.overall.confusion
    assert sum(m.n for m in report.per_domain.values()) == report.n


def test_single_class_group_has_absent_metrics():
    preds = _preds([0, 1, 1, 1], [0, 1, 1, 0], domains=["a", "a", "b", "b"])
    report = evaluate(preds)
    b = report.per_domain["b"]
    assert b.sensitivity is None and b.balanced_accuracy is None and b.roc_auc is None
    assert b.specificity == 0.5
    assert report.per_domain["a"].balanced_accuracy == 1.0


def test_group_by_tumor_type_needs_tumor_types():
    with pytest.raises(EmptyInput):
        evaluate(_preds([0, 1], [0, 1]), group_by="tumor_type")


def test_tumor_type_report_uses_its_own_key():
    preds = replace(_preds([0, 1, 0, 1], [0, 1, 1, 1]), tumor_types=("x", "x", "y", "y"))
    report = evaluate(preds, group_by="tumor_type")
    data = report.to_dict()
    assert list(data["per_tumor_type"]) == ["x", "y"]
    assert "per_domain" not in data
    assert report_from_dict(data) == report


def test_aggregate_folds():
    reports = []
    for ba in (0.86, 0.87, 0.88, 0.87, 0.88):
        report = evaluate(_domain_one_fixture())
        overall = replace(report.overall, balanced_accuracy=ba)
        reports.append(MetricsReport(overall=overall, per_group={}))
    agg = aggregate_folds(reports)
    assert agg.mean["balanced_accuracy"] == pytest.approx(0.8720, abs=1e-4)
    assert agg.std["balanced_accuracy"] == pytest.approx(0.0084, abs=1e-4)
    assert agg.std["sensitivity"] == 0.0
    assert agg.formatted()["balanced_accuracy"] == "0.8720 (±0.0084)"
    with pytest.raises(TooFewFolds):
        aggregate_folds(reports[:1])


def test_format_mean_std():
    assert format_mean_std(None, None) == "n/a"
    assert format_mean_std(0.5, None) == "0.5000"


def test_validation_balanced_accuracy():
    assert validation_balanced_accuracy([0, 0, 1, 1], [0, 1, 1, 1]) == 0.75
    assert validation_balanced_accuracy([1, 1], [1, 0]) == 0.5
    with pytest.raises(EmptyInput):
        validation_balanced_accuracy([], [])


def test_predictions_roundtrip(tmp_path: Path):
    preds = _preds([0, 1, 1], [0, 1, 0], scores=[0.1, 0.9, 0.3], domains=["a", "b", "a"])
    path = write_predictions(preds, tmp_path / "predictions.csv")
    back = read_predictions(path)
    assert back.patch_ids == preds.patch_ids
    assert np.array_equal(back.scores, preds.scores)
    assert np.array_equal(back.truth, preds.truth)
    assert back.domain_ids == preds.domain_ids


def test_read_predictions_errors(tmp_path: Path):
    with pytest.raises(ManifestError):
        read_predictions(tmp_path / "missing.csv")
    (tmp_path / "bad.csv").write_text("patch_id,score\np0,0.5\n")
    with pytest.raises(ManifestError):
        read_predictions(tmp_path / "bad.csv")


def test_report_files_roundtrip(tmp_path: Path):
    report = evaluate(_domain_one_fixture())
    json_path, csv_path = write_report(report, tmp_path)
    assert json_path.name == "metrics.json" and csv_path.exists()
    data = json.loads(json_path.read_text())
    assert list(data["per_domain"]) == ["d1"]
    assert "per_group" not in data
    assert report_from_dict(data) == report

    agg = aggregate_folds([report, report])
    json_path, csv_path = write_aggregate(agg, tmp_path)
    assert json.loads(json_path.read_text())["std"]["balanced_accuracy"] == 0.0
    assert csv_path.name == "aggregate.csv"
