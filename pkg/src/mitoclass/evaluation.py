"""
Evaluation: confusion-derived metrics, rank-based ROC AUC, per-domain
breakdowns and cross-fold aggregation.

AMF (label 0) is the positive class throughout: sensitivity is AMF recall and
specificity is NMF recall. Scores are NMF probabilities, so the AMF ranking
score is the reversed NMF score.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from rich.console import Console
from scipy.stats import rankdata

from src.mitoclass.errors import EmptyInput, ManifestError, SingleClass, TooFewFolds
from src.utils import write_json, write_table

logger = logging.getLogger(__name__)

PREDICTION_COLUMNS = ("patch_id", "score", "predicted", "truth", "domain_id")
METRIC_NAMES = ("balanced_accuracy", "sensitivity", "specificity", "roc_auc")

GroupBy = Literal["domain", "tumor_type"]


@dataclass(frozen=True)
class PredictionSet:
    patch_ids: tuple[str, ...]
    scores: np.ndarray
    predicted: np.ndarray
    truth: np.ndarray
    domain_ids: tuple[str, ...]
    tumor_types: Optional[tuple[str, ...]] = None

    def __len__(self) -> int:
        return len(self.patch_ids)

    def take(self, mask: np.ndarray) -> "PredictionSet":
        idx = np.flatnonzero(mask)
        return PredictionSet(
            patch_ids=tuple(self.patch_ids[i] for i in idx),
            scores=self.scores[idx],
            predicted=self.predicted[idx],
            truth=self.truth[idx],
            domain_ids=tuple(self.domain_ids[i] for i in idx),
            tumor_types=(
                None if self.tumor_types is None else tuple(self.tumor_types[i] for i in idx)
            ),
        )

    def groups(self, group_by: GroupBy) -> tuple[str, ...]:
        if group_by == "tumor_type":
            if self.tumor_types is None:
                raise EmptyInput("prediction set carries no tumor types to group by")
            return self.tumor_types
        return self.domain_ids

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "patch_id": list(self.patch_ids),
                "score": self.scores.astype(np.float64),
                "predicted": self.predicted.astype(np.int64),
                "truth": self.truth.astype(np.int64),
                "domain_id": list(self.domain_ids),
            },
            columns=list(PREDICTION_COLUMNS),
        )

    @classmethod
    def concat(cls, parts: Sequence["PredictionSet"]) -> "PredictionSet":
        tumor_types = None
        if all(p.tumor_types is not None for p in parts):
            tumor_types = tuple(t for p in parts for t in p.tumor_types)  # type: ignore[union-attr]
        return cls(
            patch_ids=tuple(pid for p in parts for pid in p.patch_ids),
            scores=np.concatenate([p.scores for p in parts]),
            predicted=np.concatenate([p.predicted for p in parts]),
            truth=np.concatenate([p.truth for p in parts]),
            domain_ids=tuple(d for p in parts for d in p.domain_ids),
            tumor_types=tumor_types,
        )


def write_predictions(
    preds: PredictionSet,
    path: Union[Path, str],
    console: Optional[Console] = None,
) -> Path:
    return write_table(path, preds.to_frame(), console=console)


def read_predictions(path: Union[Path, str]) -> PredictionSet:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"patch_id": str, "domain_id": str})
    except FileNotFoundError:
        raise ManifestError(f"prediction file not found: {path}") from None
    missing = [c for c in PREDICTION_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"{path}: missing columns {missing}")
    return PredictionSet(
        patch_ids=tuple(frame["patch_id"]),
        scores=frame["score"].to_numpy(dtype=np.float64),
        predicted=frame["predicted"].to_numpy(dtype=np.int64),
        truth=frame["truth"].to_numpy(dtype=np.int64),
        domain_ids=tuple(frame["domain_id"]),
    )


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.tp, self.tn, self.fp, self.fn


def confusion(preds: PredictionSet) -> Confusion:
    if len(preds) == 0:
        raise EmptyInput("confusion of an empty prediction set")
    amf_true = preds.truth == 0
    amf_pred = preds.predicted == 0
    return Confusion(
        tp=int(np.sum(amf_true & amf_pred)),
        tn=int(np.sum(~amf_true & ~amf_pred)),
        fp=int(np.sum(~amf_true & amf_pred)),
        fn=int(np.sum(amf_true & ~amf_pred)),
    )


def balanced_accuracy(sens: float, spec: float) -> float:
    return (sens + spec) / 2.0


def roc_auc(scores: Sequence[float], truths: Sequence[int]) -> float:
    """Mann-Whitney AUC with AMF positive; ties earn half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    positive = truths == 0
    n_pos = int(positive.sum())
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"ROC AUC needs both classes (AMF={n_pos}, NMF={n_neg})")
    ranks = rankdata(-scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class GroupMetrics:
    n: int
    confusion: Confusion
    sensitivity: Optional[float]
    specificity: Optional[float]
    balanced_accuracy: Optional[float]
    roc_auc: Optional[float]

    def to_dict(self) -> dict[str, Any]:
        tp, tn, fp, fn = self.confusion.as_tuple()
        return {
            "n": self.n,
            "confusion": {"tp": tp, "tn": tn, "fp": fp, "fn": fn},
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "balanced_accuracy": self.balanced_accuracy,
            "roc_auc": self.roc_auc,
        }


def group_metrics(preds: PredictionSet) -> GroupMetrics:
    conf = confusion(preds)
    sens = conf.tp / (conf.tp + conf.fn) if conf.tp + conf.fn else None
    spec = conf.tn / (conf.tn + conf.fp) if conf.tn + conf.fp else None
    both = sens is not None and spec is not None
    return GroupMetrics(
        n=conf.n,
        confusion=conf,
        sensitivity=sens,
        specificity=spec,
        balanced_accuracy=balanced_accuracy(sens, spec) if both else None,  # type: ignore[arg-type]
        roc_auc=roc_auc(preds.scores, preds.truth) if both else None,
    )


@dataclass(frozen=True)
class MetricsReport:
    overall: GroupMetrics
    per_group: dict[str, GroupMetrics]
    group_by: str = "domain"

    @property
    def n(self) -> int:
        return self.overall.n

    @property
    def balanced_accuracy(self) -> Optional[float]:
        return self.overall.balanced_accuracy

    @property
    def sensitivity(self) -> Optional[float]:
        return self.overall.sensitivity

    @property
    def specificity(self) -> Optional[float]:
        return self.overall.specificity

    @property
    def roc_auc(self) -> Optional[float]:
        return self.overall.roc_auc

    @property
    def per_domain(self) -> dict[str, GroupMetrics]:
        return self.per_group

    @property
    def group_key(self) -> str:
        """JSON key of the per-group map: `per_domain` or `per_tumor_type`."""
        return f"per_{self.group_by}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "overall": self.overall.to_dict(),
            "group_by": self.group_by,
            self.group_key: {k: v.to_dict() for k, v in self.per_group.items()},
            "n": self.n,
        }

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for scope, metrics in [("overall", self.overall), *self.per_group.items()]:
            tp, tn, fp, fn = metrics.confusion.as_tuple()
            rows.append(
                {
                    "scope": scope,
                    "n": metrics.n,
                    "tp": tp,
                    "tn": tn,
                    "fp": fp,
                    "fn": fn,
                    **{name: getattr(metrics, name) for name in METRIC_NAMES},
                }
            )
        return pd.DataFrame(rows)


def evaluate(preds: PredictionSet, group_by: GroupBy = "domain") -> MetricsReport:
    if len(preds) == 0:
        raise EmptyInput("cannot evaluate an empty prediction set")
    groups = np.asarray(preds.groups(group_by))
    per_group = {}
    for key in sorted(set(groups.tolist())):
        metrics = group_metrics(preds.take(groups == key))
        if metrics.balanced_accuracy is None:
            logger.warning(
                "%s '%s' lacks one class; its class-dependent metrics are absent", group_by, key
            )
        per_group[key] = metrics
    return MetricsReport(overall=group_metrics(preds), per_group=per_group, group_by=group_by)


@dataclass(frozen=True)
class FoldAggregate:
    mean: dict[str, Optional[float]]
    std: dict[str, Optional[float]]
    k: int
    per_fold: dict[str, list[Optional[float]]] = field(default_factory=dict)

    def formatted(self) -> dict[str, str]:
        return {name: format_mean_std(self.mean[name], self.std[name]) for name in self.mean}

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "mean": self.mean,
            "std": self.std,
            "formatted": self.formatted(),
            "per_fold": self.per_fold,
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"metric": name, "mean": self.mean[name], "std": self.std[name], "formatted": text}
                for name, text in self.formatted().items()
            ]
        )


def format_mean_std(mean: Optional[float], std: Optional[float]) -> str:
    if mean is None:
        return "n/a"
    if std is None:
        return f"{mean:.4f}"
    return f"{mean:.4f} (±{std:.4f})"


def aggregate_folds(reports: Sequence[MetricsReport]) -> FoldAggregate:
    if len(reports) < 2:
        raise TooFewFolds(f"aggregation needs at least 2 fold reports, got {len(reports)}")
    mean: dict[str, Optional[float]] = {}
    std: dict[str, Optional[float]] = {}
    per_fold: dict[str, list[Optional[float]]] = {}
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in reports]
        per_fold[name] = values
        present = np.array([v for v in values if v is not None], dtype=np.float64)
        mean[name] = float(present.mean()) if present.size else None
        std[name] = float(present.std(ddof=1)) if present.size >= 2 else None
    return FoldAggregate(mean=mean, std=std, k=len(reports), per_fold=per_fold)


def write_report(
    report: MetricsReport,
    out_dir: Union[Path, str],
    stem: str = "metrics",
    console: Optional[Console] = None,
) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    json_path = write_json(out_dir / f"{stem}.json", report.to_dict(), console=console)
    csv_path = write_table(out_dir / f"{stem}.csv", report.to_frame(), console=console)
    return json_path, csv_path


def write_aggregate(
    aggregate: FoldAggregate,
    out_dir: Union[Path, str],
    console: Optional[Console] = None,
) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    json_path = write_json(out_dir / "aggregate.json", aggregate.to_dict(), console=console)
    csv_path = write_table(out_dir / "aggregate.csv", aggregate.to_frame(), console=console)
    return json_path, csv_path


def report_from_dict(data: dict[str, Any]) -> MetricsReport:
    def parse(block: dict[str, Any]) -> GroupMetrics:
        c = block["confusion"]
        return GroupMetrics(
            n=block["n"],
            confusion=Confusion(c["tp"], c["tn"], c["fp"], c["fn"]),
            sensitivity=block["sensitivity"],
            specificity=block["specificity"],
            balanced_accuracy=block["balanced_accuracy"],
            roc_auc=block["roc_auc"],
        )

    group_by = data.get("group_by", "domain")
    return MetricsReport(
        overall=parse(data["overall"]),
        per_group={k: parse(v) for k, v in data.get(f"per_{group_by}", {}).items()},
        group_by=group_by,
    )


def validation_balanced_accuracy(truth: Iterable[int], predicted: Iterable[int]) -> float:
    """Mean recall over the classes present in `truth` (both classes: balanced accuracy)."""
    truth = np.asarray(list(truth), dtype=np.int64)
    predicted = np.asarray(list(predicted), dtype=np.int64)
    if truth.size == 0:
        raise EmptyInput("no validation predictions")
    recalls = [
        float(np.mean(predicted[truth == label] == label))
        for label in (0, 1)
        if np.any(truth == label)
    ]
    value = float(np.mean(recalls))
    return value if math.isfinite(value) else 0.0
