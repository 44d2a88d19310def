"""
Seeded random search over focal alpha, focal gamma, learning rate and dropout.

Each trial trains every fold with its sampled hyperparameters and scores the
mean validation balanced accuracy. Trial t samples from stream (seed, "trial", t)
so trials can run in any order; the table is always collected by trial id.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from rich.console import Console

from src.mitoclass.config import ArchConfig, AugPolicy, SearchSpace, TrainConfig, validated
from src.mitoclass.dataset import Dataset
from src.mitoclass.errors import ManifestError
from src.mitoclass.rng import stream
from src.mitoclass.splits import FoldAssignment
from src.mitoclass.trainer import train
from src.utils import write_json, write_table

logger = logging.getLogger(__name__)

TrialStatus = Literal["complete", "failed"]


@dataclass(frozen=True)
class HyperParams:
    alpha: float
    gamma: float
    lr: float
    dropout: float


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    value = rng.uniform(lo, hi)
    return lo if lo == hi else float(min(max(value, lo), hi))


def sample_config(space: SearchSpace, rng: np.random.Generator) -> HyperParams:
    """Independent draws in the order alpha, gamma, lr, dropout; lr is log-uniform."""
    alpha = _uniform(rng, space.alpha)
    gamma = _uniform(rng, space.gamma)
    lo, hi = space.lr
    lr = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    lr = lo if lo == hi else min(max(lr, lo), hi)
    dropout = _uniform(rng, space.dropout)
    return HyperParams(alpha=alpha, gamma=gamma, lr=lr, dropout=dropout)


@dataclass(frozen=True)
class Trial:
    trial_id: int
    params: HyperParams
    fold_scores: tuple[float, ...] = ()
    objective: Optional[float] = None
    status: TrialStatus = "complete"
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "complete"


def trial_configs(
    hp: HyperParams,
    arch: ArchConfig,
    base_config: TrainConfig,
    max_epochs: Optional[int] = None,
) -> tuple[ArchConfig, TrainConfig]:
    arch_data = arch.model_dump(mode="json")
    arch_data["dropout"] = hp.dropout
    train_data = base_config.model_dump(mode="json")
    train_data["lr0"] = hp.lr
    train_data["focal"] = {"alpha": hp.alpha, "gamma": hp.gamma}
    if max_epochs is not None:
        train_data["max_epochs"] = max_epochs
    return validated(ArchConfig, arch_data), validated(TrainConfig, train_data)


TrainFn = Callable[..., Any]


def evaluate_trial(
    trial_id: int,
    hp: HyperParams,
    dataset: Dataset,
    assignment: FoldAssignment,
    arch: ArchConfig,
    base_config: TrainConfig,
    policy: AugPolicy,
    max_epochs: Optional[int] = None,
    train_fn: TrainFn = train,
) -> Trial:
    """Train all folds; any failure marks the trial failed instead of raising."""
    try:
        trial_arch, trial_config = trial_configs(hp, arch, base_config, max_epochs)
        results = [
            train_fn(dataset, assignment, fold, trial_arch, trial_config, policy)
            for fold in range(assignment.k)
        ]
        scores = tuple(float(r.best_val_balanced_accuracy) for r in results)
    except Exception as e:
        logger.warning("Trial %d failed: %s", trial_id, e)
        return Trial(trial_id=trial_id, params=hp, status="failed", error=str(e))
    objective = float(np.mean(scores))
    logger.info("Trial %d: mean balanced accuracy %.4f", trial_id, objective)
    return Trial(trial_id=trial_id, params=hp, fold_scores=scores, objective=objective)


def select_best(trials: Sequence[Trial]) -> Optional[Trial]:
    """Highest objective among complete trials; ties go to the lowest trial id."""
    best: Optional[Trial] = None
    for trial in sorted(trials, key=lambda t: t.trial_id):
        if not trial.ok:
            continue
        if best is None or trial.objective > best.objective:  # type: ignore[operator]
            best = trial
    return best


def run_search(
    dataset: Dataset,
    assignment: FoldAssignment,
    arch: ArchConfig,
    base_config: TrainConfig,
    policy: AugPolicy,
    space: SearchSpace,
    n_trials: int,
    seed: int,
    max_epochs: Optional[int] = None,
    workers: int = 1,
    candidates: Optional[Sequence[HyperParams]] = None,
    callback: Optional[Callable[[Trial], None]] = None,
    train_fn: TrainFn = train,
) -> tuple[Optional[Trial], list[Trial]]:
    """`candidates` replaces sampling with an explicit list of points (one trial each)."""
    if candidates is not None:
        points = list(candidates)
    else:
        points = [sample_config(space, stream(seed, "trial", t)) for t in range(n_trials)]

    def run(t: int) -> Trial:
        trial = evaluate_trial(
            t, points[t], dataset, assignment, arch, base_config, policy, max_epochs, train_fn
        )
        if callback is not None:
            callback(trial)
        return trial

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(run, range(len(points))))
    else:
        trials = [run(t) for t in range(len(points))]
    return select_best(trials), trials


def trials_frame(trials: Sequence[Trial], k: int) -> pd.DataFrame:
    rows = []
    for trial in sorted(trials, key=lambda t: t.trial_id):
        row: dict[str, Any] = {"trial_id": trial.trial_id, **asdict(trial.params)}
        for fold in range(k):
            row[f"ba_fold{fold}"] = trial.fold_scores[fold] if trial.ok else None
        row["mean_ba"] = trial.objective
        row["status"] = trial.status
        row["error"] = trial.error
        rows.append(row)
    return pd.DataFrame(rows)


def write_search(
    best: Optional[Trial],
    trials: Sequence[Trial],
    out_dir: Union[Path, str],
    k: int,
    console: Optional[Console] = None,
) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    trials_path = write_table(out_dir / "trials.csv", trials_frame(trials, k), console=console)
    best_data = None
    if best is not None:
        best_data = {
            "trial_id": best.trial_id,
            "objective": best.objective,
            "fold_scores": list(best.fold_scores),
            **asdict(best.params),
        }
    best_path = write_json(out_dir / "best.json", best_data, console=console)
    return trials_path, best_path


def read_trials(path: Union[Path, str]) -> list[Trial]:
    path = Path(path)
    try:
        frame = pd.read_csv(path, keep_default_na=False)
    except FileNotFoundError:
        raise ManifestError(f"trial table not found: {path}") from None
    fold_columns = sorted(
        (c for c in frame.columns if c.startswith("ba_fold")), key=lambda c: int(c[7:])
    )
    trials = []
    for _, row in frame.iterrows():
        ok = row["status"] == "complete"
        trials.append(
            Trial(
                trial_id=int(row["trial_id"]),
                params=HyperParams(
                    alpha=float(row["alpha"]),
                    gamma=float(row["gamma"]),
                    lr=float(row["lr"]),
                    dropout=float(row["dropout"]),
                ),
                fold_scores=tuple(float(row[c]) for c in fold_columns) if ok else (),
                objective=float(row["mean_ba"]) if ok else None,
                status="complete" if ok else "failed",
                error=str(row["error"]),
            )
        )
    return trials
