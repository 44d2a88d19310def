"""
Splits: stratified k-fold assignment over consensus class x hardness.

Within each of the four strata, ids are shuffled by a seeded stream and dealt
round-robin to folds. The deal continues across strata (stratum s starts at the
fold after the last one stratum s-1 used), so per-fold stratum counts differ by
at most one and per-fold totals differ by at most one.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from rich.console import Console

from src.mitoclass.dataset import Dataset, four_class_label
from src.mitoclass.errors import DuplicateId, FoldOutOfRange, InvalidK, ManifestError
from src.mitoclass.rng import stream
from src.utils import write_table

N_STRATA = 4

_HEADER = re.compile(r"^#\s*k=(\d+)\s+seed=(\d+)\s*$")


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    seed: int
    fold_of: dict[str, int]

    @property
    def ids(self) -> list[str]:
        return list(self.fold_of)

    def members(self, fold: int) -> list[str]:
        return [pid for pid, f in self.fold_of.items() if f == fold]


def stratum_of(consensus: int, hardness: int) -> int:
    return four_class_label(consensus, hardness)


def stratified_kfold(dataset: Dataset, k: int, seed: int) -> FoldAssignment:
    if len(dataset) == 0:
        raise InvalidK("cannot split an empty dataset")
    if k < 2 or k > len(dataset):
        raise InvalidK(f"k must lie in [2, {len(dataset)}], got {k}")

    strata: list[list[str]] = [[] for _ in range(N_STRATA)]
    for record in dataset:
        strata[stratum_of(record.consensus, record.hardness)].append(record.patch_id)

    dealt: dict[str, int] = {}
    start = 0
    for s, ids in enumerate(strata):
        order = stream(seed, "stratum", s).permutation(len(ids))
        for j, pos in enumerate(order):
            dealt[ids[pos]] = (start + j) % k
        start = (start + len(ids)) % k

    return FoldAssignment(k=k, seed=seed, fold_of={pid: dealt[pid] for pid in dataset.ids})


def fold_slices(assignment: FoldAssignment, fold: int) -> tuple[list[str], list[str]]:
    if not 0 <= fold < assignment.k:
        raise FoldOutOfRange(f"fold {fold} is outside [0, {assignment.k})")
    train_ids = [pid for pid, f in assignment.fold_of.items() if f != fold]
    val_ids = [pid for pid, f in assignment.fold_of.items() if f == fold]
    return train_ids, val_ids


def stratum_counts(assignment: FoldAssignment, dataset: Dataset) -> np.ndarray:
    """k x 4 matrix of per-fold stratum counts."""
    counts = np.zeros((assignment.k, N_STRATA), dtype=np.int64)
    for record in dataset:
        stratum = stratum_of(record.consensus, record.hardness)
        counts[assignment.fold_of[record.patch_id], stratum] += 1
    return counts


def write_folds(
    assignment: FoldAssignment,
    path: Union[Path, str],
    console: Optional[Console] = None,
) -> Path:
    frame = pd.DataFrame(
        {"patch_id": list(assignment.fold_of), "fold": list(assignment.fold_of.values())}
    )
    comment = f"k={assignment.k} seed={assignment.seed}"
    return write_table(path, frame, console=console, comment=comment)


def read_folds(path: Union[Path, str]) -> FoldAssignment:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ManifestError(f"fold file not found: {path}") from None
    first, _, body = text.partition("\n")
    match = _HEADER.match(first)
    if match is None:
        raise ManifestError(f"{path}: first line must read '# k=<k> seed=<seed>'", row=0)
    k, seed = int(match.group(1)), int(match.group(2))
    frame = pd.read_csv(io.StringIO(body), dtype={"patch_id": str, "fold": np.int64})
    fold_of: dict[str, int] = {}
    for row, (pid, fold) in enumerate(zip(frame["patch_id"], frame["fold"]), start=1):
        if pid in fold_of:
            raise DuplicateId(
                f"{path}: patch_id '{pid}' listed twice", row=row, column="patch_id"
            )
        fold_of[pid] = int(fold)
    bad = [pid for pid, f in fold_of.items() if not 0 <= f < k]
    if bad:
        raise FoldOutOfRange(f"{path}: fold index outside [0, {k}) for '{bad[0]}'")
    return FoldAssignment(k=k, seed=seed, fold_of=fold_of)
