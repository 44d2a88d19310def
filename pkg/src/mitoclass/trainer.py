"""
Trainer: AdamW with a per-epoch cosine schedule, seeded epoch loop over
augmented batches, early stopping on validation balanced accuracy and
best-checkpoint retention.

Epochs are numbered from 1. Epoch e trains at cosine_lr(e - 1, ...), so the
first epoch runs at lr0.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.mitoclass.checkpoint import save_checkpoint
from src.mitoclass.config import ArchConfig, AugPolicy, TrainConfig
from src.mitoclass.dataset import Dataset, PatchRecord
from src.mitoclass.errors import EmptyInput, InvalidConfig, ShapeMismatch
from src.mitoclass.evaluation import (
    PredictionSet,
    evaluate,
    validation_balanced_accuracy,
    write_predictions,
    write_report,
)
from src.mitoclass.losses import (
    LossCombination,
    combined_loss,
    focal_binary,
    focal_binary_grad,
    focal_multiclass,
    focal_multiclass_logit_grad,
    inverse_frequency_alpha,
)
from src.mitoclass.netcore import (
    HeadGrads,
    HeadOutputs,
    ModelParams,
    ParamGrads,
    backward,
    forward,
    init_params,
    predict,
)
from src.mitoclass.pixelpipe import HedStats, apply_policy, hed_stats
from src.mitoclass.rng import derive_seed, stream
from src.mitoclass.splits import FoldAssignment, fold_slices
from src.utils import write_json, write_table

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_balanced_accuracy", "lr")


def cosine_lr(epoch: int, config: TrainConfig, total_epochs: int) -> float:
    if total_epochs < 1 or not 0 <= epoch <= total_epochs:
        raise InvalidConfig(f"epoch {epoch} is outside the schedule [0, {total_epochs}]")
    if epoch == 0:
        return config.lr0
    if epoch == total_epochs:
        return config.eta_min
    span = config.lr0 - config.eta_min
    return config.eta_min + 0.5 * span * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam_state(params: ModelParams) -> AdamState:
    return AdamState(
        m={k: np.zeros(t.shape, dtype=np.float64) for k, t in params.tensors.items()},
        v={k: np.zeros(t.shape, dtype=np.float64) for k, t in params.tensors.items()},
    )


def adamw_step(
    params: ModelParams,
    grads: ParamGrads,
    state: AdamState,
    config: TrainConfig,
    lr: Optional[float] = None,
) -> tuple[ModelParams, AdamState]:
    """One decoupled-weight-decay Adam update; moments are kept in float64."""
    lr = config.lr0 if lr is None else lr
    if set(grads) != set(params.tensors) or set(state.m) != set(params.tensors):
        raise ShapeMismatch("parameter, gradient and optimizer-state names differ")

    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    tensors, m_new, v_new = {}, {}, {}
    for name, theta in params.tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape or state.m[name].shape != theta.shape:
            raise ShapeMismatch(
                f"'{name}': param {theta.shape}, grad {g.shape}, state {state.m[name].shape}"
            )
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        theta64 = theta.astype(np.float64)
        update = m_hat / (np.sqrt(v_hat) + config.eps_adam) + config.weight_decay * theta64
        tensors[name] = (theta64 - lr * update).astype(theta.dtype)
        m_new[name] = m
        v_new[name] = v
    return params.replaced(tensors), AdamState(m=m_new, v=v_new, step=t)


@dataclass(frozen=True)
class BatchTargets:
    experts: np.ndarray  # N x 3 expert labels
    hardness: np.ndarray  # hardness label, or the four-class index

    @classmethod
    def from_records(cls, records: Sequence[PatchRecord], arch: ArchConfig) -> "BatchTargets":
        experts = np.array([[int(e) for e in r.expert_labels] for r in records], dtype=np.int64)
        if arch.hardness_head_mode == "four_class":
            hardness = np.array([r.four_class for r in records], dtype=np.int64)
        else:
            hardness = np.array([int(r.hardness) for r in records], dtype=np.int64)
        return cls(experts=experts, hardness=hardness)


@dataclass(frozen=True)
class BatchLoss:
    total: float
    expert_losses: tuple[float, ...]
    hardness_loss: float
    grads: HeadGrads


def batch_loss(
    outputs: HeadOutputs,
    targets: BatchTargets,
    arch: ArchConfig,
    config: TrainConfig,
    alpha_vec: Optional[np.ndarray] = None,
) -> BatchLoss:
    """Combined focal loss of a batch and its gradient w.r.t. the head logits."""
    n = outputs.batch_size
    theta = config.theta
    n_heads = arch.n_expert_heads

    p = outputs.expert_probs.astype(np.float64)
    expert_losses = tuple(
        float(np.mean(focal_binary(p[:, i], targets.experts[:, i], config.focal)))
        for i in range(n_heads)
    )
    d_p = focal_binary_grad(p, targets.experts, config.focal)
    d_expert = (theta / n_heads / n) * d_p * p * (1.0 - p)

    q = outputs.hardness_probs.astype(np.float64)
    if arch.hardness_head_mode == "four_class":
        if alpha_vec is None:
            alpha_vec = np.ones(arch.hardness_width)
        hardness_loss = float(
            np.mean(focal_multiclass(q, targets.hardness, alpha_vec, config.focal.gamma))
        )
        d_hard = ((1.0 - theta) / n) * focal_multiclass_logit_grad(
            q, targets.hardness, alpha_vec, config.focal.gamma
        )
    else:
        q1 = q[:, 0]
        hardness_loss = float(np.mean(focal_binary(q1, targets.hardness, config.focal)))
        d_q = focal_binary_grad(q1, targets.hardness, config.focal)
        d_hard = (((1.0 - theta) / n) * d_q * q1 * (1.0 - q1))[:, None]

    total = combined_loss(expert_losses, hardness_loss, LossCombination(theta))
    return BatchLoss(
        total=total,
        expert_losses=expert_losses,
        hardness_loss=hardness_loss,
        grads=HeadGrads(expert=d_expert, hardness=d_hard),
    )


def prepare_batch(
    records: Sequence[PatchRecord],
    policy: AugPolicy,
    arch: ArchConfig,
    seed: int,
    epoch: int,
    hed: Optional[HedStats] = None,
    workers: int = 1,
) -> np.ndarray:
    """Augmented N x H x W x C batch; each patch draws from stream (seed, patch_id, epoch)."""

    def one(record: PatchRecord) -> np.ndarray:
        return apply_policy(
            record, policy, arch.input_mode, derive_seed(seed, record.patch_id, epoch), hed
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tensors = list(pool.map(one, records))
    else:
        tensors = [one(r) for r in records]
    return np.stack(tensors).astype(arch.dtype)


def run_epoch(
    params: ModelParams,
    state: AdamState,
    train_set: Dataset,
    policy: AugPolicy,
    config: TrainConfig,
    epoch: int,
    hed: Optional[HedStats] = None,
    alpha_vec: Optional[np.ndarray] = None,
    workers: int = 1,
) -> tuple[ModelParams, AdamState, float]:
    if len(train_set) == 0:
        raise EmptyInput("training slice is empty")
    arch = params.arch
    lr = cosine_lr(epoch - 1, config, config.max_epochs)
    order = stream(config.seed, "shuffle", epoch).permutation(len(train_set))

    losses = []
    for b, start in enumerate(range(0, len(order), config.batch_size)):
        records = [train_set[int(i)] for i in order[start : start + config.batch_size]]
        x = prepare_batch(records, policy, arch, config.seed, epoch, hed, workers)
        outputs, cache = forward(
            params, x, train_mode=True, dropout_seed=derive_seed(config.seed, "dropout", epoch, b)
        )
        targets = BatchTargets.from_records(records, arch)
        loss = batch_loss(outputs, targets, arch, config, alpha_vec)
        grads = backward(params, cache, loss.grads)
        params, state = adamw_step(params, grads, state, config, lr)
        losses.append(loss.total)
        logger.debug("epoch %d batch %d: loss=%.6f", epoch, b, loss.total)
    return params, state, float(np.mean(losses))


def evaluate_split(
    params: ModelParams,
    records: Dataset,
    policy: AugPolicy,
    hed: Optional[HedStats] = None,
    batch_size: int = 32,
) -> PredictionSet:
    """Predictions with augmentation disabled, in `records` order."""
    if len(records) == 0:
        raise EmptyInput("no records to evaluate")
    arch = params.arch
    plain = policy.disabled()
    scores, classes = [], []
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in range(start, min(start + batch_size, len(records)))]
        x = prepare_batch(chunk, plain, arch, 0, 0, hed)
        outputs, _ = forward(params, x, train_mode=False)
        preds = predict(outputs, arch.aggregation, arch.hardness_head_mode)
        scores.append(preds.scores)
        classes.append(preds.classes)
    return PredictionSet(
        patch_ids=tuple(records.ids),
        scores=np.concatenate(scores),
        predicted=np.concatenate(classes),
        truth=records.consensus(),
        domain_ids=tuple(r.domain.domain_id for r in records),
        tumor_types=tuple(r.domain.tumor_type for r in records),
    )


@dataclass
class EarlyStopper:
    """Tracks the best epoch; only a strict improvement moves it."""

    patience: int
    best_epoch: int = 0
    best_value: float = -math.inf

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch > self.patience


def early_stopping_trace(
    metrics: Sequence[float],
    patience: int,
    max_epochs: int,
) -> tuple[int, int]:
    """(epochs_run, best_epoch) for a scripted per-epoch metric sequence."""
    stopper = EarlyStopper(patience)
    epochs_run = 0
    for epoch, value in enumerate(metrics[:max_epochs], start=1):
        epochs_run = epoch
        stopper.update(epoch, value)
        if stopper.should_stop(epoch):
            break
    return epochs_run, stopper.best_epoch


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_balanced_accuracy: float
    lr: float


@dataclass
class TrainResult:
    best_epoch: int
    best_val_balanced_accuracy: float
    epochs_run: int
    history: list[EpochRecord]
    best_params: ModelParams
    val_predictions: PredictionSet
    hed: Optional[HedStats] = None
    alpha_vec: Optional[np.ndarray] = None
    best_checkpoint_path: Optional[Path] = None
    meta: dict[str, Any] = field(default_factory=dict)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.epoch, r.train_loss, r.val_balanced_accuracy, r.lr) for r in self.history],
            columns=list(HISTORY_COLUMNS),
        )


def run_config_dict(
    arch: ArchConfig,
    config: TrainConfig,
    policy: AugPolicy,
    assignment: FoldAssignment,
) -> dict[str, Any]:
    return {
        "arch": arch.model_dump(mode="json"),
        "train": config.model_dump(mode="json"),
        "policy": policy.model_dump(mode="json"),
        "k": assignment.k,
        "split_seed": assignment.seed,
    }


def train(
    dataset: Dataset,
    assignment: FoldAssignment,
    fold: int,
    arch: ArchConfig,
    config: TrainConfig,
    policy: AugPolicy,
    run_dir: Optional[Union[Path, str]] = None,
    callback: Optional[Callable[[EpochRecord], None]] = None,
    workers: int = 1,
) -> TrainResult:
    train_ids, val_ids = fold_slices(assignment, fold)
    if not train_ids or not val_ids:
        raise EmptyInput(f"fold {fold} leaves an empty training or validation slice")
    train_set = dataset.subset(train_ids)
    val_set = dataset.subset(val_ids)

    hed = None
    if arch.input_mode != "rgb":
        hed = hed_stats(train_set, arch.input_mode, policy.crop_size)
    alpha_vec = None
    if arch.hardness_head_mode == "four_class":
        alpha_vec = inverse_frequency_alpha([r.four_class for r in train_set], arch.hardness_width)

    params = init_params(arch, config.seed)
    state = init_adam_state(params)
    stopper = EarlyStopper(config.patience)
    history: list[EpochRecord] = []
    best_params = params
    best_preds: Optional[PredictionSet] = None

    logger.info(
        "Training fold %d/%d: %d train, %d validation patches",
        fold,
        assignment.k,
        len(train_set),
        len(val_set),
    )
    for epoch in range(1, config.max_epochs + 1):
        params, state, loss = run_epoch(
            params, state, train_set, policy, config, epoch, hed, alpha_vec, workers
        )
        preds = evaluate_split(params, val_set, policy, hed)
        ba = validation_balanced_accuracy(preds.truth, preds.predicted)
        record = EpochRecord(epoch, loss, ba, cosine_lr(epoch - 1, config, config.max_epochs))
        history.append(record)
        if stopper.update(epoch, ba):
            best_params = params.copy()
            best_preds = preds
        logger.info(
            "fold %d epoch %d: loss=%.4f val_ba=%.4f lr=%.3g%s",
            fold,
            epoch,
            loss,
            ba,
            record.lr,
            " *" if stopper.best_epoch == epoch else "",
        )
        if callback is not None:
            callback(record)
        if stopper.should_stop(epoch):
            logger.info("Early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break

    if best_preds is None:
        raise EmptyInput(f"fold {fold}: no epoch produced a validation score")
    meta = {
        "epoch": stopper.best_epoch,
        "val_balanced_accuracy": stopper.best_value,
        "fold": fold,
        "k": assignment.k,
        "hed": hed.to_dict() if hed is not None else None,
        "alpha_vec": alpha_vec.tolist() if alpha_vec is not None else None,
        "policy": policy.model_dump(mode="json"),
    }
    result = TrainResult(
        best_epoch=stopper.best_epoch,
        best_val_balanced_accuracy=stopper.best_value,
        epochs_run=len(history),
        history=history,
        best_params=best_params,
        val_predictions=best_preds,
        hed=hed,
        alpha_vec=alpha_vec,
        meta=meta,
    )
    if run_dir is not None:
        result.best_checkpoint_path = write_run(
            result, Path(run_dir), arch, config, policy, assignment, fold
        )
    return result


def write_run(
    result: TrainResult,
    run_dir: Path,
    arch: ArchConfig,
    config: TrainConfig,
    policy: AugPolicy,
    assignment: FoldAssignment,
    fold: int,
) -> Path:
    """Write config.json, history.csv, best.ckpt, predictions.csv and metrics.

    Returns the checkpoint path.
    """
    write_json(run_dir / "config.json", run_config_dict(arch, config, policy, assignment))
    write_table(run_dir / "history.csv", result.history_frame())
    ckpt = save_checkpoint(run_dir / "best.ckpt", result.best_params, result.meta)
    write_predictions(result.val_predictions, run_dir / "predictions.csv")
    write_report(evaluate(result.val_predictions), run_dir)
    return ckpt
