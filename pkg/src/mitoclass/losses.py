"""
Losses: alpha-balanced focal losses with analytic gradients and the
theta-weighted combination of expert-head and hardness-head losses.

Binary form (natural log, p clamped to [1e-7, 1 - 1e-7]):
    y = 1:  -alpha * (1 - p)^gamma * ln(p)
    y = 0:  -(1 - alpha) * p^gamma * ln(1 - p)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from src.mitoclass.config import FocalParams
from src.mitoclass.errors import BadSimplex, InvalidConfig

PROB_CLAMP = 1e-7
SIMPLEX_TOLERANCE = 1e-6

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class LossCombination:
    theta: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.theta <= 1.0:
            raise InvalidConfig(f"theta must lie in [0, 1], got {self.theta}")


def _clamp(p: ArrayLike) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)


def _scalar_or_array(value: np.ndarray) -> ArrayLike:
    return float(value) if value.ndim == 0 else value


def focal_binary(p: ArrayLike, y: ArrayLike, params: FocalParams) -> ArrayLike:
    p = _clamp(p)
    y = np.asarray(y)
    alpha, gamma = params.alpha, params.gamma
    positive = -alpha * (1.0 - p) ** gamma * np.log(p)
    negative = -(1.0 - alpha) * p**gamma * np.log1p(-p)
    return _scalar_or_array(np.where(y == 1, positive, negative))


def focal_binary_grad(p: ArrayLike, y: ArrayLike, params: FocalParams) -> ArrayLike:
    """dLoss/dp, evaluated at the clamped probability."""
    p = _clamp(p)
    y = np.asarray(y)
    alpha, gamma = params.alpha, params.gamma
    positive = -alpha * (1.0 - p) ** gamma / p
    negative = (1.0 - alpha) * p**gamma / (1.0 - p)
    if gamma != 0.0:
        positive = positive + alpha * gamma * (1.0 - p) ** (gamma - 1.0) * np.log(p)
        negative = negative - (1.0 - alpha) * gamma * p ** (gamma - 1.0) * np.log1p(-p)
    return _scalar_or_array(np.where(y == 1, positive, negative))


def _check_simplex(probs: np.ndarray) -> None:
    if probs.shape[-1] < 2:
        raise BadSimplex(f"need at least 2 classes, got {probs.shape[-1]}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > SIMPLEX_TOLERANCE):
        raise BadSimplex("probability rows must be non-negative and sum to 1 within 1e-6")


def _true_class_terms(
    probs: np.ndarray,
    y: np.ndarray,
    alpha_vec: Sequence[float],
) -> tuple[np.ndarray, np.ndarray]:
    alpha = np.asarray(alpha_vec, dtype=np.float64)
    if alpha.shape != (probs.shape[-1],):
        raise BadSimplex(f"alpha_vec has {alpha.shape[0]} weights for {probs.shape[-1]} classes")
    p_true = np.take_along_axis(probs, y[..., None], axis=-1)[..., 0]
    return _clamp(p_true), alpha[y]


def focal_multiclass(
    probs: np.ndarray,
    y: Union[int, np.ndarray],
    alpha_vec: Sequence[float],
    gamma: float,
) -> ArrayLike:
    probs = np.asarray(probs, dtype=np.float64)
    _check_simplex(probs)
    y = np.asarray(y, dtype=np.int64)
    p_true, alpha = _true_class_terms(probs, y, alpha_vec)
    return _scalar_or_array(-alpha * (1.0 - p_true) ** gamma * np.log(p_true))


def focal_multiclass_logit_grad(
    probs: np.ndarray,
    y: np.ndarray,
    alpha_vec: Sequence[float],
    gamma: float,
) -> np.ndarray:
    """dLoss/dlogits for softmax outputs, rows of shape (..., K)."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    p_true, alpha = _true_class_terms(probs, y, alpha_vec)
    d_ptrue = -alpha * (1.0 - p_true) ** gamma / p_true
    if gamma != 0.0:
        d_ptrue = d_ptrue + alpha * gamma * (1.0 - p_true) ** (gamma - 1.0) * np.log(p_true)
    one_hot = np.zeros_like(probs)
    np.put_along_axis(one_hot, y[..., None], 1.0, axis=-1)
    raw_true = np.take_along_axis(probs, y[..., None], axis=-1)
    return d_ptrue[..., None] * raw_true * (one_hot - probs)


def inverse_frequency_alpha(labels: Sequence[int], n_classes: int) -> np.ndarray:
    """Inverse class frequency, normalized to mean 1; absent classes count once."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    weights = 1.0 / np.maximum(counts, 1).astype(np.float64)
    return weights / weights.mean()


def combined_loss(
    expert_losses: Sequence[float],
    hardness_loss: float,
    comb: LossCombination = LossCombination(),
) -> float:
    expert = float(np.mean(np.asarray(expert_losses, dtype=np.float64)))
    return comb.theta * expert + (1.0 - comb.theta) * float(hardness_loss)
