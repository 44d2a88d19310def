"""
Netcore: backbone -> shared fully connected layer -> per-expert heads + hardness head.

Batches are N x H x W x C arrays. Every forward pass returns a cache that
`backward` consumes; gradients are taken with respect to the head
pre-activations (logits) so the loss module stays independent of the network.

The desk backbone is a small conv net written directly against numpy. Other
backbones plug in through `register_backbone`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, softmax

from src.mitoclass.config import ArchConfig, validated
from src.mitoclass.errors import InvalidConfig, ShapeMismatch, StaleCache
from src.mitoclass.rng import stream

logger = logging.getLogger(__name__)

Tensors = dict[str, np.ndarray]
ParamGrads = dict[str, np.ndarray]


@dataclass
class ModelParams:
    arch: ArchConfig
    tensors: Tensors
    version: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            version=self.version,
        )

    def replaced(self, tensors: Tensors) -> "ModelParams":
        return ModelParams(arch=self.arch, tensors=tensors, version=self.version + 1)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    out_channels: int
    out_size: Optional[int] = None


class Backbone(Protocol):
    def param_shapes(self) -> dict[str, tuple[int, ...]]: ...

    def fan_in(self, name: str) -> int: ...

    def forward(self, tensors: Tensors, x: np.ndarray) -> tuple[np.ndarray, Any]: ...

    def backward(self, tensors: Tensors, cache: Any, d_features: np.ndarray) -> ParamGrads: ...


def _conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, h, width, c = x.shape
    c_out = w.shape[0]
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(padded, (3, 3), axis=(1, 2)).reshape(n * h * width, c * 9)
    out = cols @ w.reshape(c_out, c * 9).T + b
    return out.reshape(n, h, width, c_out), cols


def _conv3x3_backward(
    d_out: np.ndarray,
    cols: np.ndarray,
    w: np.ndarray,
    input_shape: tuple[int, ...],
    need_input_grad: bool,
) -> tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    n, h, width, c = input_shape
    c_out = w.shape[0]
    d2 = d_out.reshape(-1, c_out)
    d_w = (d2.T @ cols).reshape(w.shape)
    d_b = d2.sum(axis=0)
    if not need_input_grad:
        return None, d_w, d_b
    d_cols = (d2 @ w.reshape(c_out, c * 9)).reshape(n, h, width, c, 3, 3)
    d_padded = np.zeros((n, h + 2, width + 2, c), dtype=d_out.dtype)
    for kh in range(3):
        for kw in range(3):
            d_padded[:, kh : kh + h, kw : kw + width, :] += d_cols[..., kh, kw]
    return d_padded[:, 1:-1, 1:-1, :], d_w, d_b


def _pool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, h, w, c = x.shape
    windows = (
        x.reshape(n, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h // 2, w // 2, c, 4)
    )
    idx = windows.argmax(axis=-1)
    return np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0], idx


def _pool_backward(d_out: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, h2, w2, c = d_out.shape
    d_windows = np.zeros((n, h2, w2, c, 4), dtype=d_out.dtype)
    np.put_along_axis(d_windows, idx[..., None], d_out[..., None], axis=-1)
    return (
        d_windows.reshape(n, h2, w2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, h2 * 2, w2 * 2, c)
    )


@dataclass
class _BlockCache:
    cols: np.ndarray
    input_shape: tuple[int, ...]
    active: np.ndarray
    pool_idx: np.ndarray


@dataclass
class _DeskCache:
    blocks: list[_BlockCache]
    proj_input: np.ndarray
    proj_active: np.ndarray


class DeskCNN:
    """[3x3 conv, ReLU, 2x2 max-pool] blocks, a 1x1 projection with ReLU, global average pool."""

    def __init__(self, arch: ArchConfig):
        self.arch = arch
        self.widths = tuple(arch.conv_channels)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c_in = self.arch.input_channels or 3
        for i, c_out in enumerate(self.widths):
            shapes[f"backbone.conv{i}.weight"] = (c_out, c_in, 3, 3)
            shapes[f"backbone.conv{i}.bias"] = (c_out,)
            c_in = c_out
        shapes["backbone.proj.weight"] = (c_in, self.arch.feature_dim)
        shapes["backbone.proj.bias"] = (self.arch.feature_dim,)
        return shapes

    def fan_in(self, name: str) -> int:
        shape = self.param_shapes()[name]
        if name.endswith(".weight") and len(shape) == 4:
            return shape[1] * 9
        return shape[0]

    def forward(self, tensors: Tensors, x: np.ndarray) -> tuple[np.ndarray, _DeskCache]:
        factor = 2 ** len(self.widths)
        if x.shape[1] % factor or x.shape[2] % factor:
            raise ShapeMismatch(
                f"desk backbone needs spatial dims divisible by {factor}, got {x.shape[1:3]}"
            )
        blocks = []
        for i in range(len(self.widths)):
            pre, cols = _conv3x3_forward(
                x, tensors[f"backbone.conv{i}.weight"], tensors[f"backbone.conv{i}.bias"]
            )
            active = pre > 0
            x_shape = x.shape
            x, idx = _pool_forward(np.where(active, pre, 0.0).astype(pre.dtype))
            blocks.append(_BlockCache(cols=cols, input_shape=x_shape, active=active, pool_idx=idx))
        proj_pre = x @ tensors["backbone.proj.weight"] + tensors["backbone.proj.bias"]
        proj_active = proj_pre > 0
        features = np.where(proj_active, proj_pre, 0.0).astype(proj_pre.dtype).mean(axis=(1, 2))
        return features, _DeskCache(blocks=blocks, proj_input=x, proj_active=proj_active)

    def backward(self, tensors: Tensors, cache: _DeskCache, d_features: np.ndarray) -> ParamGrads:
        grads: ParamGrads = {}
        n, h, w, _ = cache.proj_active.shape
        d_proj = np.broadcast_to(d_features[:, None, None, :] / (h * w), cache.proj_active.shape)
        d_proj = np.where(cache.proj_active, d_proj, 0.0).astype(d_features.dtype)
        flat_in = cache.proj_input.reshape(-1, cache.proj_input.shape[-1])
        flat_d = d_proj.reshape(-1, d_proj.shape[-1])
        grads["backbone.proj.weight"] = flat_in.T @ flat_d
        grads["backbone.proj.bias"] = flat_d.sum(axis=0)
        d_x = d_proj @ tensors["backbone.proj.weight"].T

        for i in reversed(range(len(self.widths))):
            block = cache.blocks[i]
            d_act = _pool_backward(d_x, block.pool_idx)
            d_pre = np.where(block.active, d_act, 0.0).astype(d_act.dtype)
            d_x, d_w, d_b = _conv3x3_backward(
                d_pre,
                block.cols,
                tensors[f"backbone.conv{i}.weight"],
                block.input_shape,
                need_input_grad=i > 0,
            )
            grads[f"backbone.conv{i}.weight"] = d_w
            grads[f"backbone.conv{i}.bias"] = d_b
        return grads


_BACKBONES: dict[str, Callable[[ArchConfig], Backbone]] = {"desk_cnn": DeskCNN}


def register_backbone(name: str, factory: Callable[[ArchConfig], Backbone]) -> None:
    _BACKBONES[name] = factory


def get_backbone(arch: ArchConfig) -> Backbone:
    try:
        factory = _BACKBONES[arch.backbone]
    except KeyError:
        raise InvalidConfig(
            f"backbone '{arch.backbone}' is not registered; available: {sorted(_BACKBONES)}"
        ) from None
    return factory(arch)


def desk_backbone_spec(
    input_channels: int = 3,
    input_size: int = 64,
) -> tuple[ArchConfig, list[LayerSpec]]:
    mode = "rgb" if input_channels == 3 else "rgb_hed"
    arch = validated(ArchConfig, {"input_mode": mode, "input_channels": input_channels})
    layers = []
    size = input_size
    for i, width in enumerate(arch.conv_channels):
        layers.append(LayerSpec(f"conv{i}", "conv3x3+relu", width, size))
        size //= 2
        layers.append(LayerSpec(f"pool{i}", "maxpool2x2", width, size))
    layers.append(LayerSpec("proj", "conv1x1+relu", arch.feature_dim, size))
    layers.append(LayerSpec("gap", "global_avg_pool", arch.feature_dim, 1))
    return arch, layers


def param_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    shapes = dict(get_backbone(arch).param_shapes())
    shapes["shared.weight"] = (arch.feature_dim, arch.shared_dim)
    shapes["shared.bias"] = (arch.shared_dim,)
    for i in range(arch.n_expert_heads):
        shapes[f"head.expert{i}.weight"] = (arch.shared_dim, 1)
        shapes[f"head.expert{i}.bias"] = (1,)
    shapes["head.hardness.weight"] = (arch.shared_dim, arch.hardness_width)
    shapes["head.hardness.bias"] = (arch.hardness_width,)
    return shapes


def init_params(arch: ArchConfig, seed: int) -> ModelParams:
    """He-uniform weights, zero biases."""
    backbone = get_backbone(arch)
    rng = stream(seed, "init")
    dtype = np.dtype(arch.dtype)
    tensors: Tensors = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = backbone.fan_in(name) if name.startswith("backbone.") else shape[0]
        limit = np.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return ModelParams(arch=arch, tensors=tensors)


def zero_params(arch: ArchConfig) -> ModelParams:
    dtype = np.dtype(arch.dtype)
    return ModelParams(
        arch=arch,
        tensors={name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(arch).items()},
    )


@dataclass
class HeadOutputs:
    expert_logits: np.ndarray
    hardness_logits: np.ndarray
    expert_probs: np.ndarray
    hardness_probs: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.expert_probs.shape[0]


@dataclass
class HeadGrads:
    expert: np.ndarray
    hardness: np.ndarray


@dataclass
class ForwardCache:
    version: int
    arch: ArchConfig
    backbone: Any
    features: np.ndarray
    shared_active: np.ndarray
    dropout_mask: Optional[np.ndarray]
    hidden: np.ndarray
    extra: dict[str, Any] = field(default_factory=dict)


def forward(
    params: ModelParams,
    batch: np.ndarray,
    train_mode: bool = False,
    dropout_seed: int = 0,
) -> tuple[HeadOutputs, ForwardCache]:
    arch = params.arch
    if batch.ndim != 4 or batch.shape[3] != arch.input_channels:
        raise ShapeMismatch(
            f"batch shape {batch.shape} does not match {arch.input_channels} input channels"
        )
    t = params.tensors
    x = batch.astype(arch.dtype, copy=False)
    features, backbone_cache = get_backbone(arch).forward(t, x)

    shared_pre = features @ t["shared.weight"] + t["shared.bias"]
    shared_active = shared_pre > 0
    hidden = np.where(shared_active, shared_pre, 0.0).astype(shared_pre.dtype)
    mask = None
    if train_mode and arch.dropout > 0:
        keep = stream(dropout_seed, "dropout").random(hidden.shape) >= arch.dropout
        mask = (keep / (1.0 - arch.dropout)).astype(hidden.dtype)
        hidden = hidden * mask

    expert_logits = np.concatenate(
        [
            hidden @ t[f"head.expert{i}.weight"] + t[f"head.expert{i}.bias"]
            for i in range(arch.n_expert_heads)
        ],
        axis=1,
    )
    hardness_logits = hidden @ t["head.hardness.weight"] + t["head.hardness.bias"]
    if arch.hardness_head_mode == "four_class":
        hardness_probs = softmax(hardness_logits, axis=1)
    else:
        hardness_probs = expit(hardness_logits)

    outputs = HeadOutputs(
        expert_logits=expert_logits,
        hardness_logits=hardness_logits,
        expert_probs=expit(expert_logits),
        hardness_probs=hardness_probs,
    )
    cache = ForwardCache(
        version=params.version,
        arch=arch,
        backbone=backbone_cache,
        features=features,
        shared_active=shared_active,
        dropout_mask=mask,
        hidden=hidden,
    )
    return outputs, cache


def backward(params: ModelParams, cache: ForwardCache, loss_grads: HeadGrads) -> ParamGrads:
    if cache.version != params.version or cache.arch != params.arch:
        raise StaleCache(
            f"cache from parameter version {cache.version} used with version {params.version}"
        )
    arch = params.arch
    t = params.tensors
    dtype = np.dtype(arch.dtype)
    d_expert = np.asarray(loss_grads.expert, dtype=dtype)
    d_hard = np.asarray(loss_grads.hardness, dtype=dtype)

    grads: ParamGrads = {}
    d_hidden = d_hard @ t["head.hardness.weight"].T
    grads["head.hardness.weight"] = cache.hidden.T @ d_hard
    grads["head.hardness.bias"] = d_hard.sum(axis=0)
    for i in range(arch.n_expert_heads):
        d_i = d_expert[:, i : i + 1]
        grads[f"head.expert{i}.weight"] = cache.hidden.T @ d_i
        grads[f"head.expert{i}.bias"] = d_i.sum(axis=0)
        d_hidden = d_hidden + d_i @ t[f"head.expert{i}.weight"].T

    if cache.dropout_mask is not None:
        d_hidden = d_hidden * cache.dropout_mask
    d_shared = np.where(cache.shared_active, d_hidden, 0.0).astype(dtype)
    grads["shared.weight"] = cache.features.T @ d_shared
    grads["shared.bias"] = d_shared.sum(axis=0)
    d_features = d_shared @ t["shared.weight"].T

    grads.update(get_backbone(arch).backward(t, cache.backbone, d_features))
    return {name: grads[name].astype(dtype, copy=False) for name in t}


@dataclass
class Predictions:
    classes: np.ndarray
    scores: np.ndarray
    hardness: np.ndarray


def predict(
    outputs: HeadOutputs,
    aggregation: str = "mean",
    hardness_head_mode: str = "binary",
) -> Predictions:
    """NMF score per patch; the class is NMF exactly when the score is >= 0.5.

    `mean` scores with the mean head probability, `vote` with the fraction of
    heads voting NMF, so a 2-of-3 majority scores 2/3.
    """
    probs = outputs.expert_probs.astype(np.float64)
    if aggregation == "mean":
        scores = probs.mean(axis=1)
    elif aggregation == "vote":
        scores = (probs >= 0.5).mean(axis=1)
    else:
        raise InvalidConfig(f"unknown aggregation '{aggregation}'")
    classes = (scores >= 0.5).astype(np.int64)
    if hardness_head_mode == "four_class":
        hardness = outputs.hardness_probs.argmax(axis=1).astype(np.int64)
    else:
        hardness = (outputs.hardness_probs[:, 0] >= 0.5).astype(np.int64)
    return Predictions(classes=classes, scores=scores, hardness=hardness)
