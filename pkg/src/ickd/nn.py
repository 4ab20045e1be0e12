"""Layers, the student-side transfer layer and a small configurable CNN."""

from __future__ import annotations

import contextlib
import dataclasses
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

TRAIN = "train"
EVAL = "eval"

_FREEZE_STATS = False


@contextlib.contextmanager
def frozen_bn_stats():
    """Suspend running-statistic updates (used while checking gradients)."""
    global _FREEZE_STATS
    previous = _FREEZE_STATS
    _FREEZE_STATS = True
    try:
        yield
    finally:
        _FREEZE_STATS = previous


def _check_mode(mode: str) -> bool:
    if mode not in (TRAIN, EVAL):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == TRAIN


def _param(array: np.ndarray, dtype=None) -> Tensor:
    return Tensor(array, requires_grad=True, dtype=dtype)


class Module:
    """Minimal container: parameters are Tensors, buffers are numpy arrays."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}{i + 1}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}{i + 1}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Every parameter and buffer by name, in a fixed order."""
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state_arrays(self, arrays) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(arrays)
        if missing:
            raise ConfigError(f"state is missing tensors: {sorted(missing)}")
        for name, p in params.items():
            src = np.asarray(arrays[name])
            if src.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {src.shape}")
            p.data = np.array(src, dtype=p.dtype)
        for name, buf in buffers.items():
            src = np.asarray(arrays[name])
            if src.shape != buf.shape:
                raise ShapeError(f"{name}: expected shape {buf.shape}, got {src.shape}")
            buf[...] = src

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for name in getattr(self, "_buffers", ()):
            setattr(self, name, getattr(self, name).astype(dtype))
        for value in vars(self).values():
            if isinstance(value, Module):
                value._cast_buffers(dtype)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item._cast_buffers(dtype)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, rng=None, bias: bool = False):
        if kernel not in (1, 3):
            raise ConfigError(f"kernel size must be 1 or 3, got {kernel}")
        self.stride = stride
        self.padding = kernel // 2
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * kernel * kernel
        self.weight = _param(rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, kernel, kernel)))
        self.bias = _param(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            out = out + T.reshape(self.bias, (1, -1, 1, 1))
        return out


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        dtype = T.default_dtype()
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batchnorm(x, self, mode)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _param(rng.normal(0.0, np.sqrt(1.0 / c_in), (c_out, c_in)))
        self.bias = _param(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, T.transpose(self.weight)) + self.bias


class ConvBNReLU(Module):
    def __init__(self, c_in: int, c_out: int, rng, downsample: bool = False):
        self.downsample = downsample
        self.conv = Conv2d(c_in, c_out, 3, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        if self.downsample:
            x = T.max_pool2d(x, 2)
        return T.relu(self.bn(self.conv(x), mode))


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    k = weight.shape[-1]
    if k not in (1, 3):
        raise ShapeError(f"only 1x1 and 3x3 kernels are supported, got {k}x{k}")
    return T.conv2d(x, weight, stride=stride, padding=padding)


def batchnorm(x: Tensor, bn: BatchNorm2d, mode: str) -> Tensor:
    """Apply ``bn``; in train mode also update its running statistics."""
    training = _check_mode(mode)
    out, stats = T.batch_norm(
        x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, training=training, eps=bn.eps
    )
    if training and not _FREEZE_STATS:
        mu, var = stats
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (m / (m - 1))
        mom = bn.momentum
        bn.running_mean = ((1 - mom) * bn.running_mean + mom * mu).astype(bn.running_mean.dtype)
        bn.running_var = ((1 - mom) * bn.running_var + mom * unbiased).astype(bn.running_var.dtype)
    return out


class TransferLayer(Module):
    """1x1 convolution followed by batch norm, no activation.

    Maps the student's channel count onto the teacher's before their
    correlation matrices are compared.  Spatial size is left unchanged.
    """

    def __init__(self, c_in: int, c_out: int, rng=None, momentum: float = 0.1, eps: float = 1e-5):
        self.conv = Conv2d(c_in, c_out, 1, rng=rng)
        self.bn = BatchNorm2d(c_out, momentum=momentum, eps=eps)

    @classmethod
    def identity(cls, channels: int) -> "TransferLayer":
        """Identity mixing and eps=0, so eval mode with stats (0, 1) returns its input."""
        layer = cls(channels, channels, eps=0.0)
        layer.conv.weight.data = np.eye(channels, dtype=layer.conv.weight.dtype).reshape(
            channels, channels, 1, 1
        )
        return layer

    @property
    def in_channels(self) -> int:
        return self.conv.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv.weight.shape[0]

    def __call__(self, f_s: Tensor, mode: str = TRAIN) -> Tensor:
        return transfer_apply(self, f_s, mode)


def transfer_apply(layer: TransferLayer, f_s: Tensor, mode: str = TRAIN) -> Tensor:
    if f_s.ndim != 4:
        raise ShapeError(f"transfer layer expects [N, c, h, w], got {f_s.shape}")
    if f_s.shape[1] != layer.in_channels:
        raise ShapeError(
            f"transfer layer expects {layer.in_channels} input channels, got {f_s.shape[1]}"
        )
    return batchnorm(layer.conv(f_s), layer.bn, mode)


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    task: str = "classification"
    stage_widths: tuple[int, ...] = (8, 16, 32)
    blocks_per_stage: int = 1
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.task not in ("classification", "dense"):
            raise ConfigError(f"model.task must be 'classification' or 'dense', got {self.task!r}")
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            raise ConfigError("model.stage_widths needs at least one stage, every width >= 1")
        if self.blocks_per_stage < 1:
            raise ConfigError("model.blocks_per_stage must be >= 1")
        if self.num_classes < 2 and self.task == "dense" or self.num_classes < 1:
            raise ConfigError("model.num_classes is too small")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError("model.input_shape must be [channels, height, width]")
        factor = 2 ** (len(self.stage_widths) - 1)
        _, h, w = self.input_shape
        if h % factor or w % factor:
            raise ConfigError(
                f"model.input_shape {h}x{w} is not divisible by the total stride {factor}"
            )

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    def tap_shape(self, stage: int) -> tuple[int, int, int]:
        """[c, h, w] of the 1-based ``stage`` output."""
        if not 1 <= stage <= self.num_stages:
            raise ConfigError(f"stage {stage} outside 1..{self.num_stages}")
        factor = 2 ** (stage - 1)
        return (self.stage_widths[stage - 1], self.input_shape[1] // factor, self.input_shape[2] // factor)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "stage_widths": list(self.stage_widths),
            "blocks_per_stage": self.blocks_per_stage,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            task=d["task"],
            stage_widths=tuple(d["stage_widths"]),
            blocks_per_stage=int(d["blocks_per_stage"]),
            num_classes=int(d["num_classes"]),
            input_shape=tuple(d["input_shape"]),
        )


class Model(Module):
    """Plain conv-BN-ReLU stages; a 2x2 max pool opens every stage after the first."""

    def __init__(self, spec: ModelSpec, rng):
        self.spec = spec
        self.stage = []
        c_in = spec.input_shape[0]
        for s, width in enumerate(spec.stage_widths):
            blocks = []
            for b in range(spec.blocks_per_stage):
                blocks.append(ConvBNReLU(c_in, width, rng, downsample=(s > 0 and b == 0)))
                c_in = width
            self.stage.append(_Stage(blocks))
        if spec.task == "classification":
            self.head = Linear(c_in, spec.num_classes, rng)
        else:
            self.head = Conv2d(c_in, spec.num_classes, 1, rng=rng, bias=True)

    def __call__(self, batch: Tensor, mode: str = EVAL) -> Tensor:
        return forward_with_taps(self, batch, mode)[0]


class _Stage(Module):
    def __init__(self, blocks):
        self.block = blocks

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        for block in self.block:
            x = block(x, mode)
        return x


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Deterministically initialise a model for ``spec`` from ``seed``."""
    if not isinstance(spec, ModelSpec):
        raise ConfigError("build_model expects a ModelSpec")
    return Model(spec, np.random.default_rng(seed))


def forward_with_taps(model: Model, batch, mode: str = EVAL):
    """Run ``model`` and return ``(logits, taps)``.

    ``taps`` maps each 1-based stage index to that stage's output; for a
    classification model the last tap is the feature fed to global average
    pooling.
    """
    _check_mode(mode)
    batch = T.as_tensor(batch)
    spec = model.spec
    if batch.ndim != 4 or tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match model input {spec.input_shape}")
    taps: "OrderedDict[int, Tensor]" = OrderedDict()
    x = batch
    for s, stage in enumerate(model.stage, start=1):
        x = stage(x, mode)
        taps[s] = x
    if spec.task == "classification":
        logits = model.head(T.global_avg_pool(x))
    else:
        logits = T.upsample_nearest(model.head(x), 2 ** (spec.num_stages - 1))
    return logits, taps
