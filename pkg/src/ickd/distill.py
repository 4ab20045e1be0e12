"""Inter-channel correlation (ICC) matrices and the distillation objectives.

An ICC matrix holds a kernel value for every pair of channels of a feature
map, each channel flattened over its spatial positions.  Its size depends
only on the channel count, so student and teacher features of different
resolution can be compared once the student's channels are mapped onto the
teacher's by a :class:`~ickd.nn.TransferLayer`.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, GridIndivisibleError, ShapeError
from .nn import TRAIN, TransferLayer, transfer_apply
from .tensor import Tensor

KERNEL_KINDS = ("inner", "gaussian", "polynomial")
CC_LOSS_KINDS = ("l2", "smooth_l1")
# "spatial" divides every flattened channel by sqrt(h*w) before the kernel, so
# inner-product entries become spatial means instead of sums.
ICC_NORMALIZE = ("none", "spatial")


@dataclasses.dataclass(frozen=True)
class KernelCfg:
    kind: str = "inner"
    gaussian_sigma: float = 1.0
    poly_offset: float = 1.0
    poly_degree: int = 2

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(f"kernel.kind must be one of {KERNEL_KINDS}, got {self.kind!r}")
        if not self.gaussian_sigma > 0:
            raise ConfigError("kernel.gaussian_sigma must be positive")
        if int(self.poly_degree) != self.poly_degree or self.poly_degree < 1:
            raise ConfigError("kernel.poly_degree must be a positive integer")


@dataclasses.dataclass(frozen=True)
class GridSpec:
    n: int = 1
    m: int = 1

    def __post_init__(self):
        if int(self.n) != self.n or int(self.m) != self.m or self.n < 1 or self.m < 1:
            raise ConfigError(f"grid must be positive integers, got {self.n}x{self.m}")

    def check(self, h: int, w: int) -> None:
        if h % self.n or w % self.m:
            raise GridIndivisibleError(
                f"grid {self.n}x{self.m} does not evenly divide a {h}x{w} feature map"
            )


@dataclasses.dataclass(frozen=True)
class DistillConfig:
    """Objective hyperparameters.

    ``stages`` holds 1-based stage indices; ``None`` means the last stage of
    the models being distilled.
    """

    temperature: float = 4.0
    beta1: float = 1.0
    beta2: float = 2.5
    alpha: float = 20.0
    kernel: KernelCfg = dataclasses.field(default_factory=KernelCfg)
    cc_loss_kind: str = "l2"
    stages: tuple[int, ...] | None = None
    grid: GridSpec = dataclasses.field(default_factory=GridSpec)
    use_transfer_layer: bool = True
    kd_tau_squared: bool = False
    icc_normalize: str = "spatial"

    def __post_init__(self):
        if self.icc_normalize not in ICC_NORMALIZE:
            raise ConfigError(f"distill.icc_normalize must be one of {ICC_NORMALIZE}")
        if not self.temperature > 0:
            raise ConfigError("distill.temperature must be > 0")
        for key in ("beta1", "beta2", "alpha"):
            value = getattr(self, key)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigError(f"distill.{key} must be a finite value >= 0")
        if self.cc_loss_kind not in CC_LOSS_KINDS:
            raise ConfigError(f"distill.cc_loss_kind must be one of {CC_LOSS_KINDS}")
        if self.stages is not None:
            stages = tuple(sorted(set(int(s) for s in self.stages)))
            if not stages or stages[0] < 1:
                raise ConfigError("distill.stages must be a non-empty set of 1-based indices")
            object.__setattr__(self, "stages", stages)

    def resolve_stages(self, num_stages: int) -> tuple[int, ...]:
        stages = self.stages if self.stages is not None else (num_stages,)
        bad = [s for s in stages if s > num_stages]
        if bad:
            raise ConfigError(f"distill.stages {bad} exceed the model's {num_stages} stages")
        return stages


@dataclasses.dataclass
class ICCMatrix:
    """Channel-by-channel correlation values; leading batch axes allowed."""

    values: Tensor

    @property
    def channel_count(self) -> int:
        return self.values.shape[-1]


# ---------------------------------------------------------------------------
# kernel and ICC matrix


def icc_kernel(u, v, cfg: KernelCfg = KernelCfg()) -> float:
    """Kernel value between two flattened channels."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"kernel inputs differ in length: {u.size} vs {v.size}")
    if cfg.kind == "inner":
        return float(u @ v)
    if cfg.kind == "gaussian":
        d = u - v
        return float(np.exp(-(d @ d) / (2.0 * cfg.gaussian_sigma**2)))
    return float((u @ v + cfg.poly_offset) ** cfg.poly_degree)


def _kernel_from_flat(x: Tensor, cfg: KernelCfg, normalize: bool = False) -> Tensor:
    """[..., c, L] flattened channels -> [..., c, c] kernel matrix."""
    if normalize:
        x = T.scale(x, 1.0 / math.sqrt(x.shape[-1]))
    g = T.gram(x)
    if cfg.kind == "inner":
        return g
    if cfg.kind == "polynomial":
        return T.pow(g + cfg.poly_offset, int(cfg.poly_degree))
    # squared distances from the Gram matrix: |u|^2 + |v|^2 - 2 u.v
    sq = T.tsum(T.mul(x, x), axis=-1, keepdims=True)
    d2 = sq + T.transpose(sq) - T.scale(g, 2.0)
    return T.exp(T.scale(d2, -1.0 / (2.0 * cfg.gaussian_sigma**2)))


def icc_matrix(f: Tensor, cfg: KernelCfg = KernelCfg(), normalize: bool = False) -> ICCMatrix:
    """ICC matrix of one [c, h, w] feature map, or of each map in [N, c, h, w].

    With ``normalize`` each flattened channel is divided by sqrt(h*w) first.
    """
    f = T.as_tensor(f)
    if f.ndim == 3:
        flat = T.flatten_spatial(f)
    elif f.ndim == 4:
        n, c, h, w = f.shape
        flat = T.reshape(f, (n, c, h * w))
    else:
        raise ShapeError(f"icc_matrix expects [c, h, w] (or a batch of them), got {f.shape}")
    return ICCMatrix(_kernel_from_flat(flat, cfg, normalize))


def _mean_cc(g_s: Tensor, g_t: Tensor, kind: str) -> Tensor:
    """Mean over leading axes of (1/c^2) * sum of per-entry penalties."""
    diff = T.sub(g_s, g_t)
    if kind == "l2":
        per_entry = T.mul(diff, diff)
    elif kind == "smooth_l1":
        per_entry = T.huber(diff, 1.0)
    else:
        raise ConfigError(f"unknown cc loss kind {kind!r}")
    return T.mean(per_entry)


def loss_cc(g_s, g_t, kind: str = "l2") -> Tensor:
    """Distance between student and teacher ICC matrices.

    L2: (1/c^2) * ||G_s - G_t||_F^2, averaged over any batch axis.
    """
    g_s = g_s.values if isinstance(g_s, ICCMatrix) else T.as_tensor(g_s)
    g_t = g_t.values if isinstance(g_t, ICCMatrix) else T.as_tensor(g_t)
    if g_s.shape != g_t.shape or g_s.shape[-1] != g_s.shape[-2]:
        raise ShapeError(
            f"ICC matrices must be square and equal in size, got {g_s.shape} and {g_t.shape}"
            " (is the transfer layer missing?)"
        )
    return _mean_cc(g_s, g_t, kind)


# ---------------------------------------------------------------------------
# grid-level ICC


def grid_partition(f: Tensor, grid: GridSpec) -> list[list[Tensor]]:
    """Split [c, h, w] into an n x m nested list of [c, h/n, w/m] patches."""
    f = T.as_tensor(f)
    if f.ndim != 3:
        raise ShapeError(f"grid_partition expects [c, h, w], got {f.shape}")
    _, h, w = f.shape
    grid.check(h, w)
    hg, wg = h // grid.n, w // grid.m
    return [
        [T.getitem(f, (slice(None), slice(i * hg, (i + 1) * hg), slice(j * wg, (j + 1) * wg))) for j in range(grid.m)]
        for i in range(grid.n)
    ]


def _grid_flat(f: Tensor, grid: GridSpec) -> Tensor:
    """[N, c, h, w] -> [N, n*m, c, hg*wg]; patches in row-major grid order."""
    n_, c, h, w = f.shape
    grid.check(h, w)
    hg, wg = h // grid.n, w // grid.m
    x = T.reshape(f, (n_, c, grid.n, hg, grid.m, wg))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (n_, grid.n * grid.m, c, hg * wg))


def _batched(f) -> Tensor:
    f = T.as_tensor(f)
    if f.ndim == 3:
        return T.reshape(f, (1,) + f.shape)
    if f.ndim != 4:
        raise ShapeError(f"expected [c, h, w] or [N, c, h, w], got {f.shape}")
    return f


def loss_cc_grid(
    f_s,
    f_t,
    grid: GridSpec = GridSpec(),
    cfg: KernelCfg = KernelCfg(),
    kind: str = "l2",
    normalize: bool = False,
) -> Tensor:
    """Grid-level ICC loss: the mean over patches (and batch) of per-patch ``loss_cc``.

    ``f_s`` is the student feature after the transfer layer; both features
    accept [c, h, w] or [N, c, h, w].  With a 1x1 grid this is exactly
    ``loss_cc(icc_matrix(f_s), icc_matrix(f_t))``.  ``normalize`` scales
    each patch by its own area.
    """
    f_s, f_t = _batched(f_s), _batched(f_t)
    if f_s.shape[:2] != f_t.shape[:2]:
        raise ShapeError(f"student {f_s.shape} and teacher {f_t.shape} differ in batch or channels")
    if grid.n == 1 and grid.m == 1:
        g_s = icc_matrix(f_s, cfg, normalize).values
        g_t = icc_matrix(f_t, cfg, normalize).values
    else:
        g_s = _kernel_from_flat(_grid_flat(f_s, grid), cfg, normalize)
        g_t = _kernel_from_flat(_grid_flat(f_t, grid), cfg, normalize)
    return _mean_cc(g_s, g_t, kind)


# ---------------------------------------------------------------------------
# logit distillation


def loss_kd(logits_t, logits_s, temperature: float = 4.0, tau_squared: bool = False) -> Tensor:
    """Mean over the batch of KL(softmax(t/tau) || softmax(s/tau)).

    The teacher distribution is the reference.  ``tau_squared`` multiplies
    the result by tau**2.
    """
    logits_t, logits_s = T.as_tensor(logits_t), T.as_tensor(logits_s)
    if logits_t.shape != logits_s.shape or logits_t.ndim != 2:
        raise ShapeError(f"logit shapes must match as [N, K]: {logits_t.shape} vs {logits_s.shape}")
    if not temperature > 0:
        raise ConfigError("temperature must be > 0")
    inv = 1.0 / temperature
    logp_t = T.log_softmax(T.scale(logits_t, inv))
    logp_s = T.log_softmax(T.scale(logits_s, inv))
    p_t = T.softmax(T.scale(logits_t, inv))
    kl = T.tsum(T.mul(p_t, T.sub(logp_t, logp_s))) / logits_t.shape[0]
    if tau_squared:
        kl = T.scale(kl, temperature * temperature)
    return kl


# ---------------------------------------------------------------------------
# combined objectives


def _stage_cc(taps_t, taps_s, transfer_layers, cfg: DistillConfig, stages, grid: GridSpec | None):
    terms = []
    for s in stages:
        if s not in taps_t or s not in taps_s:
            raise ConfigError(f"stage {s} missing from the feature taps")
        f_t, f_s = taps_t[s], taps_s[s]
        if cfg.use_transfer_layer:
            if transfer_layers is None or s not in transfer_layers:
                raise ConfigError(f"no transfer layer configured for stage {s}")
            f_s = transfer_apply(transfer_layers[s], f_s, TRAIN)
        elif f_s.shape[1] != f_t.shape[1]:
            raise ShapeError(
                f"stage {s}: student has {f_s.shape[1]} channels, teacher {f_t.shape[1]};"
                " enable the transfer layer"
            )
        norm = cfg.icc_normalize == "spatial"
        if grid is None:
            term = loss_cc(icc_matrix(f_s, cfg.kernel, norm), icc_matrix(f_t, cfg.kernel, norm), cfg.cc_loss_kind)
        else:
            term = loss_cc_grid(f_s, f_t, grid, cfg.kernel, cfg.cc_loss_kind, norm)
        terms.append(term)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return T.scale(total, 1.0 / len(terms)) if len(terms) > 1 else total


def _resolve(taps_s, cfg: DistillConfig):
    return cfg.resolve_stages(max(taps_s)) if taps_s else ()


def loss_ickd_c(
    logits_t,
    logits_s: Tensor,
    taps_t: Mapping[int, Tensor],
    taps_s: Mapping[int, Tensor],
    transfer_layers: Mapping[int, TransferLayer] | None,
    cfg: DistillConfig,
    targets,
):
    """Classification objective: CE + beta1 * KD + beta2 * mean-stage ICC loss.

    Returns ``(total, components)`` where components holds the unweighted
    ``task``, ``kl`` and ``cc`` terms.
    """
    stages = _resolve(taps_s, cfg)
    ce = T.cross_entropy(logits_s, targets)
    kl = loss_kd(logits_t, logits_s, cfg.temperature, cfg.kd_tau_squared)
    cc = _stage_cc(taps_t, taps_s, transfer_layers, cfg, stages, grid=None)
    total = ce + T.scale(kl, cfg.beta1) + T.scale(cc, cfg.beta2)
    return total, {"task": ce, "kl": kl, "cc": cc}


def loss_ickd_s(
    dense_logits_s: Tensor,
    targets,
    taps_t: Mapping[int, Tensor],
    taps_s: Mapping[int, Tensor],
    transfer_layers: Mapping[int, TransferLayer] | None,
    cfg: DistillConfig,
):
    """Dense-prediction objective: per-pixel CE + alpha * grid-level ICC loss."""
    stages = _resolve(taps_s, cfg)
    seg = T.cross_entropy(dense_logits_s, targets)
    cc = _stage_cc(taps_t, taps_s, transfer_layers, cfg, stages, grid=cfg.grid)
    total = seg + T.scale(cc, cfg.alpha)
    zero = Tensor._wrap(np.zeros((), dtype=seg.dtype))
    return total, {"task": seg, "kl": zero, "cc": cc}
