"""Brute-force reference implementations for testing.

Nothing here calls the code paths it checks: ICC matrices are built with
explicit double loops and per-element kernel sums, KL divergence with
explicit exponentials, and gradients with central finite differences.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np

from .errors import OracleError, ShapeError
from .tensor import Tensor, backward, no_grad


def icc_naive(f, cfg=None) -> np.ndarray:
    """Pairwise-kernel ICC matrix of a [c, h, w] array, in float64."""
    f = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    if f.ndim != 3:
        raise ShapeError(f"icc_naive expects [c, h, w], got {f.shape}")
    kind = getattr(cfg, "kind", "inner")
    c = f.shape[0]
    rows = [[float(x) for x in f[i].ravel()] for i in range(c)]
    out = np.zeros((c, c))
    for p in range(c):
        for q in range(c):
            u, v = rows[p], rows[q]
            if kind == "inner":
                acc = 0.0
                for a, b in zip(u, v):
                    acc += a * b
                out[p, q] = acc
            elif kind == "gaussian":
                acc = 0.0
                for a, b in zip(u, v):
                    acc += (a - b) * (a - b)
                out[p, q] = math.exp(-acc / (2.0 * cfg.gaussian_sigma**2))
            elif kind == "polynomial":
                acc = 0.0
                for a, b in zip(u, v):
                    acc += a * b
                out[p, q] = (acc + cfg.poly_offset) ** cfg.poly_degree
            else:
                raise OracleError(f"unknown kernel kind {kind!r}")
    return out


def kl_naive(logits_t, logits_s, temperature: float) -> float:
    """Batch-mean KL(teacher || student) of temperature-softened softmaxes."""
    t = np.asarray(logits_t.data if isinstance(logits_t, Tensor) else logits_t, dtype=np.float64)
    s = np.asarray(logits_s.data if isinstance(logits_s, Tensor) else logits_s, dtype=np.float64)
    if t.shape != s.shape or t.ndim != 2:
        raise ShapeError(f"logit shapes must match as [N, K]: {t.shape} vs {s.shape}")
    total = 0.0
    for row_t, row_s in zip(t, s):
        et = [math.exp(x / temperature) for x in row_t]
        es = [math.exp(x / temperature) for x in row_s]
        zt, zs = sum(et), sum(es)
        for a, b in zip(et, es):
            p, q = a / zt, b / zs
            if p > 0.0:
                total += p * math.log(p / q)
    return total / t.shape[0]


def matmul_naive(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("inner dimensions differ")
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def conv2d_naive(x, w, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct sliding-window cross-correlation of [N, C, H, W] by [O, C, k, k]."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, oc, i, j] = float((patch * w[oc]).sum())
    return out


@dataclasses.dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    max_abs_error: dict[str, float]
    worst_index: dict[str, tuple]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst <= tol

    def summary(self) -> str:
        parts = [f"{k}: rel={self.max_rel_error[k]:.2e} abs={self.max_abs_error[k]:.2e}" for k in self.max_rel_error]
        return "; ".join(parts)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor] | dict,
    eps: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare backward-pass gradients with central differences.

    ``loss_fn`` rebuilds the loss from the current parameter values each
    call.  Relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"p{i}", p) for i, p in enumerate(params)]
    for name, p in named:
        if p.dtype != np.float64:
            raise OracleError(f"grad_check needs float64 parameters; {name} is {p.dtype}")

    loss = loss_fn()
    tape = backward(loss)
    with no_grad():
        base = float(loss_fn().data)
    if base != float(loss.data):
        raise OracleError("loss_fn is not deterministic across evaluations")

    rel, absd, worst = {}, {}, {}
    for name, p in named:
        analytic = tape.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = float(loss_fn().data)
            flat[i] = orig - eps
            with no_grad():
                down = float(loss_fn().data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * eps)
        diff = np.abs(analytic - numeric)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        r = diff / denom
        idx = int(np.argmax(r)) if r.size else 0
        rel[name] = float(r.reshape(-1)[idx]) if r.size else 0.0
        absd[name] = float(diff.max()) if diff.size else 0.0
        worst[name] = tuple(int(v) for v in np.unravel_index(idx, p.shape)) if r.size else ()
    return GradCheckReport(rel, absd, worst)
