"""Oracle suite: the implementation checked against brute-force references.

Each check returns a :class:`CheckResult`; :func:`run_all` runs the fast
ones in order and is what ``ickd verify`` prints.
"""

from __future__ import annotations

import dataclasses
import math
import time
from typing import Callable

import numpy as np

from . import distill as D
from . import nn
from . import oracle
from . import tensor as T
from .tensor import Tensor


@dataclasses.dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.3e} <= {self.tolerance:.0e} in {self.seconds:.2f}s{extra}"


def _timed(name: str, tol: float, fn: Callable[[], tuple[float, str]]) -> CheckResult:
    start = time.perf_counter()
    value, detail = fn()
    return CheckResult(name, bool(value <= tol), value, tol, time.perf_counter() - start, detail)


def _param(rng, *shape, positive=False) -> Tensor:
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# ICC and KL oracles


def icc_oracle_error(cases: int = 200, seed: int = 0) -> tuple[float, str]:
    """Max |icc_matrix - icc_naive| over random features, every kernel at its defaults (64-bit)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.precision(np.float64):
        for i in range(cases):
            cfg = D.KernelCfg(kind=D.KERNEL_KINDS[i % 3])
            c = int(rng.integers(1, 9))
            hw = int(rng.integers(1, 65))
            h = _divisor(rng, hw)
            # non-negative, activation-like values
            f = rng.random((c, h, hw // h))
            fast = D.icc_matrix(Tensor(f), cfg).values.data
            slow = oracle.icc_naive(f, cfg)
            worst = max(worst, float(np.max(np.abs(fast - slow))))
    return worst, f"{cases} cases"


def _divisor(rng, n: int) -> int:
    divisors = [d for d in range(1, n + 1) if n % d == 0]
    return int(divisors[rng.integers(len(divisors))])


def kl_oracle_error(cases: int = 200, seed: int = 0) -> tuple[float, str]:
    """Max |loss_kd - kl_naive| over random logit pairs (64-bit)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.precision(np.float64):
        for _ in range(cases):
            k = int(rng.integers(2, 17))
            n = int(rng.integers(1, 5))
            tau = float(rng.choice([1.0, 2.0, 4.0, 8.0]))
            t = rng.standard_normal((n, k)) * 3
            s = rng.standard_normal((n, k)) * 3
            fast = float(D.loss_kd(Tensor(t), Tensor(s), tau).data)
            worst = max(worst, abs(fast - oracle.kl_naive(t, s, tau)))
    return worst, f"{cases} cases"


def kl_closed_form_error() -> tuple[float, str]:
    """t=[1,0], s=[0,1], tau=1 against (e - 1) / (e + 1)."""
    with T.precision(np.float64):
        got = float(D.loss_kd(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), 1.0).data)
    expected = (math.e - 1.0) / (math.e + 1.0)
    return abs(got - expected), f"got {got!r}"


# ---------------------------------------------------------------------------
# gradient suite


def _batch_norm_case(rng):
    x, g, b = _param(rng, 3, 2, 2, 2), _param(rng, 2, positive=True), _param(rng, 2)
    w = rng.standard_normal((3, 2, 2, 2))
    return lambda: T.tsum(T.mul(T.batch_norm(x, g, b, training=True)[0], w)), [x, g, b]


def _eval_batch_norm_case(rng):
    x, g, b = _param(rng, 2, 2, 2, 2), _param(rng, 2, positive=True), _param(rng, 2)
    mean, var = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
    w = rng.standard_normal((2, 2, 2, 2))
    return lambda: T.tsum(T.mul(T.batch_norm(x, g, b, mean, var, training=False)[0], w)), [x, g, b]


def _wide_conv_case(rng):
    # more input channels than the channel-major threshold: the other conv path
    x, w = _param(rng, 2, 10, 5, 5), _param(rng, 3, 10, 3, 3)
    return _weighted(rng, lambda: T.conv2d(x, w, 2, 1), x, w)


def _weighted(rng, build, *params):
    """Reduce a tensor-valued op to a scalar with a fixed random weighting."""
    out_shape = build().shape
    w = rng.standard_normal(out_shape)
    return lambda: T.tsum(T.mul(build(), w)), list(params)


def _op_cases(rng) -> dict[str, Callable]:
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    bc = _param(rng, 4)
    pos = _param(rng, 3, 4, positive=True)
    x4 = _param(rng, 2, 3, 4, 4)
    w3 = _param(rng, 2, 3, 3, 3)
    m1, m2 = _param(rng, 2, 3, 4), _param(rng, 2, 4, 5)
    logits = _param(rng, 4, 5)
    dense = _param(rng, 2, 3, 2, 2)
    # keep relu/huber/max_pool inputs away from their kinks
    kinked = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.2, 2.0, (3, 4)), requires_grad=True)
    distinct = Tensor(rng.permutation(32).reshape(1, 2, 4, 4) * 0.1, requires_grad=True)
    labels = rng.integers(0, 5, 4)
    dense_labels = rng.integers(0, 3, (2, 2, 2))
    return {
        "add": lambda: _weighted(rng, lambda: T.add(a, bc), a, bc),
        "sub": lambda: _weighted(rng, lambda: T.sub(a, bc), a, bc),
        "mul": lambda: _weighted(rng, lambda: T.mul(a, b), a, b),
        "div": lambda: _weighted(rng, lambda: T.div(a, pos), a, pos),
        "scale": lambda: _weighted(rng, lambda: T.scale(a, -1.7), a),
        "pow": lambda: _weighted(rng, lambda: T.pow(pos, 3), pos),
        "matmul": lambda: _weighted(rng, lambda: T.matmul(m1, m2), m1, m2),
        "gram": lambda: _weighted(rng, lambda: T.gram(m1), m1),
        "transpose": lambda: _weighted(rng, lambda: T.transpose(x4, (1, 0, 3, 2)), x4),
        "reshape": lambda: _weighted(rng, lambda: T.reshape(a, (2, 6)), a),
        "getitem": lambda: _weighted(rng, lambda: T.getitem(x4, (slice(None), 1, slice(1, 3))), x4),
        "concat": lambda: _weighted(rng, lambda: T.concat([a, b], axis=1), a, b),
        "sum": lambda: _weighted(rng, lambda: T.tsum(x4, axis=(0, 2)), x4),
        "mean": lambda: _weighted(rng, lambda: T.mean(x4, axis=1, keepdims=True), x4),
        "relu": lambda: _weighted(rng, lambda: T.relu(kinked), kinked),
        "exp": lambda: _weighted(rng, lambda: T.exp(a), a),
        "log": lambda: _weighted(rng, lambda: T.log(pos), pos),
        "huber": lambda: _weighted(rng, lambda: T.huber(T.scale(kinked, 1.3), 1.0), kinked),
        "softmax": lambda: _weighted(rng, lambda: T.softmax(logits), logits),
        "log_softmax": lambda: _weighted(rng, lambda: T.log_softmax(logits), logits),
        "sq_frobenius": lambda: (lambda: T.sq_frobenius(a), [a]),
        "conv2d": lambda: _weighted(rng, lambda: T.conv2d(x4, w3, 1, 1), x4, w3),
        "batch_norm": lambda: _batch_norm_case(rng),
        "avg_pool2d": lambda: _weighted(rng, lambda: T.avg_pool2d(x4, 2), x4),
        "max_pool2d": lambda: _weighted(rng, lambda: T.max_pool2d(distinct, 2), distinct),
        "global_avg_pool": lambda: _weighted(rng, lambda: T.global_avg_pool(x4), x4),
        "upsample_nearest": lambda: _weighted(rng, lambda: T.upsample_nearest(x4, 2), x4),
        "cross_entropy": lambda: (
            lambda: T.add(T.cross_entropy(logits, labels), T.cross_entropy(dense, dense_labels)),
            [logits, dense],
        ),
    }


def _composite_cases(rng) -> dict[str, Callable]:
    def cc_through_transfer():
        # one [4, 3, 3] feature map per side
        layer = nn.TransferLayer(4, 4, rng=rng)
        f_s = _param(rng, 1, 4, 3, 3)
        f_t = Tensor(rng.standard_normal((1, 4, 3, 3)))
        params = [f_s] + layer.parameters()

        def fn():
            with nn.frozen_bn_stats():
                g_s = D.icc_matrix(nn.transfer_apply(layer, f_s)).values
            return D.loss_cc(g_s, D.icc_matrix(f_t).values)

        return fn, params

    def cc_grid():
        f_s, f_t = _param(rng, 2, 3, 4, 4), Tensor(rng.standard_normal((2, 3, 4, 4)))
        return (lambda: D.loss_cc_grid(f_s, f_t, D.GridSpec(2, 2))), [f_s]

    def cc_kernels():
        f_s, f_t = _param(rng, 2, 3, 2, 2), Tensor(rng.standard_normal((2, 3, 2, 2)))
        cfgs = [D.KernelCfg("gaussian", gaussian_sigma=2.0), D.KernelCfg("polynomial", poly_degree=2)]

        def fn():
            total = D.loss_cc(D.icc_matrix(f_s, cfgs[0]), D.icc_matrix(f_t, cfgs[0]), "smooth_l1")
            return T.add(total, D.loss_cc(D.icc_matrix(f_s, cfgs[1], True), D.icc_matrix(f_t, cfgs[1], True)))

        return fn, [f_s]

    def kd():
        t = Tensor(rng.standard_normal((3, 6)))
        s = _param(rng, 3, 6)
        return (lambda: D.loss_kd(t, s, 4.0)), [s]

    def ickd_c():
        spec_t = nn.ModelSpec(stage_widths=(4, 6), num_classes=3, input_shape=(2, 4, 4))
        spec_s = nn.ModelSpec(stage_widths=(2, 3), num_classes=3, input_shape=(2, 4, 4))
        teacher, student = nn.build_model(spec_t, 1).to(np.float64), nn.build_model(spec_s, 2).to(np.float64)
        layer = nn.TransferLayer(3, 6, rng=rng).to(np.float64)
        x = rng.standard_normal((2, 2, 4, 4))
        y = rng.integers(0, 3, 2)
        logits_t, taps_t = nn.forward_with_taps(teacher, x, nn.EVAL)
        cfg = D.DistillConfig(icc_normalize="none")
        named = dict(student.named_parameters())
        named.update({f"distill/{k}": p for k, p in layer.named_parameters()})

        def fn():
            with nn.frozen_bn_stats():
                logits_s, taps_s = nn.forward_with_taps(student, x, nn.TRAIN)
                return D.loss_ickd_c(logits_t, logits_s, taps_t, taps_s, {2: layer}, cfg, y)[0]

        return fn, named

    return {
        "loss_cc+transfer": cc_through_transfer,
        "loss_cc_grid": cc_grid,
        "loss_cc kernels": cc_kernels,
        "loss_kd": kd,
        "ickd_c toy model": ickd_c,
    }


def gradient_checks(seed: int = 0, eps: float = 1e-4) -> dict[str, oracle.GradCheckReport]:
    """Finite-difference reports for every differentiable op and composite loss."""
    rng = np.random.default_rng(seed)
    reports = {}
    with T.precision(np.float64):
        cases = _op_cases(rng)
        missing = set(T.DIFFERENTIABLE_OPS) - set(cases)
        if missing:
            raise AssertionError(f"ops without a gradient case: {sorted(missing)}")
        cases["batch_norm (eval)"] = lambda: _eval_batch_norm_case(rng)
        cases["conv2d (wide, strided)"] = lambda: _wide_conv_case(rng)
        cases.update(_composite_cases(rng))
        for name, make in cases.items():
            fn, params = make()
            reports[name] = oracle.grad_check(fn, params, eps=eps)
    return reports


def gradient_suite_error(seed: int = 0) -> tuple[float, str]:
    reports = gradient_checks(seed)
    name, worst = max(((k, r.worst) for k, r in reports.items()), key=lambda kv: kv[1])
    return worst, f"{len(reports)} cases, worst {name}"


def run_all() -> list[CheckResult]:
    return [
        _timed("icc vs naive", 1e-12, icc_oracle_error),
        _timed("kl vs naive", 1e-10, kl_oracle_error),
        _timed("kl closed form", 1e-12, kl_closed_form_error),
        _timed("finite-difference gradients", 1e-4, gradient_suite_error),
    ]
