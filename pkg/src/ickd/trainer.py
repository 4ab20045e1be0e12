"""Training loops: teacher pretraining, distillation, evaluation and metrics."""

from __future__ import annotations

import contextlib
import dataclasses
import io
import logging
import math
import os
from collections import OrderedDict
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import DataConfig, Dataset, batches, load_data
from .distill import DistillConfig, loss_ickd_c, loss_ickd_s
from .errors import ConfigError, NonFiniteError, ShapeError
from .nn import EVAL, TRAIN, Model, ModelSpec, TransferLayer, build_model, forward_with_taps, frozen_bn_stats

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "lr", "total", "task_loss", "kl", "cc", "eval")


# ---------------------------------------------------------------------------
# schedule and optimiser


@dataclasses.dataclass(frozen=True)
class LRSchedule:
    initial: float = 5e-2
    factor: float = 0.1
    milestones: tuple[int, ...] = (150, 180, 210)

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if not self.initial > 0:
            raise ConfigError("train.lr must be > 0")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("train.milestones must be strictly increasing")


def lr_at(schedule: LRSchedule, epoch: int) -> float:
    """Step decay: ``initial * factor ** (number of milestones <= epoch)``."""
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.initial * schedule.factor**passed


def sgd_update(params, grads, state, lr, momentum=0.9, nesterov=True, weight_decay=0.0, decay=None):
    """One SGD step with (optionally Nesterov) momentum, in place.

    ``params`` and ``grads`` are parallel sequences of Tensors and arrays;
    ``state`` maps ``id(param)`` to its velocity.  ``decay`` optionally
    gives a per-parameter flag for applying weight decay.
    """
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        lam = weight_decay if (decay is None or decay[i]) else 0.0
        d = g + lam * p.data if lam else g
        v = state.get(id(p))
        v = d.copy() if v is None else momentum * v + d
        state[id(p)] = v
        step = d + momentum * v if nesterov else v
        p.data = (p.data - lr * step).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, named_params, momentum=0.9, nesterov=True, weight_decay=5e-4):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.decay = [not (n.endswith(".gamma") or n.endswith(".beta")) for n in self.names]
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.state: dict[int, np.ndarray] = {}

    def step(self, tape: T.GradientTape, lr: float) -> None:
        grads = [tape.get(p) for p in self.params]
        sgd_update(self.params, grads, self.state, lr, self.momentum, self.nesterov, self.weight_decay, self.decay)


# ---------------------------------------------------------------------------
# configuration


PRESETS = {
    "cifar": {"lr": 5e-2, "milestones": (150, 180, 210), "epochs": 240, "batch_size": 64},
    "desk": {"lr": 5e-2, "milestones": (20, 30), "epochs": 40, "batch_size": 64},
}


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    model: ModelSpec = dataclasses.field(default_factory=ModelSpec)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    epochs: int = 40
    batch_size: int = 64
    lr: float = 5e-2
    lr_decay: float = 0.1
    milestones: tuple[int, ...] = (20, 30)
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    seed: int = 0
    augment: bool = False
    distill: DistillConfig | None = None
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("train.momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if self.threads < 1:
            raise ConfigError("train.threads must be >= 1")
        self.schedule  # validates lr and milestones
        if self.model.task != self.data.task:
            raise ConfigError(f"model.task {self.model.task!r} does not match data kind {self.data.kind!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    @property
    def schedule(self) -> LRSchedule:
        return LRSchedule(self.lr, self.lr_decay, self.milestones)


def _seed(seed: int, *stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), *stream]).generate_state(1)[0])


MODEL_STREAM, TRANSFER_STREAM, EPOCH_STREAM = 1, 2, 3


# ---------------------------------------------------------------------------
# metrics log


class MetricsLog:
    """Per-epoch rows of ``epoch,lr,total,task_loss,kl,cc,eval``."""

    def __init__(self, rows=None):
        self.rows: list[dict] = list(rows or [])

    def append(self, **row) -> None:
        self.rows.append({k: row[k] for k in METRICS_HEADER})

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, i) -> dict:
        return self.rows[i]

    def column(self, key: str) -> list:
        return [r[key] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(METRICS_HEADER) + "\n")
        for r in self.rows:
            buf.write(",".join(str(r["epoch"]) if k == "epoch" else repr(float(r[k])) for k in METRICS_HEADER))
            buf.write("\n")
        return buf.getvalue()

    def save(self, path) -> None:
        with open(os.fspath(path), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())

    @classmethod
    def load(cls, path) -> "MetricsLog":
        with open(os.fspath(path), encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            if tuple(header) != METRICS_HEADER:
                raise ConfigError(f"{path}: unexpected metrics header {header}")
            rows = []
            for line in fh:
                vals = line.strip().split(",")
                row = {k: float(v) for k, v in zip(header, vals)}
                row["epoch"] = int(row["epoch"])
                rows.append(row)
        return cls(rows)


@dataclasses.dataclass
class RunResult:
    model: Model
    checkpoint: Checkpoint
    best_checkpoint: Checkpoint
    metrics: MetricsLog
    transfer_layers: dict[int, TransferLayer] = dataclasses.field(default_factory=dict)

    @property
    def final_eval(self) -> float:
        return self.metrics.rows[-1]["eval"]

    @property
    def best_eval(self) -> float:
        return max(self.metrics.column("eval"))


# ---------------------------------------------------------------------------
# evaluation


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; ``argmax`` breaks ties toward the lowest class index."""
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def confusion_matrix(pred: np.ndarray, target: np.ndarray, num_classes: int) -> np.ndarray:
    idx = np.asarray(target, dtype=np.int64).ravel() * num_classes + np.asarray(pred, dtype=np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou_from_confusion(cm: np.ndarray) -> float:
    """Mean IoU over classes present in the ground truth or the prediction."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    if not present.any():
        return 1.0
    return float(np.mean(tp[present] / denom[present]))


def _predict(model: Model, ds: Dataset, batch_size: int = 250):
    with T.no_grad():
        for x, y in batches(ds, batch_size, shuffle=False):
            logits, _ = forward_with_taps(model, x, EVAL)
            yield logits.data, y


def evaluate_cls(model: Model, ds: Dataset, batch_size: int = 250) -> float:
    if model.spec.task != "classification" or ds.task != "classification":
        raise ConfigError("evaluate_cls needs a classification model and dataset")
    correct = 0
    for logits, y in _predict(model, ds, batch_size):
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return correct / len(ds)


def train_accuracy(model: Model, ds: Dataset, batch_size: int = 250) -> float:
    """Accuracy with batch statistics in BN, as the optimiser sees the model.

    Running statistics are left untouched.  Early in training this can be
    far above :func:`evaluate_cls`, whose running statistics lag the weights.
    """
    if model.spec.task != "classification":
        raise ConfigError("train_accuracy needs a classification model")
    correct = 0
    with T.no_grad(), frozen_bn_stats():
        for x, y in batches(ds, batch_size, shuffle=False):
            logits, _ = forward_with_taps(model, x, TRAIN)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    return correct / len(ds)


def evaluate_seg(model: Model, ds: Dataset, batch_size: int = 250) -> float:
    if model.spec.task != "dense" or ds.task != "dense":
        raise ConfigError("evaluate_seg needs a dense-prediction model and dataset")
    k = model.spec.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    for logits, y in _predict(model, ds, batch_size):
        cm += confusion_matrix(np.argmax(logits, axis=1), y, k)
    return miou_from_confusion(cm)


def evaluate(model: Model, ds: Dataset) -> float:
    return evaluate_cls(model, ds) if model.spec.task == "classification" else evaluate_seg(model, ds)


# ---------------------------------------------------------------------------
# training loops


def _check_data(cfg: TrainConfig, train: Dataset, test: Dataset) -> None:
    if train.image_shape != cfg.model.input_shape:
        raise ConfigError(f"data images {train.image_shape} do not match model.input_shape {cfg.model.input_shape}")
    if train.num_classes != cfg.model.num_classes:
        raise ConfigError(f"data has {train.num_classes} classes, model.num_classes is {cfg.model.num_classes}")
    if train.task != cfg.model.task or test.task != cfg.model.task:
        raise ConfigError("dataset task does not match the model task")


def _fit(
    cfg: TrainConfig,
    student: Model,
    train: Dataset,
    test: Dataset,
    loss_fn: Callable,
    extra: "OrderedDict[str, T.Tensor]",
    meta: dict,
    transfer_layers=None,
) -> RunResult:
    named = list(student.named_parameters()) + list(extra.items())
    opt = SGD(named, cfg.momentum, cfg.nesterov, cfg.weight_decay)
    metrics = MetricsLog()
    best, best_eval = None, -math.inf
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.schedule, epoch)
        sums = np.zeros(4)
        steps = 0
        for idx, x, y in _indexed_batches(train, cfg, epoch):
            total, parts = loss_fn(idx, x, y)
            values = (float(total.data), float(parts["task"].data), float(parts["kl"].data), float(parts["cc"].data))
            if not all(math.isfinite(v) for v in values):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {steps}: {values}")
            opt.step(T.backward(total), lr)
            sums += values
            steps += 1
        mean = sums / steps
        score = evaluate(student, test)
        metrics.append(epoch=epoch, lr=lr, total=mean[0], task_loss=mean[1], kl=mean[2], cc=mean[3], eval=score)
        log.info("epoch %d lr %.2e total %.4f eval %.4f", epoch, lr, mean[0], score)
        if score > best_eval:
            best_eval = score
            best = Checkpoint.from_model(student, transfer_layers, **meta, epoch=epoch, eval=score)
    final = Checkpoint.from_model(student, transfer_layers, **meta, epoch=cfg.epochs - 1, eval=metrics[-1]["eval"])
    return RunResult(student, final, best, metrics, dict(transfer_layers or {}))


def _indexed_batches(ds: Dataset, cfg: TrainConfig, epoch: int):
    epoch_seed = _seed(cfg.seed, EPOCH_STREAM, epoch)
    return batches(ds, cfg.batch_size, epoch_seed, shuffle=True, augment=cfg.augment, with_indices=True)


def _resolve_data(cfg: TrainConfig, data):
    train, test = data if data is not None else load_data(cfg.data)
    _check_data(cfg, train, test)
    return train, test


def train_teacher(cfg: TrainConfig, data: tuple[Dataset, Dataset] | None = None) -> RunResult:
    """Plain supervised training (cross-entropy, per pixel for dense models).

    ``data`` optionally supplies an already loaded ``(train, test)`` pair.
    """
    if cfg.distill is not None:
        raise ConfigError("train_teacher does not take a distill section")
    train, test = _resolve_data(cfg, data)
    model = build_model(cfg.model, _seed(cfg.seed, MODEL_STREAM))
    zero = T.Tensor._wrap(np.zeros((), dtype=np.float32))

    def loss_fn(idx, x, y):
        logits, _ = forward_with_taps(model, x, TRAIN)
        ce = T.cross_entropy(logits, y)
        return ce, {"task": ce, "kl": zero, "cc": zero}

    meta = {"seed": cfg.seed, "dataset": train.fingerprint(), "role": "teacher"}
    with _threads(cfg):
        return _fit(cfg, model, train, test, loss_fn, OrderedDict(), meta)


@contextlib.contextmanager
def _threads(cfg: TrainConfig):
    """Cap BLAS threads; ``ICKD_THREADS`` overrides ``train.threads``."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(os.environ.get("ICKD_THREADS", cfg.threads))):
        yield


def _teacher_cache(teacher: Model, ds: Dataset, stages, batch_size: int = 250):
    """Eval-mode teacher logits and taps for every training image, computed once."""
    logits, taps = [], {s: [] for s in stages}
    with T.no_grad():
        for x, _ in batches(ds, batch_size, shuffle=False):
            lg, tp = forward_with_taps(teacher, x, EVAL)
            logits.append(lg.data)
            for s in stages:
                taps[s].append(tp[s].data)
    return np.concatenate(logits), {s: np.concatenate(v) for s, v in taps.items()}


def check_distill_compat(teacher: ModelSpec, student: ModelSpec, dcfg: DistillConfig) -> tuple[int, ...]:
    """Validate stage selection, spatial agreement and grid divisibility."""
    if teacher.task != student.task:
        raise ConfigError("teacher and student must solve the same task")
    if teacher.num_stages != student.num_stages:
        raise ConfigError("teacher and student need the same number of stages")
    if teacher.input_shape != student.input_shape or teacher.num_classes != student.num_classes:
        raise ConfigError("teacher and student disagree on input shape or class count")
    stages = dcfg.resolve_stages(student.num_stages)
    for s in stages:
        ct, ht, wt = teacher.tap_shape(s)
        cs, hs, ws = student.tap_shape(s)
        if (ht, wt) != (hs, ws):
            raise ConfigError(f"stage {s}: teacher {ht}x{wt} and student {hs}x{ws} taps differ spatially")
        if not dcfg.use_transfer_layer and ct != cs:
            raise ConfigError(
                f"stage {s}: channel counts differ ({cs} vs {ct}) and distill.use_transfer_layer is false"
            )
        if student.task == "dense" and (ht % dcfg.grid.n or wt % dcfg.grid.m):
            raise ConfigError(f"distill.grid {dcfg.grid.n}x{dcfg.grid.m} does not divide the stage-{s} feature {ht}x{wt}")
    return stages


def distill(
    cfg: TrainConfig,
    teacher_ckpt: Checkpoint | str | os.PathLike,
    data: tuple[Dataset, Dataset] | None = None,
) -> RunResult:
    """Train a student under the ICKD-C (classification) or ICKD-S (dense) objective.

    The teacher runs in eval mode without gradients and is never updated.
    Transfer layers are trained with the student and saved under the
    ``distill/`` namespace of the checkpoint.
    """
    if cfg.distill is None:
        raise ConfigError("distill needs a distill section")
    if not isinstance(teacher_ckpt, Checkpoint):
        if not os.path.exists(os.fspath(teacher_ckpt)):
            raise FileNotFoundError(f"teacher checkpoint not found: {teacher_ckpt}")
        teacher_ckpt = Checkpoint.load(teacher_ckpt)
    dcfg = cfg.distill
    teacher = teacher_ckpt.build()
    stages = check_distill_compat(teacher.spec, cfg.model, dcfg)
    train, test = _resolve_data(cfg, data)
    student = build_model(cfg.model, _seed(cfg.seed, MODEL_STREAM))

    transfer: dict[int, TransferLayer] = {}
    extra: OrderedDict[str, T.Tensor] = OrderedDict()
    if dcfg.use_transfer_layer:
        for s in stages:
            rng = np.random.default_rng(_seed(cfg.seed, TRANSFER_STREAM, s))
            layer = TransferLayer(cfg.model.tap_shape(s)[0], teacher.spec.tap_shape(s)[0], rng=rng)
            transfer[s] = layer
            for name, p in layer.named_parameters():
                extra[f"distill/stage{s}.{name}"] = p

    cached = None if cfg.augment else _teacher_cache(teacher, train, stages)
    classification = cfg.model.task == "classification"

    def teacher_outputs(idx, x):
        if cached is not None:
            return cached[0][idx], {s: T.Tensor._wrap(cached[1][s][idx]) for s in stages}
        with T.no_grad():
            lg, tp = forward_with_taps(teacher, x, EVAL)
        return lg.data, {s: tp[s] for s in stages}

    def loss_fn(idx, x, y):
        logits_t, taps_t = teacher_outputs(idx, x)
        logits_s, taps_s = forward_with_taps(student, x, TRAIN)
        if classification:
            return loss_ickd_c(T.Tensor._wrap(logits_t), logits_s, taps_t, taps_s, transfer, dcfg, y)
        return loss_ickd_s(logits_s, y, taps_t, taps_s, transfer, dcfg)

    meta = {
        "seed": cfg.seed,
        "dataset": train.fingerprint(),
        "role": "student",
        "teacher": teacher_ckpt.checksum()[:16],
    }
    with _threads(cfg):
        return _fit(cfg, student, train, test, loss_fn, extra, meta, transfer)
