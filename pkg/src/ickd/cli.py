"""Command-line entry point.

Commands::

    ickd train-teacher --config run.json --out teacher.ckpt --metrics teacher.csv
    ickd distill       --config run.json --teacher teacher.ckpt --out student.ckpt --metrics student.csv
    ickd eval          --ckpt model.ckpt --data data.npz
    ickd icc           --ckpt model.ckpt --data data.npz --stage 3 --out g.csv --heatmap g.pgm
    ickd synth-data    --kind synth_cls --out data.npz
    ickd verify

A run config is one JSON document with the sections ``model``,
``teacher_model``, ``data``, ``train`` and ``distill``.  Unknown keys are
rejected.  ``--set section.key=value`` (value in JSON syntax) and the
shortcut flags override the file; precedence is flag > config > default.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import types
import typing

import numpy as np

from . import data as data_mod
from . import distill as D
from . import tensor as T
from .checkpoint import Checkpoint
from .errors import ConfigError, IckdError
from .nn import EVAL, ModelSpec, forward_with_taps
from .trainer import PRESETS, TrainConfig, check_distill_compat, distill, evaluate, train_teacher

log = logging.getLogger("ickd")

# keys of the AdamW recipe; recognised so they can be refused explicitly
RESERVED_TRAIN_KEYS = ("optimizer", "adamw", "betas", "eps", "amsgrad")
TRAIN_KEYS = (
    "preset",
    "epochs",
    "batch_size",
    "lr",
    "lr_decay",
    "milestones",
    "momentum",
    "nesterov",
    "weight_decay",
    "seed",
    "augment",
    "threads",
)
SECTIONS = ("model", "teacher_model", "data", "train", "distill")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    teacher_model: ModelSpec | None
    data: data_mod.DataConfig
    train: dict
    distill: D.DistillConfig | None

    def train_config(self, role: str = "student") -> TrainConfig:
        """TrainConfig for the teacher (``role="teacher"``) or the student."""
        model = self.teacher_model if role == "teacher" and self.teacher_model else self.model
        train = dict(self.train)
        preset = train.pop("preset")
        cfg = {**PRESETS[preset], **train}
        return TrainConfig(
            model=model,
            data=self.data,
            distill=self.distill if role == "student" else None,
            **cfg,
        )


# ---------------------------------------------------------------------------
# strict parsing


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, path: str):
    """Check ``value`` against the annotation ``tp``; lists become tuples."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if tp is D.GridSpec and isinstance(value, list):
            if len(value) != 2:
                raise ConfigError(f"{path}: grid must be [n, m]")
            value = {"n": value[0], "m": value[1]}
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {json.dumps(value)}")
        item = args[0]
        if len(args) != 2 or args[1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {json.dumps(value)}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {json.dumps(value)}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {json.dumps(value)}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {json.dumps(value)}")
        return value
    raise ConfigError(f"{path}: unsupported type {_type_name(tp)}")


def _build(cls, obj, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {json.dumps(obj)}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in obj:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}") for k, v in obj.items()}
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


_TRAIN_HINTS = {
    "preset": str,
    "milestones": tuple[int, ...],
    **{k: v for k, v in typing.get_type_hints(TrainConfig).items() if k in TRAIN_KEYS},
}


def _parse_train(obj) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"train: expected an object, got {json.dumps(obj)}")
    out = {"preset": "desk"}
    for key, value in obj.items():
        if key in RESERVED_TRAIN_KEYS:
            raise ConfigError(f"train.{key}: AdamW is not implemented; only SGD is supported")
        if key not in TRAIN_KEYS:
            raise ConfigError(f"train.{key}: unknown key")
        out[key] = _coerce(value, _TRAIN_HINTS[key], f"train.{key}")
    if out["preset"] not in PRESETS:
        raise ConfigError(f"train.preset: unknown preset {out['preset']!r}; choose from {sorted(PRESETS)}")
    return out


def _loads(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _apply_overrides(doc: dict, overrides) -> dict:
    doc = json.loads(json.dumps(doc))
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings need no quotes on the command line
        *parents, leaf = key.split(".")
        node = doc
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        node[leaf] = value
    return doc


def config_from_dict(doc: dict) -> RunConfig:
    """Validate a parsed document and apply defaults."""
    for key in doc:
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown section; expected one of {', '.join(SECTIONS)}")
    train = _parse_train(doc.get("train", {}))
    model = _build(ModelSpec, doc.get("model", {}), "model")
    teacher = doc.get("teacher_model")
    teacher = None if teacher is None else _build(ModelSpec, teacher, "teacher_model")
    data_doc = dict(doc.get("data", {}))
    if data_doc.get("seed") is None:
        # one seed drives everything unless the dataset is pinned explicitly
        data_doc["seed"] = train.get("seed", 0)
    data = _build(data_mod.DataConfig, data_doc, "data")
    dist = doc.get("distill")
    dist = None if dist is None else _build(D.DistillConfig, dist, "distill")
    cfg = RunConfig(model, teacher, data, train, dist)
    _precheck(cfg)
    return cfg


def _precheck(cfg: RunConfig) -> None:
    """Cross-section checks that need no data or checkpoint."""
    cfg.train_config("student" if cfg.distill is not None else "teacher")
    if cfg.distill is None:
        return
    stages = cfg.distill.resolve_stages(cfg.model.num_stages)
    if cfg.teacher_model is not None:
        check_distill_compat(cfg.teacher_model, cfg.model, cfg.distill)
    elif cfg.model.task == "dense":
        grid = cfg.distill.grid
        for s in stages:
            _, h, w = cfg.model.tap_shape(s)
            if h % grid.n or w % grid.m:
                raise ConfigError(f"distill.grid {grid.n}x{grid.m} does not divide the stage-{s} feature {h}x{w}")


def parse_config(source=None, overrides=None) -> RunConfig:
    """Read a run config from a path, ``-``/``None`` (stdin) or a dict."""
    if isinstance(source, dict):
        doc = source
    elif source is None or source == "-":
        doc = _loads(sys.stdin.read())
    else:
        with open(os.fspath(source), encoding="utf-8") as fh:
            doc = _loads(fh.read())
    return config_from_dict(_apply_overrides(doc, overrides))


def _defaults_text() -> str:
    def fields(cls, prefix, skip=()):
        out = []
        for f in dataclasses.fields(cls):
            if f.name in skip:
                continue
            if f.default is not dataclasses.MISSING:
                default = f.default
            else:
                default = f.default_factory()
            if dataclasses.is_dataclass(default):
                out += fields(type(default), f"{prefix}.{f.name}")
                continue
            if isinstance(default, tuple):
                default = list(default)
            out.append(f"  {prefix}.{f.name} = {json.dumps(default)}")
        return out

    lines = ["config keys and defaults:"]
    lines += fields(ModelSpec, "model")
    lines.append("  teacher_model.* = same keys as model (default: null, use model)")
    lines.append("  data.seed = null  (follows train.seed)")
    lines += fields(data_mod.DataConfig, "data", skip=("seed",))
    lines.append('  train.preset = "desk"  (' + "; ".join(f"{k}: {json.dumps(v)}" for k, v in PRESETS.items()) + ")")
    train_fields = [f for f in dataclasses.fields(TrainConfig) if f.name in TRAIN_KEYS]
    for f in train_fields:
        default = f.default
        if isinstance(default, tuple):
            default = list(default)
        lines.append(f"  train.{f.name} = {json.dumps(default)}")
    lines.append("  distill = null (no distillation); when present:")
    lines += fields(D.DistillConfig, "distill")
    lines.append(f"  reserved, rejected: {', '.join('train.' + k for k in RESERVED_TRAIN_KEYS)}")
    lines.append("environment: ICKD_THREADS overrides train.threads")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands


def _load_eval_data(args, spec: ModelSpec) -> data_mod.Dataset:
    if args.data:
        path = args.data
        if not os.path.exists(path):
            raise FileNotFoundError(f"data file not found: {path}")
        if path.endswith(".npz"):
            _, test = data_mod.load_npz(path)
        else:
            test = data_mod.load_cifar(path, args.variant, "test")
        return test
    if args.config:
        _, test = data_mod.load_data(parse_config(args.config, args.set).data)
        return test
    raise ConfigError("pass --data or --config to choose the evaluation data")


def _metric_name(spec: ModelSpec) -> str:
    return "acc" if spec.task == "classification" else "miou"


def _finish(result, args) -> None:
    if args.out:
        result.checkpoint.save(args.out)
    if args.best_out:
        result.best_checkpoint.save(args.best_out)
    if args.metrics:
        result.metrics.save(args.metrics)
    name = _metric_name(result.model.spec)
    print(f"best_{name}={result.best_eval!r}")
    print(f"{name}={result.final_eval!r}")


def cmd_train_teacher(args) -> int:
    cfg = parse_config(args.config, _flag_overrides(args))
    _finish(train_teacher(cfg.train_config("teacher")), args)
    return 0


def cmd_distill(args) -> int:
    cfg = parse_config(args.config, _flag_overrides(args))
    if cfg.distill is None:
        cfg = dataclasses.replace(cfg, distill=D.DistillConfig())
    teacher = args.teacher
    if not os.path.exists(teacher):
        raise FileNotFoundError(f"teacher checkpoint not found: {teacher}")
    ckpt = Checkpoint.load(teacher)
    if cfg.teacher_model is not None and cfg.teacher_model != ckpt.spec:
        raise ConfigError("teacher_model does not match the architecture stored in --teacher")
    _finish(distill(cfg.train_config("student"), ckpt), args)
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.build()
    ds = _load_eval_data(args, model.spec)
    print(f"{_metric_name(model.spec)}={evaluate(model, ds)!r}")
    return 0


def icc_of_dataset(model, ds: data_mod.Dataset, stage: int, limit: int | None, cfg: D.KernelCfg) -> np.ndarray:
    """Mean ICC matrix of one stage's eval-mode features over ``limit`` images."""
    n = len(ds) if limit is None else min(limit, len(ds))
    total, seen = None, 0
    with T.no_grad():
        for x, _ in data_mod.batches(ds.subset(np.arange(n)), 100, shuffle=False):
            _, taps = forward_with_taps(model, x, EVAL)
            if stage not in taps:
                raise ConfigError(f"--stage {stage} outside 1..{len(taps)}")
            g = D.icc_matrix(taps[stage], cfg).values.data.astype(np.float64)
            total = g.sum(axis=0) if total is None else total + g.sum(axis=0)
            seen += g.shape[0]
    return total / seen


def write_icc_csv(matrix: np.ndarray, path) -> None:
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        for row in matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_pgm(matrix: np.ndarray, path) -> None:
    """Plain (P2) 8-bit greyscale image, min-max normalised."""
    lo, hi = float(matrix.min()), float(matrix.max())
    span = hi - lo
    pixels = np.zeros(matrix.shape, dtype=int) if span == 0 else np.rint((matrix - lo) / span * 255).astype(int)
    rows, cols = matrix.shape
    with open(os.fspath(path), "w", encoding="ascii") as fh:
        fh.write(f"P2\n{cols} {rows}\n255\n")
        for row in pixels:
            fh.write(" ".join(str(v) for v in row) + "\n")


def cmd_icc(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.build()
    ds = _load_eval_data(args, model.spec)
    g = icc_of_dataset(model, ds, args.stage, args.limit, D.KernelCfg(kind=args.kernel))
    write_icc_csv(g, args.out)
    if args.heatmap:
        write_pgm(g, args.heatmap)
    print(f"channels={g.shape[0]} images={min(args.limit or len(ds), len(ds))}")
    return 0


def cmd_synth_data(args) -> int:
    if args.kind == "synth_cls":
        cfg = data_mod.DataConfig(
            kind="synth_cls", seed=args.seed, num_classes=args.num_classes,
            per_class=args.per_class, test_per_class=args.test_per_class, noise=args.noise,
            class_contrast=args.class_contrast,
        )
    else:
        cfg = data_mod.DataConfig(
            kind="synth_seg", seed=args.seed, num_classes=args.num_classes,
            count=args.count, test_count=args.test_count,
        )
    train, test = data_mod.load_data(cfg)
    if args.format == "cifar":
        if args.kind != "synth_cls":
            raise ConfigError("the CIFAR layout holds image labels only; use --format npz for synth_seg")
        variant = "cifar10" if args.num_classes <= 10 else "cifar100"
        data_mod.save_cifar(train, args.out, variant)
        data_mod.save_cifar(test, args.out + ".test", variant)
        print(f"wrote {args.out} and {args.out}.test")
    else:
        data_mod.save_npz(args.out, train, test)
        print(f"wrote {args.out}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all()
    for r in results:
        print(r.line(), flush=True)
    ok = all(r.passed for r in results)
    print("ALL PASS" if ok else "SOME CHECKS FAILED")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing


def _flag_overrides(args) -> list[str]:
    out = list(args.set or ())
    for flag, key in (
        ("seed", "train.seed"),
        ("epochs", "train.epochs"),
        ("lr", "train.lr"),
        ("preset", "train.preset"),
        ("threads", "train.threads"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            out.append(f"{key}={json.dumps(value)}")
    return out


def _add_run_flags(p: argparse.ArgumentParser, teacher: bool) -> None:
    p.add_argument("--config", help="run config (JSON); '-' reads stdin")
    if teacher:
        p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--out", help="write the final checkpoint here")
    p.add_argument("--best-out", help="write the best-epoch checkpoint here")
    p.add_argument("--metrics", help="write the per-epoch metrics CSV here")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")
    p.add_argument("--lr", type=float, help="overrides train.lr")
    p.add_argument("--preset", choices=sorted(PRESETS), help="overrides train.preset")
    p.add_argument("--threads", type=int, help="overrides train.threads")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset file: .npz from synth-data, else a CIFAR binary batch")
    p.add_argument("--variant", default="cifar10", choices=("cifar10", "cifar100"))
    p.add_argument("--config", help="take the data section of this run config instead of --data")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ickd",
        description="Inter-channel correlation knowledge distillation.",
        epilog=_defaults_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("train-teacher", help="supervised training of a model",
                       epilog=_defaults_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_run_flags(p, teacher=False)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student against a teacher checkpoint",
                       epilog=_defaults_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_run_flags(p, teacher=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="accuracy or mIoU of a checkpoint")
    p.add_argument("--ckpt", required=True)
    _add_data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("icc", help="export a stage's mean ICC matrix as CSV and PGM")
    p.add_argument("--ckpt", required=True)
    _add_data_flags(p)
    p.add_argument("--stage", type=int, required=True, help="1-based stage index")
    p.add_argument("--out", required=True, help="CSV output, one row per channel")
    p.add_argument("--heatmap", help="PGM (P2) output")
    p.add_argument("--limit", type=int, default=100, help="number of images averaged (default 100)")
    p.add_argument("--kernel", default="inner", choices=D.KERNEL_KINDS)
    p.set_defaults(func=cmd_icc)

    p = sub.add_parser("synth-data", help="write a synthetic dataset")
    p.add_argument("--kind", default="synth_cls", choices=("synth_cls", "synth_seg"))
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="npz", choices=("npz", "cifar"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--class-contrast", type=float, default=1.0, help="unique share of each class pattern")
    p.add_argument("--noise", type=float, default=0.35)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--test-count", type=int, default=400)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.set_defaults(func=cmd_verify)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "synth-data" and args.num_classes is None:
        args.num_classes = 10 if args.kind == "synth_cls" else 4
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (IckdError, OSError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
