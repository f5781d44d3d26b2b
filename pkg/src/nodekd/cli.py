"""Command-line entry point: ``nodekd <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
Every command writes its resolved configuration to ``config.resolved.txt``
in the output directory; passing that file back via ``--config`` reruns the
command bit-identically.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, evaluate_under_attack
from .autodiff import NumericFault
from .checkpoint import CheckpointError, atomic_write_bytes, load_checkpoint, save_checkpoint
from .config import COMMANDS, ConfigError, RunConfig, keys_for
from .data import DataFormatError, Dataset, channel_stats, gen_synthetic, load_csv, load_idx, train_test_split
from .distill import DistillConfig, TrainingDiverged, distill_student, train_plain, train_teacher
from . import experiments
from .models import StudentNodeNet, TeacherNet, init_he
from .odeint import SolverDivergence
from .rng import stream
from .svgplot import line_plot

log = logging.getLogger("nodekd")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """Inconsistent inputs discovered after the configuration parsed cleanly."""


def _write_text(path: Path, text: str):
    atomic_write_bytes(path, text.encode())


def _write_json(path: Path, doc: dict):
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _metadata(cfg: RunConfig) -> dict:
    # output_dir is left out so that reruns into another directory match
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.values.items() if k != "output_dir"}


# data -------------------------------------------------------------------------

def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    kind = cfg.dataset
    if kind in ("moons", "spirals", "gaussians"):
        ds = gen_synthetic(kind, cfg.n_samples, cfg.noise, seed=cfg.seed, classes=cfg.classes)
    elif kind == "idx":
        ds = load_idx(cfg.images_path, cfg.labels_path, cfg.num_classes)
    else:
        shape = tuple(int(s) for s in cfg.image_shape.split(","))
        ds = load_csv(cfg.csv_path, shape, cfg.num_classes)
    return train_test_split(ds, cfg.test_fraction, seed=cfg.seed)


def _model_kwargs(cfg: RunConfig, train: Dataset) -> dict:
    kw = {"input_shape": train.images.shape[1:], "num_classes": train.num_classes, "stem": cfg.stem}
    if cfg.normalize:
        stats = channel_stats(train)
        kw.update(input_mean=stats.mean, input_std=stats.std)
    return kw


def _student(cfg: RunConfig, train: Dataset) -> StudentNodeNet:
    net = StudentNodeNet(**_model_kwargs(cfg, train), width=cfg.width, t1=cfg.t1, solver=cfg.solver,
                         rtol=cfg.rtol, atol=cfg.atol, n_steps=cfg.n_steps)
    return init_he(net, stream(cfg.seed, "init"))


def _finish_training(cfg: RunConfig, out: Path, model, record, extra: dict, started: float):
    meta = {**_metadata(cfg), **extra}
    save_checkpoint(model, out / "model.nodk",
                    {"command": cfg.command, **extra, "seed": cfg.seed, "best_epoch": record.best_epoch})
    _write_text(out / "metrics.csv", record.to_csv())
    _write_text(out / "metrics.json", record.to_json(meta) + "\n")
    _write_json(out / "timing.json", {"total_seconds": time.perf_counter() - started,
                                      "epoch_seconds": record.wall_times()})
    log.info("best test accuracy %.4f at epoch %d; outputs in %s", record.best_test_acc, record.best_epoch, out)


# commands ---------------------------------------------------------------------

def cmd_train_teacher(cfg: RunConfig, out: Path) -> int:
    started = time.perf_counter()
    train, test = load_data(cfg)
    net = TeacherNet.from_preset(cfg.teacher_depth, **_model_kwargs(cfg, train), width=cfg.teacher_width)
    net = init_he(net, stream(cfg.seed, "teacher-init"))
    net, record = train_teacher(net, train, test, cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                                seed=cfg.seed, momentum=cfg.momentum, augment=cfg.augment,
                                optimizer=cfg.optimizer)
    _finish_training(cfg, out, net, record, {"label": "teacher"}, started)
    return EXIT_OK


def _distill_config(cfg: RunConfig, lam: float, temperature: float) -> DistillConfig:
    return DistillConfig(temperature=temperature, lam=lam, epochs=cfg.epochs, batch_size=cfg.batch_size,
                         optimizer=cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum, seed=cfg.seed,
                         augment=cfg.augment, augment_pad=cfg.augment_pad, augment_flip=cfg.augment_flip)


def cmd_train_plain(cfg: RunConfig, out: Path) -> int:
    started = time.perf_counter()
    train, test = load_data(cfg)
    net, record = train_plain(_student(cfg, train), train, test, _distill_config(cfg, 0.0, 1.0))
    _finish_training(cfg, out, net, record, {"label": "plain", "t1": cfg.t1}, started)
    return EXIT_OK


def cmd_distill(cfg: RunConfig, out: Path) -> int:
    started = time.perf_counter()
    train, test = load_data(cfg)
    teacher = None
    if cfg.lam > 0:
        teacher, _ = load_checkpoint(cfg.teacher_checkpoint, expected_kind="teacher")
        if teacher.num_classes != train.num_classes:
            raise InputError(f"teacher predicts {teacher.num_classes} classes, data has {train.num_classes}")
        if teacher.input_shape != tuple(train.images.shape[1:]):
            raise InputError(f"teacher expects inputs {teacher.input_shape}, data has {train.images.shape[1:]}")
    net, record = distill_student(_student(cfg, train), train, test, teacher,
                                  _distill_config(cfg, cfg.lam, cfg.temperature))
    label = "distilled" if cfg.lam > 0 else "plain"
    extra = {"label": label, "temperature": cfg.temperature, "lam": cfg.lam, "t1": cfg.t1}
    _finish_training(cfg, out, net, record, extra, started)
    return EXIT_OK


def cmd_attack(cfg: RunConfig, out: Path) -> int:
    started = time.perf_counter()
    model, meta = load_checkpoint(cfg.checkpoint)
    train, test = load_data(cfg)
    data = test if cfg.eval_split == "test" else train
    if cfg.max_samples:
        data = data.subset(np.arange(min(cfg.max_samples, len(data))))
    if model.num_classes != data.num_classes:
        raise InputError(f"model predicts {model.num_classes} classes, data has {data.num_classes}")
    if model.input_shape != tuple(data.images.shape[1:]):
        raise InputError(f"model expects inputs {model.input_shape}, data has {data.images.shape[1:]}")
    base = AttackConfig(eps=0.0, step_size=cfg.step_size, steps=cfg.steps, momentum=cfg.mu,
                        random_start=cfg.random_start, seed=cfg.seed)
    report = evaluate_under_attack(model, data, cfg.attack, cfg.eps_grid, base, cfg.attack_batch_size)
    doc_meta = {**_metadata(cfg), "model_kind": model.kind, "model_label": meta.get("label", model.kind)}
    _write_text(out / "report.csv", report.to_csv())
    _write_text(out / "report.json", report.to_json(doc_meta) + "\n")
    eps = [r.eps for r in report.results]
    svg = line_plot({f"{cfg.attack} attacked": (eps, [r.attacked_acc for r in report.results]),
                     "clean": (eps, [r.clean_acc for r in report.results])},
                    title=f"{meta.get('label', model.kind)} under {cfg.attack}",
                    xlabel="epsilon", ylabel="accuracy", ylim=(0.0, 1.0))
    _write_text(out / "accuracy_vs_eps.svg", svg)
    _write_json(out / "timing.json", {"total_seconds": time.perf_counter() - started})
    for r in report.results:
        log.info("eps %.5f  clean %.4f  attacked %.4f", r.eps, r.clean_acc, r.attacked_acc)
    return EXIT_OK


def cmd_reproduce(cfg: RunConfig, out: Path) -> int:
    started = time.perf_counter()
    result = experiments.run_claim(cfg.claim, cfg.seeds, cfg.first_seed, experiments.DEFAULT_PROTOCOL)
    _write_text(out / "summary.md", result.to_markdown())
    _write_json(out / "summary.json", {
        "claim": result.claim, "columns": list(result.columns), "rows": [list(r) for r in result.rows],
        "checks": result.checks, "verdict": result.verdict})
    _write_json(out / "timing.json", {"total_seconds": time.perf_counter() - started})
    print(result.to_markdown())
    return EXIT_OK


HANDLERS = {"train-teacher": cmd_train_teacher, "train-plain": cmd_train_plain, "distill": cmd_distill,
            "attack": cmd_attack, "reproduce": cmd_reproduce}


HELP = {"train-teacher": "train a residual teacher with hard labels",
        "train-plain": "train a Neural ODE student without distillation",
        "distill": "train a Neural ODE student from a teacher checkpoint",
        "attack": "sweep an attack over an epsilon grid against a checkpoint",
        "reproduce": "run a paired multi-seed claim and print a summary table"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nodekd", description="Neural ODE distillation and robustness lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    # also accepted after the command name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="only print warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        keys = ", ".join(keys_for(name))
        p = sub.add_parser(name, help=HELP[name], parents=[common],
                           epilog=f"config keys: {keys}")
        p.add_argument("--config", type=Path, help="key = value file (e.g. a config.resolved.txt)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one key; repeatable")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", force=True)
    try:
        text = None
        if args.config is not None:
            try:
                text = args.config.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
        cfg = RunConfig.from_sources(args.command, text, args.overrides, origin=str(args.config))
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "config.resolved.txt", cfg.dumps())
        return HANDLERS[args.command](cfg, out)
    except (ConfigError, InputError, CheckpointError, DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NumericFault, SolverDivergence) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


__all__ = ["main", "build_parser", "load_data", "HANDLERS", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERIC"]
