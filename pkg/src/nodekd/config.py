"""Plain-text ``key=value`` run configuration.

Each command accepts a fixed set of keys. Values are parsed and validated
before any compute; unknown keys, keys that do not apply to the command and
malformed values all raise :class:`ConfigError`.

Files hold one ``key = value`` per line; ``#`` starts a comment. A resolved
snapshot written by :meth:`RunConfig.dumps` reproduces the run exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

from .attacks import DEFAULT_EPS_GRID
from .models import DEPTH_PRESETS, SOLVERS

COMMANDS = ("train-teacher", "train-plain", "distill", "attack", "reproduce")
OUTPUT_ROOT_ENV = "NODEKD_OUTPUT_ROOT"
CLAIMS = ("kd-accuracy", "kd-robustness", "horizon-robustness")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _number(token: str) -> float:
    # accepts "0.03", "8/255" and similar exact fractions
    token = token.strip()
    return float(Fraction(token)) if "/" in token else float(token)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(_number(t) for t in text.split(",") if t.strip())


def _optional_int(text: str):
    return None if text.strip().lower() in ("auto", "none", "") else int(text)


def _optional_str(text: str):
    return None if text.strip().lower() in ("auto", "none", "") else text.strip()


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], object]
    default: object
    commands: tuple[str, ...]
    help: str = ""


_TRAINING = ("train-teacher", "train-plain", "distill")
_STUDENT = ("train-plain", "distill")
_DATA = ("train-teacher", "train-plain", "distill", "attack")
_ALL = COMMANDS

SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0, _ALL, "master seed for every random stream"),
    "output_dir": Key(_optional_str, None, _ALL, "output directory (default: <output root>/<command>)"),
    # data
    "dataset": Key(str, "spirals", _DATA, "moons | spirals | gaussians | idx | csv"),
    "n_samples": Key(int, 2000, _DATA, "synthetic set size"),
    "noise": Key(float, 0.1, _DATA, "synthetic noise level"),
    "classes": Key(int, 3, _DATA, "class count for gaussians"),
    "images_path": Key(_optional_str, None, _DATA, "IDX image file"),
    "labels_path": Key(_optional_str, None, _DATA, "IDX label file"),
    "csv_path": Key(_optional_str, None, _DATA, "CSV file (label, pixels...)"),
    "image_shape": Key(str, "1,28,28", _DATA, "C,H,W of CSV rows"),
    "num_classes": Key(int, 10, _DATA, "class count for IDX/CSV data"),
    "test_fraction": Key(float, 0.25, _DATA, "held-out fraction"),
    "normalize": Key(_bool, True, _TRAINING, "standardize inputs with train-split statistics"),
    "augment": Key(_bool, False, _TRAINING, "random crop and flip"),
    "augment_pad": Key(int, 4, _TRAINING, "crop padding"),
    "augment_flip": Key(float, 0.5, _TRAINING, "flip probability"),
    # models
    "stem": Key(str, "auto", _TRAINING, "conv | dense | auto (dense for 2-D synthetic sets)"),
    "teacher_depth": Key(str, "tiny", ("train-teacher",), "tiny | small | medium"),
    "teacher_width": Key(int, 64, ("train-teacher",), "teacher channel width"),
    "width": Key(int, 64, _STUDENT, "student dynamics width"),
    "t1": Key(float, 1.0, _STUDENT, "ODE horizon end (horizon is [0, t1])"),
    "solver": Key(str, "dopri5", _STUDENT, "dopri5 | rk4 | euler"),
    "rtol": Key(float, 1e-3, _STUDENT, "adaptive solver relative tolerance"),
    "atol": Key(float, 1e-3, _STUDENT, "adaptive solver absolute tolerance"),
    "n_steps": Key(int, 4, _STUDENT, "steps for fixed-step solvers"),
    "teacher_checkpoint": Key(_optional_str, None, ("distill",), "trained teacher checkpoint"),
    "checkpoint": Key(_optional_str, None, ("attack",), "model checkpoint to attack"),
    # optimization
    "epochs": Key(int, 200, _TRAINING, "training epochs"),
    "batch_size": Key(int, 128, _TRAINING, "mini-batch size"),
    "optimizer": Key(str, "auto", _TRAINING, "sgd | adam | auto (pairing by model and horizon)"),
    "lr": Key(_number, None, _TRAINING, "initial learning rate (default 0.1 teacher, 0.001 student)"),
    "momentum": Key(float, 0.9, _TRAINING, "SGD momentum"),
    "temperature": Key(float, 10.0, ("distill",), "softening temperature T"),
    "lam": Key(float, 0.9, ("distill",), "weight of the distillation term"),
    # attacks
    "attack": Key(str, "pgd", ("attack",), "pgd | mifgsm | bim"),
    "eps_grid": Key(_float_list, DEFAULT_EPS_GRID, ("attack",), "comma-separated radii, fractions allowed"),
    "step_size": Key(_number, 1 / 255, ("attack",), "attack step size"),
    "steps": Key(_optional_int, None, ("attack",), "iterations (auto: from epsilon)"),
    "mu": Key(float, 1.0, ("attack",), "MI-FGSM momentum"),
    "random_start": Key(_bool, True, ("attack",), "PGD uniform random start"),
    "eval_split": Key(str, "test", ("attack",), "test | train"),
    "max_samples": Key(int, 0, ("attack",), "evaluate on the first N samples (0: all)"),
    "attack_batch_size": Key(int, 256, ("attack",), "samples per attack batch"),
    # reproduction
    "claim": Key(str, "kd-accuracy", ("reproduce",), " | ".join(CLAIMS)),
    "seeds": Key(int, 5, ("reproduce",), "number of paired seeds"),
    "first_seed": Key(int, 0, ("reproduce",), "seed of the first pair"),
}


def keys_for(command: str) -> list[str]:
    return [k for k, spec in SCHEMA.items() if command in spec.commands]


def parse_lines(text: str, origin: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings from config text."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


class RunConfig:
    """Validated configuration for one command."""

    def __init__(self, command: str, values: dict):
        self.command = command
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    @classmethod
    def from_sources(cls, command: str, text: str | None = None, overrides: list[str] = (),
                     origin: str = "<config>") -> "RunConfig":
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        raw = parse_lines(text, origin) if text else {}
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            raw[key.strip()] = value.strip()
        allowed = keys_for(command)
        values = {k: SCHEMA[k].default for k in allowed}
        for key, text_value in raw.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            if key not in allowed:
                raise ConfigError(f"key {key!r} does not apply to {command}")
            try:
                values[key] = SCHEMA[key].parse(text_value)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        cfg = cls(command, values)
        cfg.resolve()
        cfg.validate()
        return cfg

    # auto values ------------------------------------------------------------

    def resolve(self):
        v = self.values
        if v.get("output_dir") is None:
            root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
            v["output_dir"] = os.path.join(root, self.command)
        if "stem" in v and v["stem"] == "auto":
            v["stem"] = "dense" if v["dataset"] in ("moons", "spirals", "gaussians") else "conv"
        if "lr" in v and v["lr"] is None:
            v["lr"] = 0.1 if self.command == "train-teacher" else 0.001
        if "optimizer" in v and v["optimizer"] == "auto":
            if self.command == "train-teacher":
                v["optimizer"] = "sgd"
            else:
                from .distill import default_optimizer
                distilled = self.command == "distill" and v["lam"] > 0
                v["optimizer"] = default_optimizer(distilled, v["t1"])

    def validate(self):
        v = self.values

        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        if "dataset" in v:
            need(v["dataset"] in ("moons", "spirals", "gaussians", "idx", "csv"),
                 f"unknown dataset {v['dataset']!r}")
            need(v["n_samples"] >= 2, "n_samples must be >= 2")
            need(v["noise"] >= 0, "noise must be >= 0")
            need(0 < v["test_fraction"] < 1, "test_fraction must lie in (0, 1)")
            if v["dataset"] == "idx":
                need(v["images_path"] and v["labels_path"], "idx data needs images_path and labels_path")
            if v["dataset"] == "csv":
                need(v["csv_path"], "csv data needs csv_path")
                try:
                    shape = tuple(int(s) for s in v["image_shape"].split(","))
                except ValueError:
                    raise ConfigError(f"bad image_shape {v['image_shape']!r}") from None
                need(len(shape) == 3 and min(shape) > 0, "image_shape must be C,H,W")
        if "stem" in v:
            need(v["stem"] in ("conv", "dense"), f"unknown stem {v['stem']!r}")
            need(v["epochs"] >= 0 and v["batch_size"] >= 1, "need epochs >= 0 and batch_size >= 1")
            need(v["optimizer"] in ("sgd", "adam"), f"unknown optimizer {v['optimizer']!r}")
            need(v["lr"] > 0, "lr must be positive")
            need(0 <= v["momentum"] < 1, "momentum must lie in [0, 1)")
            need(v["augment_pad"] >= 0 and 0 <= v["augment_flip"] <= 1, "bad augmentation settings")
        if "teacher_depth" in v:
            need(v["teacher_depth"] in DEPTH_PRESETS, f"teacher_depth must be one of {sorted(DEPTH_PRESETS)}")
            need(v["teacher_width"] >= 1, "teacher_width must be >= 1")
        if "t1" in v:
            need(v["t1"] > 0, "t1 must be positive")
            need(v["solver"] in SOLVERS, f"solver must be one of {SOLVERS}")
            need(v["rtol"] > 0 and v["atol"] > 0, "tolerances must be positive")
            need(v["n_steps"] >= 1 and v["width"] >= 1, "need n_steps >= 1 and width >= 1")
        if self.command == "distill":
            need(v["temperature"] > 0, "temperature must be positive")
            need(0 <= v["lam"] <= 1, "lam must lie in [0, 1]")
            need(v["lam"] == 0 or v["teacher_checkpoint"], "distill needs teacher_checkpoint")
        if self.command == "attack":
            need(v["checkpoint"], "attack needs checkpoint")
            need(v["attack"] in ("pgd", "mifgsm", "bim"), f"unknown attack {v['attack']!r}")
            grid = v["eps_grid"]
            need(len(grid) > 0, "eps_grid is empty")
            need(all(e >= 0 for e in grid), "eps_grid entries must be >= 0")
            need(list(grid) == sorted(grid), "eps_grid must be sorted ascending")
            need(v["step_size"] > 0, "step_size must be positive")
            need(v["steps"] is None or v["steps"] >= 0, "steps must be >= 0")
            need(v["eval_split"] in ("test", "train"), "eval_split must be test or train")
            need(v["max_samples"] >= 0 and v["attack_batch_size"] >= 1, "bad sample limits")
        if self.command == "reproduce":
            need(v["claim"] in CLAIMS, f"claim must be one of {CLAIMS}")
            need(v["seeds"] >= 1, "seeds must be >= 1")

    def dumps(self) -> str:
        lines = [f"# resolved configuration for {self.command}"]
        lines += [f"{k} = {_fmt(self.values[k])}" for k in keys_for(self.command)]
        return "\n".join(lines) + "\n"
