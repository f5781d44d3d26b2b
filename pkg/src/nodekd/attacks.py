"""White-box L-infinity attacks (PGD, MI-FGSM, BIM) and epsilon sweeps.

Input gradients flow through the recorded solver stages of a student, so the
attacks see the exact gradient of the computed discrete trajectory.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericFault
from .data import Dataset
from .distill import log_softmax
from .models import predict
from .odeint import SolverDivergence
from .rng import stream

DEFAULT_EPS_GRID = tuple(k / 255 for k in (0, 2, 4, 8, 12, 16, 20))


def num_steps(eps: float) -> int:
    """floor(min(255 * eps + 4, 1.25 * 255 * eps)) iterations for radius ``eps``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    e = eps * 255
    # absorb representation error so that e.g. 8/255 * 255 counts as 8
    return int(math.floor(min(e + 4, 1.25 * e) + 1e-9))


@dataclass
class AttackConfig:
    eps: float
    step_size: float = 1 / 255
    steps: int | None = None          # None -> num_steps(eps)
    momentum: float = 1.0             # MI-FGSM only
    pixel_range: tuple[float, float] = (0.0, 1.0)
    random_start: bool = True         # PGD only
    project_eps: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0 or self.step_size <= 0:
            raise ValueError("need eps >= 0 and step_size > 0")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not self.pixel_range[0] < self.pixel_range[1]:
            raise ValueError("pixel_range must be (low, high) with low < high")

    @property
    def n_steps(self) -> int:
        return num_steps(self.eps) if self.steps is None else self.steps


def per_sample_loss(model, x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, int]:
    logits, nfe = predict(model, x)
    logp = log_softmax(logits).data
    return -logp[np.arange(len(labels)), labels], nfe


def input_gradient(model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the summed per-sample cross-entropy w.r.t. the input batch."""
    tape = ad.Tape()
    xt = tape.watch(x)
    logits, _ = predict(model, xt)
    logp = log_softmax(logits)
    onehot = np.eye(logp.shape[1])[labels]
    loss = ad.scale(ad.sum(ad.mul(logp, onehot)), -1.0)
    return tape.gradient(loss, xt)


def project(x_adv: np.ndarray, x: np.ndarray, eps: float | None, pixel_range) -> np.ndarray:
    """Clip to the pixel range and (if ``eps`` is given) to the eps-ball around ``x``.

    The result satisfies ``abs(x_adv - x) <= eps`` exactly in floating point.
    """
    lo, hi = pixel_range
    if eps is None:
        return np.clip(x_adv, lo, hi)
    out = np.clip(x_adv, np.maximum(x - eps, lo), np.minimum(x + eps, hi))
    # x +/- eps can round outward; step those entries one ulp back inside
    for _ in range(4):
        over = np.abs(out - x) > eps
        if not over.any():
            break
        out[over] = np.nextafter(out[over], x[over])
    return out


def _start(x, cfg: AttackConfig, indices):
    if not (cfg.random_start and cfg.eps > 0):
        return x.copy()
    noise = np.empty_like(x)
    for row, idx in enumerate(indices):
        rng = stream(cfg.seed, "attack", int(idx))
        noise[row] = rng.uniform(-cfg.eps, cfg.eps, size=x.shape[1:])
    return project(x + noise, x, cfg.eps, cfg.pixel_range)


def pgd(model, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig,
        indices: np.ndarray | None = None) -> np.ndarray:
    """Projected gradient descent with an optional uniform random start.

    ``indices`` are dataset row ids used to seed per-sample random starts;
    they default to ``0..N-1``.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.eps == 0:
        return x.copy()
    indices = np.arange(len(x)) if indices is None else indices
    eps = cfg.eps if cfg.project_eps else None
    x_adv = _start(x, cfg, indices)
    for _ in range(cfg.n_steps):
        g = input_gradient(model, x_adv, labels)
        x_adv = project(x_adv + cfg.step_size * np.sign(g), x, eps, cfg.pixel_range)
    return x_adv


def mifgsm(model, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig,
           indices: np.ndarray | None = None) -> np.ndarray:
    """Momentum iterative FGSM: accumulate L1-normalized gradients with decay ``momentum``."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.eps == 0:
        return x.copy()
    eps = cfg.eps if cfg.project_eps else None
    x_adv = x.copy()
    g_acc = np.zeros_like(x)
    axes = tuple(range(1, x.ndim))
    for _ in range(cfg.n_steps):
        g = input_gradient(model, x_adv, labels)
        l1 = np.abs(g).sum(axis=axes, keepdims=True)
        # an all-zero gradient adds nothing (the division is skipped)
        g_acc = cfg.momentum * g_acc + g / np.where(l1 > 0, l1, 1.0)
        x_adv = project(x_adv + cfg.step_size * np.sign(g_acc), x, eps, cfg.pixel_range)
    return x_adv


def bim(model, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig,
        indices: np.ndarray | None = None) -> np.ndarray:
    """Basic iterative method: signed gradient steps, no random start, no momentum."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.eps == 0:
        return x.copy()
    eps = cfg.eps if cfg.project_eps else None
    x_adv = x.copy()
    for _ in range(cfg.n_steps):
        x_adv = project(x_adv + cfg.step_size * np.sign(input_gradient(model, x_adv, labels)),
                        x, eps, cfg.pixel_range)
    return x_adv


ATTACKS = {"pgd": pgd, "mifgsm": mifgsm, "bim": bim}


@dataclass
class EpsilonResult:
    eps: float
    steps: int
    clean_acc: float
    attacked_acc: float
    mean_norm: float
    max_norm: float
    mean_loss_clean: float
    mean_loss_adv: float
    mean_nfe: float
    failed_samples: int
    success: list[bool] = field(repr=False, default_factory=list)


REPORT_COLUMNS = ("eps", "clean_acc", "attacked_acc", "mean_norm", "mean_nfe")


@dataclass
class AttackReport:
    attack: str
    results: list[EpsilonResult] = field(default_factory=list)

    def attacked(self, eps: float) -> float:
        for r in self.results:
            if r.eps == eps:
                return r.attacked_acc
        raise KeyError(eps)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.results:
            writer.writerow([repr(float(getattr(r, c))) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def to_json(self, metadata: dict | None = None) -> str:
        rows = []
        for r in self.results:
            row = {k: (None if isinstance(v, float) and not np.isfinite(v) else v)
                   for k, v in r.__dict__.items() if k != "success"}
            row["success"] = [bool(s) for s in r.success]
            rows.append(row)
        return json.dumps({"attack": self.attack, "metadata": metadata or {}, "results": rows},
                          indent=2, sort_keys=True)


def _attack_batch(model, attack, x, y, idx, cfg):
    """Attack a batch; on solver failure retry sample by sample. Returns (x_adv, ok mask)."""
    try:
        return attack(model, x, y, cfg, idx), np.ones(len(y), bool)
    except (SolverDivergence, NumericFault):
        if len(y) == 1:
            return x.copy(), np.zeros(1, bool)
    out, ok = x.copy(), np.ones(len(y), bool)
    for i in range(len(y)):
        out[i:i + 1], ok[i:i + 1] = _attack_batch(model, attack, x[i:i + 1], y[i:i + 1], idx[i:i + 1], cfg)
    return out, ok


def evaluate_under_attack(model, dataset: Dataset, attack: str, eps_grid, cfg: AttackConfig | None = None,
                          batch_size: int = 256) -> AttackReport:
    """Sweep ``eps_grid`` and report clean vs attacked accuracy at each radius.

    ``cfg`` supplies everything except ``eps``; steps default to
    :func:`num_steps` unless ``cfg.steps`` is set.
    """
    if not len(dataset):
        raise ValueError("cannot evaluate on an empty dataset")
    eps_grid = list(eps_grid)
    if not eps_grid:
        raise ValueError("empty epsilon grid")
    if eps_grid != sorted(eps_grid):
        raise ValueError("epsilon grid must be sorted ascending")
    attack_fn = ATTACKS[attack]
    base = cfg or AttackConfig(eps=0.0)
    x, y = dataset.images, dataset.labels
    clean_pred = np.empty(len(y), dtype=np.int64)
    clean_loss = np.empty(len(y))
    for s in range(0, len(y), batch_size):
        logits, _ = predict(model, x[s:s + batch_size])
        clean_pred[s:s + batch_size] = logits.data.argmax(1)
        clean_loss[s:s + batch_size] = -log_softmax(logits).data[np.arange(len(logits.data)), y[s:s + batch_size]]
    clean_acc = float((clean_pred == y).mean())

    report = AttackReport(attack)
    for eps in eps_grid:
        ecfg = AttackConfig(eps=eps, step_size=base.step_size, steps=base.steps, momentum=base.momentum,
                            pixel_range=base.pixel_range, random_start=base.random_start,
                            project_eps=base.project_eps, seed=base.seed)
        adv_pred = np.empty(len(y), dtype=np.int64)
        adv_loss = np.empty(len(y))
        norms = np.empty(len(y))
        ok = np.ones(len(y), bool)
        nfe_sum = nfe_batches = 0
        for s in range(0, len(y), batch_size):
            sl = np.s_[s:s + batch_size]
            xb, yb, idx = x[sl], y[sl], np.arange(len(y))[sl]
            if eps == 0:
                xa, okb = xb.copy(), np.ones(len(yb), bool)
            else:
                xa, okb = _attack_batch(model, attack_fn, xb, yb, idx, ecfg)
            logits, nfe = predict(model, xa)
            adv_pred[sl] = logits.data.argmax(1)
            adv_loss[sl] = -log_softmax(logits).data[np.arange(len(yb)), yb]
            norms[sl] = np.abs(xa - xb).reshape(len(yb), -1).max(axis=1)
            ok[sl] = okb
            nfe_sum += nfe
            nfe_batches += 1
        correct = (adv_pred == y) & ok
        n_ok = int(ok.sum())
        report.results.append(EpsilonResult(
            eps=float(eps), steps=ecfg.n_steps, clean_acc=clean_acc,
            attacked_acc=float(correct[ok].mean()) if n_ok else float("nan"),
            mean_norm=float(norms[ok].mean()) if n_ok else 0.0,
            max_norm=float(norms[ok].max()) if n_ok else 0.0,
            mean_loss_clean=float(clean_loss.mean()), mean_loss_adv=float(adv_loss[ok].mean()) if n_ok else float("nan"),
            mean_nfe=nfe_sum / nfe_batches, failed_samples=len(y) - n_ok,
            success=list((clean_pred == y) & (adv_pred != y) & ok)))
    return report
