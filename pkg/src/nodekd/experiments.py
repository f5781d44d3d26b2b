"""Paired desk-scale experiments behind the ``reproduce`` command.

Every claim trains its arms from the same seed-derived data split and the
same student initialization, so per-seed differences isolate the factor under
study (distillation or horizon length). Results come back as a
:class:`ClaimResult` that renders a markdown table with per-seed and mean
deltas and a verdict.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attacks import DEFAULT_EPS_GRID, AttackConfig, evaluate_under_attack, num_steps
from .data import Dataset, channel_stats, gen_synthetic, train_test_split
from .distill import DistillConfig, distill_student, train_plain, train_teacher
from .models import StudentNodeNet, TeacherNet, init_he
from .rng import stream

log = logging.getLogger(__name__)

CLAIMS = ("kd-accuracy", "kd-robustness", "horizon-robustness")


@dataclass(frozen=True)
class Protocol:
    """Fixed settings of the paired runs. Learning rates were picked per arm
    on seeds disjoint from the evaluation seeds."""

    n_samples: int = 2000
    noise: float = 0.1
    test_fraction: float = 0.25
    teacher_width: int = 64
    teacher_blocks: int = 4
    teacher_epochs: int = 60
    teacher_lr: float = 0.05
    teacher_batch: int = 32
    student_width: int = 16
    student_epochs: int = 30
    student_batch: int = 128
    temperature: float = 10.0
    lam: float = 0.9
    plain_optimizer: str = "adam"
    plain_lr: float = 1e-2
    kd_optimizer: str = "sgd"
    kd_lr: float = 3e-2
    short_horizon: float = 1.0
    long_horizon: float = 5.0
    # longer horizons fit more slowly; both horizons get this budget
    horizon_epochs: int = 90
    attack: str = "pgd"
    # largest radius as a fraction of the median distance to the other class
    eps_fraction: float = 0.5
    min_agree: float = 0.8            # fraction of seeds that must agree
    kd_margin: float = 0.02
    clean_gap: float = 0.05


DEFAULT_PROTOCOL = Protocol()


@dataclass
class Split:
    train: Dataset
    test: Dataset
    stats: object


def prepare(seed: int, p: Protocol) -> Split:
    ds = gen_synthetic("spirals", p.n_samples, p.noise, seed=seed)
    train, test = train_test_split(ds, p.test_fraction, seed=seed)
    return Split(train, test, channel_stats(train))


def feature_scaled_grid(train: Dataset, test: Dataset, fraction: float = 0.5,
                        base=DEFAULT_EPS_GRID) -> tuple[float, ...]:
    """Rescale ``base`` so its largest radius is ``fraction`` times the median
    L-infinity distance from a test point to the nearest training point of
    another class.

    Pixel-scale radii such as 20/255 are meaningless for 2-D toy features,
    which is why the grid follows the data geometry instead.
    """
    xtr = train.images.reshape(len(train), -1)
    xte = test.images.reshape(len(test), -1)
    dist = np.abs(xte[:, None, :] - xtr[None, :, :]).max(axis=2)
    dist[test.labels[:, None] == train.labels[None, :]] = np.inf
    scale = fraction * float(np.median(dist.min(axis=1)))
    return tuple(float(e) * scale / max(base) for e in base)


def scaled_attack_config(grid, seed: int, base=DEFAULT_EPS_GRID) -> AttackConfig:
    """Step size and count follow the pixel-space recipe mapped onto ``grid``."""
    factor = max(grid) / max(base)
    return AttackConfig(eps=0.0, step_size=factor / 255, steps=num_steps(max(base)), seed=seed)


class Runner:
    """Trains and caches the models of a protocol, keyed by seed and arm."""

    def __init__(self, protocol: Protocol | None = None):
        self.p = protocol or Protocol()
        self._splits: dict[int, Split] = {}
        self._teachers: dict[int, TeacherNet] = {}
        self._students: dict[tuple, tuple] = {}

    def split(self, seed: int) -> Split:
        if seed not in self._splits:
            self._splits[seed] = prepare(seed, self.p)
        return self._splits[seed]

    def teacher(self, seed: int) -> TeacherNet:
        if seed not in self._teachers:
            p, s = self.p, self.split(seed)
            net = TeacherNet((1, 1, 2), 2, width=p.teacher_width, blocks=p.teacher_blocks, stem="dense",
                             input_mean=s.stats.mean, input_std=s.stats.std)
            net = init_he(net, stream(seed, "teacher-init"))
            started = time.perf_counter()
            net, rec = train_teacher(net, s.train, s.test, p.teacher_epochs, lr=p.teacher_lr,
                                     batch_size=p.teacher_batch, seed=seed)
            log.info("seed %d teacher acc %.3f (%.1fs)", seed, rec.best_test_acc, time.perf_counter() - started)
            self._teachers[seed] = net
        return self._teachers[seed]

    def student(self, seed: int, distilled: bool, t1: float | None = None, epochs: int | None = None):
        """Returns ``(model, record)``; both arms share the initialization stream."""
        p = self.p
        t1 = p.short_horizon if t1 is None else t1
        epochs = p.student_epochs if epochs is None else epochs
        key = (seed, distilled, t1, epochs)
        if key not in self._students:
            s = self.split(seed)
            net = StudentNodeNet((1, 1, 2), 2, width=p.student_width, t1=t1, stem="dense",
                                 input_mean=s.stats.mean, input_std=s.stats.std)
            net = init_he(net, stream(seed, "init"))
            started = time.perf_counter()
            if distilled:
                cfg = DistillConfig(temperature=p.temperature, lam=p.lam, epochs=epochs,
                                    batch_size=p.student_batch, optimizer=p.kd_optimizer, lr=p.kd_lr, seed=seed)
                net, rec = distill_student(net, s.train, s.test, self.teacher(seed), cfg)
            else:
                cfg = DistillConfig(lam=0.0, epochs=epochs, batch_size=p.student_batch,
                                    optimizer=p.plain_optimizer, lr=p.plain_lr, seed=seed)
                net, rec = train_plain(net, s.train, s.test, cfg)
            log.info("seed %d %s t1=%g epochs %d acc %.3f (%.1fs)", seed, "distilled" if distilled else "plain",
                     t1, epochs, rec.best_test_acc, time.perf_counter() - started)
            self._students[key] = (net, rec)
        return self._students[key]

    def attacked(self, seed: int, model) -> tuple[float, float, float]:
        """(clean acc, attacked acc at the largest radius, mean nfe) on the test split."""
        s = self.split(seed)
        grid = feature_scaled_grid(s.train, s.test, self.p.eps_fraction)
        cfg = scaled_attack_config(grid, seed)
        report = evaluate_under_attack(model, s.test, self.p.attack, [grid[-1]], cfg)
        r = report.results[0]
        return r.clean_acc, r.attacked_acc, r.mean_nfe


@dataclass
class ClaimResult:
    claim: str
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def verdict(self) -> bool | None:
        """True/False for replicated runs, None for a single seed."""
        if len(self.rows) < 2:
            return None
        return all(self.checks.values())

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([row[i] for row in self.rows], dtype=float)

    def to_markdown(self) -> str:
        def cell(v):
            return f"{v:.4f}" if isinstance(v, float) else str(v)

        lines = [f"## {self.claim}", "",
                 "| " + " | ".join(self.columns) + " |",
                 "|" + "---|" * len(self.columns)]
        lines += ["| " + " | ".join(cell(v) for v in row) + " |" for row in self.rows]
        means = ["mean"] + [cell(float(np.mean(self.column(c)))) for c in self.columns[1:]]
        lines.append("| " + " | ".join(means) + " |")
        lines.append("")
        for name, ok in self.checks.items():
            lines.append(f"- {name}: {'pass' if ok else 'fail'}")
        lines += [f"- {n}" for n in self.notes]
        if self.verdict is None:
            lines.append("- verdict: none (insufficient replication, a single seed)")
        else:
            lines.append(f"- verdict: {'PASS' if self.verdict else 'FAIL'}")
        return "\n".join(lines) + "\n"


def _needed(n: int, fraction: float) -> int:
    return max(1, math.ceil(fraction * n - 1e-9))


def kd_accuracy(runner: Runner, seeds) -> ClaimResult:
    res = ClaimResult("kd-accuracy", ("seed", "plain", "distilled", "delta"))
    for seed in seeds:
        plain = runner.student(seed, False)[1].best_test_acc
        kd = runner.student(seed, True)[1].best_test_acc
        res.rows.append((seed, plain, kd, kd - plain))
    delta = res.column("delta").mean()
    res.checks["mean delta > 0"] = bool(delta > 0)
    res.checks[f"distilled mean >= plain mean + {runner.p.kd_margin:g}"] = bool(
        res.column("distilled").mean() >= res.column("plain").mean() + runner.p.kd_margin)
    return res


def kd_robustness(runner: Runner, seeds) -> ClaimResult:
    res = ClaimResult("kd-robustness", ("seed", "plain clean", "plain attacked",
                                        "distilled clean", "distilled attacked", "delta"))
    for seed in seeds:
        pc, pa, _ = runner.attacked(seed, runner.student(seed, False)[0])
        dc, da, _ = runner.attacked(seed, runner.student(seed, True)[0])
        res.rows.append((seed, pc, pa, dc, da, da - pa))
    wins = int(np.sum(res.column("delta") >= 0))
    need = _needed(len(res.rows), runner.p.min_agree)
    res.checks[f"distilled attacked >= plain attacked in >= {need} of {len(res.rows)} seeds"] = wins >= need
    res.notes.append(f"distilled at least as robust in {wins} of {len(res.rows)} seeds")
    return res


def horizon_robustness(runner: Runner, seeds) -> ClaimResult:
    """Plain (Adam) students at both horizons with one training budget, so
    only the horizon differs."""
    lo, hi, epochs = runner.p.short_horizon, runner.p.long_horizon, runner.p.horizon_epochs
    res = ClaimResult("horizon-robustness", ("seed", f"clean t1={lo:g}", f"clean t1={hi:g}",
                                             f"attacked t1={lo:g}", f"attacked t1={hi:g}",
                                             f"nfe t1={lo:g}", f"nfe t1={hi:g}", "delta"))
    for seed in seeds:
        sc, sa, sn = runner.attacked(seed, runner.student(seed, False, lo, epochs)[0])
        lc, la, ln = runner.attacked(seed, runner.student(seed, False, hi, epochs)[0])
        res.rows.append((seed, sc, lc, sa, la, sn, ln, la - sa))
    n = len(res.rows)
    wins = int(np.sum(res.column("delta") >= 0))
    need = _needed(n, runner.p.min_agree)
    gap = np.abs(res.column(f"clean t1={hi:g}") - res.column(f"clean t1={lo:g}"))
    res.checks[f"long horizon attacked >= short in >= {need} of {n} seeds"] = wins >= need
    res.checks[f"clean accuracies within {runner.p.clean_gap:g} in every seed"] = bool(
        np.all(gap < runner.p.clean_gap))
    res.checks["mean nfe grows with the horizon"] = bool(
        res.column(f"nfe t1={hi:g}").mean() > res.column(f"nfe t1={lo:g}").mean())
    res.notes.append(f"long horizon at least as robust in {wins} of {n} seeds; largest clean gap {gap.max():.4f}")
    return res


CLAIM_FUNCTIONS = {"kd-accuracy": kd_accuracy, "kd-robustness": kd_robustness,
                   "horizon-robustness": horizon_robustness}


def run_claim(claim: str, seeds: int = 5, first_seed: int = 0, protocol: Protocol | None = None,
              runner: Runner | None = None) -> ClaimResult:
    """Run one claim over ``seeds`` consecutive seeds. Pass a shared ``runner``
    to reuse models trained for an earlier claim."""
    if claim not in CLAIM_FUNCTIONS:
        raise ValueError(f"unknown claim {claim!r}; choose from {CLAIMS}")
    if seeds < 1:
        raise ValueError("need at least one seed")
    runner = runner or Runner(protocol)
    started = time.perf_counter()
    result = CLAIM_FUNCTIONS[claim](runner, range(first_seed, first_seed + seeds))
    result.elapsed = time.perf_counter() - started
    return result
