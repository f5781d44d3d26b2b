"""Knowledge distillation from a residual teacher into a Neural ODE student.

The student minimizes ``(1 - lam) * CE + lam * T**2 * KL(teacher || student)``
where both distributions are softened by temperature ``T``. Teacher soft
targets are computed once over the clean training set and cached.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericFault, Tensor
from .data import Dataset, augment as augment_images, batch_iter
from .models import StudentNodeNet, TeacherNet, accuracy, predict
from .odeint import SolverDivergence
from .rng import stream

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_FAILURES = 10


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, record: "TrainRecord"):
        super().__init__(msg)
        self.record = record


# losses -----------------------------------------------------------------------

def log_softmax(logits, T: float = 1.0) -> Tensor:
    if T <= 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z = ad.as_tensor(logits)
    if T != 1.0:
        z = ad.scale(z, 1.0 / T)
    shifted = ad.sub(z, z.data.max(axis=1, keepdims=True))
    return ad.sub(shifted, ad.log(ad.sum(ad.exp(shifted), axis=1, keepdims=True)))


def soft_targets(logits, T: float) -> Tensor:
    """Temperature-softened softmax over the class axis."""
    return ad.exp(log_softmax(logits, T))


def _one_hot(labels, k):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside [0, {k})")
    return np.eye(k)[labels]


def cross_entropy(logits, labels) -> Tensor:
    """Batch-mean cross-entropy between softmax(logits) and integer labels."""
    logp = log_softmax(logits)
    onehot = _one_hot(labels, logp.shape[1])
    return ad.scale(ad.sum(ad.mul(logp, onehot)), -1.0 / logp.shape[0])


def kd_loss(student_logits, teacher_soft, T: float) -> Tensor:
    """Batch-mean KL(teacher || student) with both sides at temperature T."""
    teacher_soft = np.asarray(teacher_soft.data if isinstance(teacher_soft, Tensor) else teacher_soft)
    logq = log_softmax(student_logits, T)
    if logq.shape != teacher_soft.shape:
        raise ad.ShapeError(f"kd_loss: student {logq.shape} vs teacher {teacher_soft.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(teacher_soft > 0, teacher_soft * np.log(teacher_soft), 0.0)
    n = logq.shape[0]
    cross = ad.sum(ad.mul(logq, teacher_soft))
    return ad.scale(ad.sub(plogp.sum(), cross), 1.0 / n)


@dataclass
class DistillConfig:
    temperature: float = 10.0
    lam: float = 0.9
    epochs: int = 200
    batch_size: int = 128
    optimizer: str = "sgd"
    lr: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    augment: bool = False
    augment_pad: int = 4
    augment_flip: float = 0.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0 and batch_size >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def loss_weights(lam: float, T: float) -> tuple[float, float]:
    """Weights applied to (cross-entropy, KL) in the combined loss."""
    return 1.0 - lam, lam * T * T


def combined_loss(student_logits, teacher_soft, labels, cfg: DistillConfig) -> tuple[Tensor, float, float]:
    """Combined loss plus its (CE, KL) components as floats.

    A zero weight drops its term entirely, so ``lam=0`` is plain cross-entropy.
    """
    w_ce, w_kd = loss_weights(cfg.lam, cfg.temperature)
    terms, ce_val, kd_val = [], float("nan"), float("nan")
    if w_ce != 0.0:
        ce = cross_entropy(student_logits, labels)
        ce_val = ce.item()
        terms.append(ce if w_ce == 1.0 else ad.scale(ce, w_ce))
    if w_kd != 0.0:
        kd = kd_loss(student_logits, teacher_soft, cfg.temperature)
        kd_val = kd.item()
        terms.append(kd if w_kd == 1.0 else ad.scale(kd, w_kd))
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return total, ce_val, kd_val


# schedule and optimizers ------------------------------------------------------

def lr_schedule(initial_lr: float, epoch: int, total_epochs: int) -> float:
    """Step decay to 1/10 at half the epochs and 1/100 at three quarters."""
    if epoch < total_epochs // 2:
        return initial_lr
    if epoch < (3 * total_epochs) // 4:
        return initial_lr / 10
    return initial_lr / 100


def sgd_momentum_step(params, grads, velocity, lr, momentum=0.9):
    """v <- mu * v + g; p <- p - lr * v. Returns new (params, velocity) dicts."""
    new_v = {k: momentum * velocity[k] + grads[k] for k in params}
    new_p = {k: params[k] - lr * new_v[k] for k in params}
    return new_p, new_v


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam. ``state.t`` counts completed steps. Returns (params, state)."""
    t = state.t + 1
    m = {k: beta1 * state.m[k] + (1 - beta1) * grads[k] for k in params}
    v = {k: beta2 * state.v[k] + (1 - beta2) * grads[k] ** 2 for k in params}
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    new_p = {k: params[k] - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps) for k in params}
    return new_p, AdamState(m, v, t)


class SGD:
    def __init__(self, params, momentum=0.9):
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        params, self.velocity = sgd_momentum_step(params, grads, self.velocity, lr, self.momentum)
        return params


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.hyper = (beta1, beta2, eps)
        self.state = AdamState({k: np.zeros_like(v) for k, v in params.items()},
                               {k: np.zeros_like(v) for k, v in params.items()})

    def step(self, params, grads, lr):
        params, self.state = adam_step(params, grads, self.state, lr, *self.hyper)
        return params


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def default_optimizer(distilled: bool, t1: float | None = None) -> str:
    """SGD-momentum for teachers and distilled short-horizon students, Adam otherwise."""
    if t1 is None:
        return "sgd"
    return "sgd" if distilled and t1 <= 1.0 else "adam"


# training ---------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    loss_sl: float
    loss_kd: float
    train_acc: float
    test_acc: float
    mean_nfe: float
    skipped_batches: int = 0
    wall_time: float = 0.0


METRICS_COLUMNS = ("epoch", "lr", "loss", "loss_sl", "loss_kd", "train_acc", "test_acc",
                   "mean_nfe", "skipped_batches")
METRICS_SCHEMA_VERSION = 1


def _json_safe(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


@dataclass
class TrainRecord:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_test_acc: float = float("nan")

    def to_csv(self) -> str:
        """Per-epoch metrics; wall time is omitted so reruns produce identical files."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for e in self.epochs:
            writer.writerow([repr(getattr(e, c)) for c in METRICS_COLUMNS])
        return buf.getvalue()

    def to_json(self, metadata: dict | None = None) -> str:
        """JSON export; NaN entries (e.g. the KD loss of a plain run) become null."""
        rows = [{c: _json_safe(getattr(e, c)) for c in METRICS_COLUMNS} for e in self.epochs]
        doc = {"schema_version": METRICS_SCHEMA_VERSION, "metadata": metadata or {},
               "best_epoch": self.best_epoch, "best_test_acc": _json_safe(self.best_test_acc),
               "epochs": rows}
        return json.dumps(doc, indent=2, sort_keys=True)

    def wall_times(self) -> list[float]:
        return [e.wall_time for e in self.epochs]


def _fit(model, train: Dataset, test: Dataset | None, loss_fn, optimizer: str, lr: float,
         epochs: int, batch_size: int, seed: int, momentum: float = 0.9,
         augment: bool = False, augment_pad: int = 4, augment_flip: float = 0.5):
    """Shared mini-batch loop. ``loss_fn(logits, batch) -> (loss, sl, kd)``."""
    record = TrainRecord()
    if epochs == 0:
        return model, record
    opt = SGD(model.params, momentum) if optimizer == "sgd" else Adam(model.params)
    shuffle_rng = stream(seed, "shuffle")
    augment_rng = stream(seed, "augment")
    best_params = {k: v.copy() for k, v in model.params.items()}
    failures = 0
    for epoch in range(epochs):
        started = time.perf_counter()
        lr_now = lr_schedule(lr, epoch, epochs)
        sums = np.zeros(3)
        correct = seen = nfe_total = batches = skipped = 0
        for batch in batch_iter(train, batch_size, shuffle_rng):
            images = batch.images
            if augment:
                images = augment_images(images, augment_pad, augment_flip, augment_rng)
            tape = ad.Tape()
            p = tape.watch_all(model.params)
            try:
                logits, nfe = predict(model, images, p)
                loss, sl, kd = loss_fn(logits, batch)
                if not np.isfinite(loss.item()):
                    raise NumericFault("loss")
                grads = tape.gradient(loss, p)
                if not all(np.isfinite(g).all() for g in grads.values()):
                    raise NumericFault("backward")
            except (SolverDivergence, NumericFault) as exc:
                failures += 1
                skipped += 1
                log.warning("epoch %d: skipped batch (%s)", epoch, exc)
                if failures >= MAX_CONSECUTIVE_FAILURES:
                    raise TrainingDiverged(f"{failures} consecutive failed batches: {exc}", record) from exc
                continue
            failures = 0
            model.params = opt.step(model.params, grads, lr_now)
            sums += [loss.item(), sl, kd]
            correct += int((logits.data.argmax(1) == batch.labels).sum())
            seen += len(batch.labels)
            nfe_total += nfe
            batches += 1
        means = sums / max(batches, 1)
        test_acc = accuracy(model, test.images, test.labels) if test is not None else float("nan")
        record.epochs.append(EpochStats(
            epoch=epoch, lr=lr_now, loss=float(means[0]), loss_sl=float(means[1]),
            loss_kd=float(means[2]), train_acc=correct / max(seen, 1), test_acc=test_acc,
            mean_nfe=nfe_total / max(batches, 1), skipped_batches=skipped,
            wall_time=time.perf_counter() - started))
        improved = record.best_epoch < 0 or test_acc > record.best_test_acc
        if test is None or improved:
            record.best_epoch, record.best_test_acc = epoch, test_acc
            best_params = {k: v.copy() for k, v in model.params.items()}
    model.params = best_params
    return model, record


def train_teacher(teacher: TeacherNet, train: Dataset, test: Dataset | None, epochs: int,
                  lr: float = 0.1, batch_size: int = 128, seed: int = 0, momentum: float = 0.9,
                  augment: bool = False, optimizer: str = "sgd"):
    """Cross-entropy training, by default with SGD-momentum, under the step schedule.

    ``teacher`` must already be initialized. Returns the best-test-accuracy
    parameters and the per-epoch record.
    """
    def loss_fn(logits, batch):
        loss = cross_entropy(logits, batch.labels)
        return loss, loss.item(), float("nan")
    return _fit(teacher, train, test, loss_fn, optimizer, lr, epochs, batch_size, seed, momentum, augment)


def teacher_soft_targets(teacher: TeacherNet, images: np.ndarray, T: float,
                         batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        out.append(soft_targets(teacher.forward(images[start:start + batch_size]), T).data)
    return np.concatenate(out)


def distill_student(student: StudentNodeNet, train: Dataset, test: Dataset | None,
                    teacher: TeacherNet | None, cfg: DistillConfig):
    """Train an initialized student on the combined distillation loss.

    Teacher soft targets are evaluated once on the clean training images.
    ``teacher`` may be None only when ``cfg.lam == 0``.
    """
    if cfg.lam > 0:
        if teacher is None:
            raise ValueError("distillation with lam > 0 needs a teacher")
        if teacher.num_classes != student.num_classes:
            raise ValueError("teacher and student disagree on the number of classes")
        cached = teacher_soft_targets(teacher, train.images, cfg.temperature)
    else:
        cached = None

    def loss_fn(logits, batch):
        targets = cached[batch.indices] if cached is not None else None
        return combined_loss(logits, targets, batch.labels, cfg)

    return _fit(student, train, test, loss_fn, cfg.optimizer, cfg.lr, cfg.epochs, cfg.batch_size,
                cfg.seed, cfg.momentum, cfg.augment, cfg.augment_pad, cfg.augment_flip)


def train_plain(student: StudentNodeNet, train: Dataset, test: Dataset | None, cfg: DistillConfig):
    """The no-distillation baseline: cross-entropy only, same loop and seeds."""
    def loss_fn(logits, batch):
        loss = cross_entropy(logits, batch.labels)
        return loss, loss.item(), float("nan")
    return _fit(student, train, test, loss_fn, cfg.optimizer, cfg.lr, cfg.epochs, cfg.batch_size,
                cfg.seed, cfg.momentum, cfg.augment, cfg.augment_pad, cfg.augment_flip)


__all__ = [
    "log_softmax", "soft_targets", "cross_entropy", "kd_loss", "combined_loss", "loss_weights",
    "DistillConfig", "lr_schedule", "sgd_momentum_step", "adam_step", "AdamState", "SGD", "Adam",
    "default_optimizer", "EpochStats", "TrainRecord", "TrainingDiverged", "train_teacher",
    "teacher_soft_targets", "distill_student", "train_plain",
]
