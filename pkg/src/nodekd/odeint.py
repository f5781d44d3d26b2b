"""Fixed-step and adaptive (Dormand-Prince 5(4)) integrators.

All integrators work on :class:`~nodekd.autodiff.Tensor` states. When the
initial state or the parameters captured by the dynamics live on a tape,
every stage evaluation is recorded, so ``tape.backward`` differentiates
through the discrete solver trajectory. Step sizes are plain floats and are
therefore constants in the reverse pass.

Dynamics are callables ``f(t, y) -> Tensor`` with ``f(t, y).shape == y.shape``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import NumericFault, ShapeError, Tensor

Dynamics = Callable[[float, Tensor], Tensor]


class SolverDivergence(RuntimeError):
    """The adaptive solver ran out of steps or its step size collapsed."""

    def __init__(self, msg: str, t: float, h: float, accepted: int, rejected: int, nfe: int):
        self.t, self.h = t, h
        self.accepted, self.rejected, self.nfe = accepted, rejected, nfe
        super().__init__(
            f"{msg} at t={t:.6g} (h={h:.3g}, accepted={accepted}, rejected={rejected}, nfe={nfe})")


@dataclass(frozen=True)
class SolverConfig:
    """Adaptive step control settings.

    ``h_init``, ``h_min`` and ``h_max`` default to fractions of the horizon
    (1/100, 1e-8 and 1 respectively); see :meth:`resolved`.
    """

    rtol: float = 1e-3
    atol: float = 1e-3
    h_init: float | None = None
    h_min: float | None = None
    h_max: float | None = None
    safety: float = 0.9
    min_shrink: float = 0.2
    max_grow: float = 10.0
    max_steps: int = 10_000

    def resolved(self, t0: float, t1: float) -> "SolverConfig":
        span = t1 - t0
        cfg = replace(
            self,
            h_init=span / 100 if self.h_init is None else self.h_init,
            h_min=1e-8 * span if self.h_min is None else self.h_min,
            h_max=span if self.h_max is None else self.h_max,
        )
        cfg.validate()
        return cfg

    def validate(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError(f"tolerances must be positive (rtol={self.rtol}, atol={self.atol})")
        if not 0 < self.safety < 1:
            raise ValueError(f"safety must lie in (0, 1), got {self.safety}")
        if not self.min_shrink < 1 < self.max_grow:
            raise ValueError(f"need min_shrink < 1 < max_grow, got ({self.min_shrink}, {self.max_grow})")
        if None not in (self.h_min, self.h_init, self.h_max):
            if not 0 < self.h_min <= self.h_init <= self.h_max:
                raise ValueError(
                    f"need 0 < h_min <= h_init <= h_max, got {self.h_min}, {self.h_init}, {self.h_max}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


class AcceptedStep(NamedTuple):
    t: float       # time at the end of the step
    h: float
    error: float   # scaled error norm (0 for fixed-step methods)


@dataclass
class OdeSolution:
    y_final: Tensor
    t0: float
    accepted_steps: list[AcceptedStep] = field(default_factory=list)
    nfe: int = 0
    rejected_count: int = 0

    @property
    def times(self) -> list[float]:
        return [self.t0] + [s.t for s in self.accepted_steps]


def _evaluate(f: Dynamics, t: float, y: Tensor, h: float | None = None) -> Tensor:
    try:
        dy = ad.as_tensor(f(t, y))
    except NumericFault as exc:
        raise NumericFault(exc.primitive, t=t, h=h) from exc
    if dy.shape != y.shape:
        raise ShapeError(f"dynamics returned shape {dy.shape} for state of shape {y.shape}")
    if not np.isfinite(dy.data).all():
        raise NumericFault("dynamics", t=t, h=h)
    return dy


def _combine(y: Tensor, terms) -> Tensor:
    """y + sum(c * k) over (c, k) pairs, skipping zero coefficients."""
    out = y
    for c, k in terms:
        if c != 0.0:
            out = out + ad.scale(k, c)
    return out


def euler_step(f: Dynamics, t: float, y, h: float) -> Tensor:
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    y = ad.as_tensor(y)
    return _combine(y, [(h, _evaluate(f, t, y, h))])


def _rk4_step(f, t, y, h):
    k1 = _evaluate(f, t, y, h)
    k2 = _evaluate(f, t + h / 2, _combine(y, [(h / 2, k1)]), h)
    k3 = _evaluate(f, t + h / 2, _combine(y, [(h / 2, k2)]), h)
    k4 = _evaluate(f, t + h, _combine(y, [(h, k3)]), h)
    return _combine(y, [(h / 6, k1), (h / 3, k2), (h / 3, k3), (h / 6, k4)])


def _fixed_integrate(step, evals, f, y0, t0, t1, n_steps) -> OdeSolution:
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    y = ad.as_tensor(y0)
    h = (t1 - t0) / n_steps
    sol = OdeSolution(y, t0)
    for i in range(n_steps):
        t = t0 + i * h
        y = step(f, t, y, h)
        sol.accepted_steps.append(AcceptedStep(t1 if i == n_steps - 1 else t0 + (i + 1) * h, h, 0.0))
    sol.y_final = y
    sol.nfe = evals * n_steps
    return sol


def euler_integrate(f: Dynamics, y0, t0: float, t1: float, n_steps: int) -> OdeSolution:
    return _fixed_integrate(euler_step, 1, f, y0, t0, t1, n_steps)


def rk4_integrate(f: Dynamics, y0, t0: float, t1: float, n_steps: int) -> OdeSolution:
    """Classical 4th-order Runge-Kutta with ``n_steps`` uniform steps."""
    return _fixed_integrate(_rk4_step, 4, f, y0, t0, t1, n_steps)


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))


class Dopri5Step(NamedTuple):
    y5: Tensor
    error: Tensor   # y5 - y4, a constant (off-tape) tensor
    k7: Tensor      # f(t + h, y5), reusable as the next step's first stage
    nfe: int


def dopri5_step(f: Dynamics, t: float, y, h: float, k1: Tensor | None = None) -> Dopri5Step:
    """One Dormand-Prince step. Pass the previous step's ``k7`` as ``k1`` to reuse it."""
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    y = ad.as_tensor(y)
    nfe = 0
    if k1 is None:
        k1 = _evaluate(f, t, y, h)
        nfe += 1
    ks = [k1]
    for i in range(1, 6):
        yi = _combine(y, [(h * a, k) for a, k in zip(_A[i], ks)])
        ks.append(_evaluate(f, t + _C[i] * h, yi, h))
    y5 = _combine(y, [(h * b, k) for b, k in zip(_B5, ks)])
    # _A[6] == _B5[:6], so the seventh stage is evaluated at y5
    ks.append(_evaluate(f, t + h, y5, h))
    nfe += 6
    err = h * sum(e * k.data for e, k in zip(_E, ks) if e != 0.0)
    return Dopri5Step(y5, Tensor(err), ks[6], nfe)


def scaled_error(err: np.ndarray, y: np.ndarray, y_new: np.ndarray, rtol: float, atol: float) -> float:
    """RMS over all components of err / (atol + rtol * max(|y|, |y_new|))."""
    tol = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
    return float(np.sqrt(np.mean((err / tol) ** 2)))


def step_size_update(h: float, scaled_err: float, config: SolverConfig) -> tuple[bool, float]:
    """Accept/reject decision and next step size from the scaled error."""
    accept = scaled_err <= 1.0
    if scaled_err == 0.0:
        factor = config.max_grow
    else:
        factor = min(max(config.safety * scaled_err ** -0.2, config.min_shrink), config.max_grow)
    h_next = h * factor
    if config.h_min is not None:
        h_next = max(h_next, config.h_min)
    if config.h_max is not None:
        h_next = min(h_next, config.h_max)
    return accept, h_next


def dopri5_integrate(f: Dynamics, y0, t0: float, t1: float,
                     config: SolverConfig | None = None, fsal: bool = True) -> OdeSolution:
    """Integrate ``f`` from ``t0`` to ``t1`` with adaptive Dormand-Prince steps.

    The error norm is reduced over every component of the state, so a batched
    state shares one step sequence.
    """
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    cfg = (config or SolverConfig()).resolved(t0, t1)
    y = ad.as_tensor(y0)
    sol = OdeSolution(y, t0)
    t, h = t0, cfg.h_init
    k1 = None
    attempts = 0
    while t < t1:
        if attempts >= cfg.max_steps:
            raise SolverDivergence("max_steps exceeded", t, h, len(sol.accepted_steps),
                                   sol.rejected_count, sol.nfe)
        attempts += 1
        last = h >= t1 - t
        h_step = t1 - t if last else h
        if k1 is None:
            k1 = _evaluate(f, t, y, h_step)
            sol.nfe += 1
        step = dopri5_step(f, t, y, h_step, k1)
        sol.nfe += step.nfe
        err = scaled_error(step.error.data, y.data, step.y5.data, cfg.rtol, cfg.atol)
        accept, h = step_size_update(h_step, err, cfg)
        if accept:
            assert err <= 1.0
            t = t1 if last else t + h_step
            y = step.y5
            k1 = step.k7 if fsal else None
            sol.accepted_steps.append(AcceptedStep(t, h_step, err))
        else:
            sol.rejected_count += 1
            if h_step <= cfg.h_min:
                raise SolverDivergence("step size underflow", t, h_step, len(sol.accepted_steps),
                                       sol.rejected_count, sol.nfe)
    sol.y_final = y
    return sol


def integrate_with_grad(f: Dynamics, y0, t0: float, t1: float, config: SolverConfig | None = None,
                        n_steps: int | None = None, mode: str = "adaptive",
                        method: str = "rk4") -> tuple[Tensor, OdeSolution]:
    """Differentiable integration; returns ``(y_final, solution)``.

    ``mode="adaptive"`` uses Dormand-Prince with ``config``; ``mode="fixed"``
    uses ``method`` ("rk4" or "euler") with ``n_steps`` uniform steps.
    """
    if mode == "adaptive":
        sol = dopri5_integrate(f, y0, t0, t1, config)
    elif mode == "fixed":
        integrate = {"rk4": rk4_integrate, "euler": euler_integrate}[method]
        sol = integrate(f, y0, t0, t1, n_steps if n_steps is not None else 10)
    else:
        raise ValueError(f"unknown integration mode {mode!r}")
    return sol.y_final, sol


def convergence_slope(errors, step_sizes) -> float:
    """Least-squares slope of log(error) against log(h)."""
    return float(np.polyfit(np.log(step_sizes), np.log(errors), 1)[0])


__all__ = [
    "Dynamics", "SolverConfig", "SolverDivergence", "AcceptedStep", "OdeSolution", "Dopri5Step",
    "euler_step", "euler_integrate", "rk4_integrate", "dopri5_step", "scaled_error",
    "step_size_update", "dopri5_integrate", "integrate_with_grad", "convergence_slope",
]
