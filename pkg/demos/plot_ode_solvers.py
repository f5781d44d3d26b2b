"""
Fixed-step and adaptive ODE solvers
===================================

Euler, RK4 and the adaptive Dormand-Prince pair on dy/dt = -y.
"""

import math

import numpy as np

from nodekd import autodiff as ad
from nodekd.odeint import SolverConfig, convergence_slope, dopri5_integrate, euler_integrate, rk4_integrate


def decay(t, y):
    return ad.scale(y, -1.0)


# halve the step a few times and watch the error fall
hs = [0.1, 0.05, 0.025, 0.0125]
for integrate in (euler_integrate, rk4_integrate):
    errs = [abs(integrate(decay, np.array([1.0]), 0.0, 1.0, round(1 / h)).y_final.item() - math.exp(-1))
            for h in hs]
    print(f"{integrate.__name__:16s} errors {np.array(errs)}  slope {convergence_slope(errs, hs):.2f}")

# the adaptive solver spends more evaluations as the tolerance tightens
for tol in (1e-3, 1e-4, 1e-5, 1e-6):
    sol = dopri5_integrate(decay, np.array([1.0]), 0.0, 1.0, SolverConfig(rtol=tol, atol=tol))
    err = abs(sol.y_final.item() - math.exp(-1))
    print(f"dopri5 tol {tol:.0e}: error {err:.2e}, steps {len(sol.accepted_steps)}, nfe {sol.nfe}")

# a longer horizon needs more steps for the same dynamics
for t1 in (1.0, 5.0, 25.0):
    sol = dopri5_integrate(lambda t, y: ad.tanh(y) * math.cos(t), np.array([0.5]), 0.0, t1)
    print(f"horizon [0, {t1:g}]: nfe {sol.nfe}")
