"""Neural ODE classifiers, knowledge distillation from residual teachers and
adversarial robustness sweeps, on a small float64 numpy autodiff engine."""

__version__ = "0.1.0"
