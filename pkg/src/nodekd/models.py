"""Teacher residual networks and student Neural ODE classifiers.

Both model kinds keep their parameters in an ordered ``params`` dict of
float64 arrays. ``forward`` takes an optional mapping of the same names to
:class:`~nodekd.autodiff.Tensor` objects; pass tape-watched tensors to get
gradients, or nothing to run on constants.

Two stems are available: ``"conv"`` for (N, C, H, W) images and ``"dense"``
for flat feature vectors (the synthetic 2-D sets), where convolutions are
replaced by linear layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import ClassVar, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .odeint import SolverConfig, integrate_with_grad

DEPTH_PRESETS = {"tiny": 4, "small": 8, "medium": 14}
SOLVERS = ("dopri5", "rk4", "euler")


def norm_groups(channels: int, max_groups: int = 32) -> int:
    """Largest divisor of ``channels`` not exceeding ``max_groups``."""
    return max(g for g in range(1, min(max_groups, channels) + 1) if channels % g == 0)


def _conv_shape(c_out, c_in, k=3):
    return (c_out, c_in, k, k)


@dataclass
class _Model:
    input_shape: tuple
    num_classes: int
    width: int = 16
    stem: str = "conv"
    input_mean: tuple | None = None
    input_std: tuple | None = None
    params: dict = field(default_factory=dict, repr=False, compare=False)

    kind: ClassVar[str] = ""

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.stem not in ("conv", "dense"):
            raise ValueError(f"unknown stem {self.stem!r}")
        if self.num_classes < 2 or self.width < 1:
            raise ValueError("need num_classes >= 2 and width >= 1")
        if self.input_mean is not None:
            self.input_mean = tuple(float(v) for v in self.input_mean)
            self.input_std = tuple(float(v) for v in self.input_std)

    def hyperparameters(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "params"}

    def param_shapes(self) -> dict[str, tuple]:
        raise NotImplementedError

    def _bind(self, params: Mapping[str, Tensor] | None) -> Mapping[str, Tensor]:
        if params is not None:
            return params
        if not self.params:
            raise RuntimeError(f"{self.kind} model has no parameters; call init_he first")
        return {k: Tensor(v) for k, v in self.params.items()}

    def _prepare_input(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise ad.ShapeError(f"expected input (N, {self.input_shape}), got {x.shape}")
        if self.input_mean is not None:
            c = self.input_shape[0]
            mean = np.asarray(self.input_mean).reshape(1, c, 1, 1)
            inv_std = 1.0 / np.asarray(self.input_std).reshape(1, c, 1, 1)
            x = ad.mul(ad.sub(x, mean), inv_std)
        if self.stem == "dense":
            x = ad.reshape(x, (x.shape[0], int(np.prod(self.input_shape))))
        return x

    @property
    def in_features(self) -> int:
        return int(np.prod(self.input_shape))

    def _head(self, h: Tensor, p) -> Tensor:
        if self.stem == "conv":
            h = ad.mean(h, axis=(2, 3))
        return h @ p["fc.weight"] + p["fc.bias"]


def _linear(h, p, name):
    return h @ p[f"{name}.weight"] + p[f"{name}.bias"]


def _conv(h, p, name, stride=1):
    w = p[f"{name}.weight"]
    out = ad.conv2d(h, w, stride=stride, padding=w.shape[-1] // 2)
    return out + ad.reshape(p[f"{name}.bias"], (1, -1, 1, 1))


def _gn(h, p, name):
    # flat features use a single group (layer normalization)
    groups = norm_groups(h.shape[1]) if h.ndim == 4 else 1
    return ad.group_norm(h, p[f"{name}.gamma"], p[f"{name}.beta"], groups)


@dataclass
class TeacherNet(_Model):
    """Residual classifier: stem, ``blocks`` blocks of ``y + f(y)``, pooled linear head."""

    blocks: int = 4
    kind: ClassVar[str] = "teacher"

    @classmethod
    def from_preset(cls, depth: str, **kwargs) -> "TeacherNet":
        if depth not in DEPTH_PRESETS:
            raise ValueError(f"unknown depth preset {depth!r}; choose from {sorted(DEPTH_PRESETS)}")
        return cls(blocks=DEPTH_PRESETS[depth], **kwargs)

    def param_shapes(self):
        w, c_in = self.width, self.input_shape[0]
        shapes = {}
        if self.stem == "conv":
            shapes["stem.weight"] = _conv_shape(w, c_in)
        else:
            shapes["stem.weight"] = (self.in_features, w)
        shapes["stem.bias"] = (w,)
        shapes["stem_norm.gamma"] = shapes["stem_norm.beta"] = (w,)
        for b in range(self.blocks):
            for j in (1, 2):
                if self.stem == "conv":
                    shapes[f"block{b}.conv{j}.weight"] = _conv_shape(w, w)
                else:
                    shapes[f"block{b}.fc{j}.weight"] = (w, w)
                shapes[f"block{b}.{self._layer}{j}.bias"] = (w,)
                shapes[f"block{b}.norm{j}.gamma"] = shapes[f"block{b}.norm{j}.beta"] = (w,)
        shapes["fc.weight"] = (w, self.num_classes)
        shapes["fc.bias"] = (self.num_classes,)
        return shapes

    @property
    def _layer(self):
        return "conv" if self.stem == "conv" else "fc"

    def _apply(self, h, p, name):
        return _conv(h, p, name) if self.stem == "conv" else _linear(h, p, name)

    def residual(self, h: Tensor, p, b: int) -> Tensor:
        """The residual branch f of block ``b``: layer, norm, relu, layer, norm."""
        r = ad.relu(_gn(self._apply(h, p, f"block{b}.{self._layer}1"), p, f"block{b}.norm1"))
        return _gn(self._apply(r, p, f"block{b}.{self._layer}2"), p, f"block{b}.norm2")

    def features(self, x, params=None) -> Tensor:
        p = self._bind(params)
        h = ad.relu(_gn(self._apply(self._prepare_input(x), p, "stem"), p, "stem_norm"))
        for b in range(self.blocks):
            h = h + self.residual(h, p, b)
        return h

    def forward(self, x, params=None) -> Tensor:
        p = self._bind(params)
        return self._head(self.features(x, p), p)


@dataclass
class StudentNodeNet(_Model):
    """Neural ODE classifier: downsampling stem, ODE block on [0, t1], pooled linear head.

    The dynamics is a 4-layer network (3x3 convolutions or linear layers)
    whose every layer also sees the current time as an extra input channel.
    """

    width: int = 64
    t1: float = 1.0
    solver: str = "dopri5"
    rtol: float = 1e-3
    atol: float = 1e-3
    n_steps: int = 4
    kind: ClassVar[str] = "student"
    dynamics_layers: ClassVar[int] = 4

    def __post_init__(self):
        super().__post_init__()
        self.t1 = float(self.t1)
        if not self.t1 > 0:
            raise ValueError(f"horizon end must be positive, got {self.t1}")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; choose from {SOLVERS}")

    @property
    def solver_config(self) -> SolverConfig:
        return SolverConfig(rtol=self.rtol, atol=self.atol)

    def param_shapes(self):
        w, c_in = self.width, self.input_shape[0]
        shapes = {}
        if self.stem == "conv":
            shapes["stem.weight"] = _conv_shape(w, c_in)
            shapes["stem.bias"] = (w,)
            shapes["stem_norm.gamma"] = shapes["stem_norm.beta"] = (w,)
        else:
            shapes["stem.weight"] = (self.in_features, w)
            shapes["stem.bias"] = (w,)
        for i in range(self.dynamics_layers):
            if self.stem == "conv":
                shapes[f"odefunc.conv{i}.weight"] = _conv_shape(w, w + 1)
                shapes[f"odefunc.conv{i}.bias"] = (w,)
                if i < self.dynamics_layers - 1:
                    shapes[f"odefunc.norm{i}.gamma"] = shapes[f"odefunc.norm{i}.beta"] = (w,)
            else:
                shapes[f"odefunc.fc{i}.weight"] = (w + 1, w)
                shapes[f"odefunc.fc{i}.bias"] = (w,)
        shapes["fc.weight"] = (w, self.num_classes)
        shapes["fc.bias"] = (self.num_classes,)
        return shapes

    def dynamics(self, params=None):
        """The dynamics function ``f(t, y)`` bound to ``params``."""
        p = self._bind(params)
        last = self.dynamics_layers - 1

        def f(t, y):
            h = y
            for i in range(self.dynamics_layers):
                tcol = np.full((h.shape[0], 1) + h.shape[2:], float(t))
                h = ad.concat([h, tcol], axis=1)
                if self.stem == "conv":
                    h = _conv(h, p, f"odefunc.conv{i}")
                    if i < last:
                        h = ad.relu(_gn(h, p, f"odefunc.norm{i}"))
                else:
                    h = _linear(h, p, f"odefunc.fc{i}")
                    if i < last:
                        h = ad.tanh(h)
            return h
        return f

    def stem_forward(self, x, params=None) -> Tensor:
        p = self._bind(params)
        h = self._prepare_input(x)
        if self.stem == "conv":
            return ad.relu(_gn(_conv(h, p, "stem", stride=2), p, "stem_norm"))
        return ad.tanh(_linear(h, p, "stem"))

    def solve(self, h0: Tensor, params=None, unit_time: bool = False):
        """Integrate the ODE block from stem features ``h0``.

        With ``unit_time`` the equivalent rescaled problem
        ``dy/ds = t1 * f(t1 * s, y)`` is integrated over [0, 1] instead.
        """
        f = self.dynamics(params)
        t1 = self.t1
        if unit_time:
            g, t_end = (lambda s, y: ad.scale(f(t1 * s, y), t1)), 1.0
        else:
            g, t_end = f, t1
        if self.solver == "dopri5":
            return integrate_with_grad(g, h0, 0.0, t_end, self.solver_config, mode="adaptive")
        return integrate_with_grad(g, h0, 0.0, t_end, n_steps=self.n_steps, mode="fixed",
                                   method=self.solver)

    def forward(self, x, params=None, unit_time: bool = False) -> tuple[Tensor, int]:
        """Logits and the number of dynamics evaluations spent."""
        p = self._bind(params)
        y, sol = self.solve(self.stem_forward(x, p), p, unit_time=unit_time)
        return self._head(y, p), sol.nfe


MODEL_KINDS = {cls.kind: cls for cls in (TeacherNet, StudentNodeNet)}


def predict(model, x, params=None) -> tuple[Tensor, int]:
    """Logits and nfe for either model kind (nfe is 0 for teachers)."""
    if isinstance(model, StudentNodeNet):
        return model.forward(x, params)
    return model.forward(x, params), 0


def accuracy(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if not len(labels):
        raise ValueError("cannot compute accuracy of an empty set")
    correct = 0
    for start in range(0, len(labels), batch_size):
        logits, _ = predict(model, images[start:start + batch_size])
        correct += int((logits.data.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return correct / len(labels)


def init_he(model: _Model, rng: np.random.Generator) -> _Model:
    """He-normal weights, zero biases, unit/zero normalization scale/shift. Mutates and returns ``model``."""
    params = {}
    for name, shape in model.param_shapes().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    model.params = params
    return model


def zero_residuals(model: TeacherNet) -> TeacherNet:
    """Zero every residual branch's output layer so each block is the identity."""
    for b in range(model.blocks):
        model.params[f"block{b}.norm2.gamma"][:] = 0.0
        model.params[f"block{b}.norm2.beta"][:] = 0.0
    return model
