"""Trainable parameters, initialisers and the Adam optimiser."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor, UsageError


@dataclass(eq=False)
class Param:
    name: str
    value: Tensor
    adam_m: np.ndarray = field(default=None, repr=False)
    adam_v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value.requires_grad = True
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value.data)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value.data)

    @property
    def shape(self):
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    epsilon: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:  # conv kernel (kh, kw, cin, cout)
        receptive = shape[0] * shape[1]
        return receptive * shape[2], receptive * shape[3]
    if len(shape) >= 2:  # dense (q, p) or grouped (T, q, p)
        return shape[-1], shape[-2]
    return shape[0], shape[0]


def init_params(
    name: str,
    shape: tuple[int, ...],
    kind: str,
    rng: np.random.Generator,
    dtype=DEFAULT_DTYPE,
) -> Param:
    """Draw a parameter.

    ``he``: normal with variance 2 / fan_in. ``glorot``: uniform on
    +-sqrt(6 / (fan_in + fan_out)). ``zero``: zeros (no draw). Samples are
    drawn in float64 and cast, so the stream does not depend on ``dtype``.
    """
    shape = tuple(int(s) for s in shape)
    fan_in, fan_out = _fans(shape)
    if kind == "he":
        values = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
    elif kind == "glorot":
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        values = rng.uniform(-limit, limit, size=shape)
    elif kind == "zero":
        values = np.zeros(shape)
    else:
        raise ValueError(f"unknown init kind {kind!r}")
    return Param(name, Tensor(values.astype(dtype), requires_grad=True))


def _iter_params(params) -> Iterable[Param]:
    if isinstance(params, Mapping):
        return params.values()
    return params


def adam_step(params, state: OptimizerState) -> None:
    """One Adam update with bias correction and L2-coupled weight decay.

    The decay term ``wd * theta`` is added to the raw gradient before the
    moment updates. Gradients are cleared afterwards.
    """
    plist = list(_iter_params(params))
    for p in plist:
        if p.value.grad is None:
            raise UsageError(f"parameter {p.name!r} has no gradient; run backward first")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p in plist:
        theta = p.value.data
        g = p.value.grad
        if state.weight_decay:
            g = g + state.weight_decay * theta
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * (g * g)
        denom = np.sqrt(p.adam_v / bc2)
        denom += state.epsilon
        theta -= (state.lr / bc1) * p.adam_m / denom
        p.value.grad = None
