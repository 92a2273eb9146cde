"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .optim import Param
from .tensor import Tape, Tensor, no_record


def grad_check(
    f: Callable[[], Tensor],
    params,
    samples: int = 10,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values each call.
    ``params`` is an iterable (or mapping) of :class:`Param` or leaf
    :class:`Tensor`. Up to ``samples`` coordinates per parameter are probed.
    Parameters should be float64; the error metric is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    tensors = [p.value if isinstance(p, Param) else p for p in _iter(params)]
    for t in tensors:
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_record():
        for t, a in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            k = min(samples, flat.size)
            for i in rng.choice(flat.size, size=k, replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = _scalar(f())
                flat[i] = orig - h
                fm = _scalar(f())
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                ana = a.reshape(-1)[i]
                denom = max(abs(ana), abs(num), 1e-8)
                worst = max(worst, abs(ana - num) / denom)
    for t in tensors:
        t.grad = None
    return worst


def _scalar(t: Tensor):
    # Keep the loss in its own dtype; float() would round extended precision away.
    return np.asarray(t.data).reshape(-1)[0]


def _iter(params) -> Iterable:
    if isinstance(params, Mapping):
        return params.values()
    return params
