"""Bias-corrected Adam over named tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import HyperParams, ModelParams, ParamGradients


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(params: ModelParams, grads: ParamGradients, state: AdamState,
              hyper: HyperParams) -> tuple[ModelParams, AdamState]:
    """One Adam update; returns new parameter and state dicts, inputs are untouched."""
    if set(grads) != set(params):
        raise ValueError("gradients do not cover the same tensors as params")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient {name!r} has shape {g.shape}, expected {params[name].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
    t = state.t + 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        step = hyper.learning_rate * (m / c1) / (np.sqrt(v / c2) + hyper.epsilon)
        new_p[name] = (p - step).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    return new_p, AdamState(new_m, new_v, t)
