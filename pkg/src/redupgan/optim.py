"""Adam with bias correction, operating on flat parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import NonFiniteError


@dataclass
class AdamState:
    alpha: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    step: int = 0
    m: dict = None
    v: dict = None


def adam_init(params: dict, alpha=1e-4, beta1=0.5, beta2=0.9, eps=1e-8) -> AdamState:
    return AdamState(alpha=alpha, beta1=beta1, beta2=beta2, eps=eps, step=0,
                     m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(state: AdamState, params: dict, grads: dict):
    """One bias-corrected Adam update; returns (new_params, state).

    Parameters without a gradient entry are left untouched.  The state is
    mutated in place (its step counter must stay strictly increasing).
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        out[name] = p - state.alpha * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state
