"""AdamW with decoupled weight decay for the reference vector and codebooks.

Parameters are float32 arrays keyed by name; moments are kept in float64 and
the update is computed in float64 before being written back.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    lr: float = 5e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def init_adamw(params: dict, lr: float = 5e-4, weight_decay: float = 1e-5,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamWState:
    """Zero-moment state matching the shapes of `params`."""
    state = AdamWState(lr=lr, weight_decay=weight_decay, beta1=beta1,
                       beta2=beta2, eps=eps)
    for name, value in params.items():
        state.first_moment[name] = np.zeros(value.shape, dtype=np.float64)
        state.second_moment[name] = np.zeros(value.shape, dtype=np.float64)
    return state


def adamw_step(params: dict, grads: dict, state: AdamWState):
    """One decoupled-weight-decay Adam update, applied in place.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    if set(params) != set(grads) or set(params) != set(state.first_moment):
        raise ValueError(
            f"parameter/gradient/state keys differ: {sorted(params)} vs "
            f"{sorted(grads)} vs {sorted(state.first_moment)}"
        )
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ValueError(f"shape mismatch for {name!r}: {g.shape} vs {theta.shape}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        theta64 = theta.astype(np.float64)
        theta64 -= state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                               + state.weight_decay * theta64)
        theta[...] = theta64.astype(theta.dtype)
    state.step = t
    return params, state
