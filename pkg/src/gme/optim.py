from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import ContractError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        z = np.zeros(np.shape(param), dtype=np.float64)
        return cls(z, z.copy(), 0, lr, beta1, beta2, eps)


def adam_update(param, grad, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step. Returns new arrays; inputs are left untouched."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ContractError(f"adam_update: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


@dataclass
class Adam:
    """Adam over a dict of named parameters, updated in place.

    Rows of embedding tables touched by a sparse gradient still see the
    dense moment decay; this matches the plain dense algorithm.
    """
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            st = self.states.get(name)
            if st is None:
                st = AdamState.like(params[name], self.lr, self.beta1, self.beta2, self.eps)
            params[name][...], self.states[name] = adam_update(params[name], g, st)
