"""Adam optimizer over named parameter dicts.

The update itself is a fused elementwise kernel (see :mod:`toporl.kernels`);
this module owns the moment state and the zero-after-step contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..errors import ContractError
from .autodiff import Tensor


@dataclass
class AdamState:
    """First/second moments and step count, keyed like the parameter dict."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_adam(params: dict[str, Tensor]) -> AdamState:
    state = AdamState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    b1: float = 0.9,
    b2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards.

    Parameters with requires_grad=False are skipped (frozen). A missing or
    shape-mismatched moment buffer is a caller error.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if name not in state.m:
            raise ContractError(f"optimizer state missing entry for {name!r}")
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape or v.shape != p.data.shape:
            raise ContractError(f"optimizer state shape mismatch for {name!r}")
        g = p.ensure_grad()
        kernels.adam_update(
            p.data.reshape(-1),
            g.reshape(-1),
            m.reshape(-1),
            v.reshape(-1),
            t,
            lr,
            b1,
            b2,
            eps,
        )
        g[...] = 0.0


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()
