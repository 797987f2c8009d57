"""Adam with bias correction, the Noam schedule and global-norm clipping."""
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name, batch_id=None):
        self.name = name
        self.batch_id = batch_id
        super().__init__(f"non-finite gradient for {name!r} (batch {batch_id})")


def noam_lr(step, d_model, warmup, scale=1.0):
    """scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1 or warmup < 1:
        raise ValueError("step and warmup must be >= 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, lr, batch_id=None):
    """One Adam update over ``params`` (name -> Tensor) using their ``.grad``.

    Parameters without a gradient are treated as having a zero gradient. A
    non-finite gradient aborts the step before any parameter is touched.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteGradient(name, batch_id)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    seen = set()
    for name, p in params.items():
        if id(p) in seen:  # tied parameters appear once per storage
            continue
        seen.add(id(p))
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / corr1
        vhat = v / corr2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


def global_grad_norm(params):
    seen = set()
    total = 0.0
    for p in params.values():
        if p.grad is None or id(p) in seen:
            continue
        seen.add(id(p))
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return total ** 0.5


def clip_grad_norm(params, max_norm):
    norm = global_grad_norm(params)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        seen = set()
        for p in params.values():
            if p.grad is not None and id(p) not in seen:
                seen.add(id(p))
                p.grad *= scale
    return norm
