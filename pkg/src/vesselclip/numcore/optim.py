"""Adam with bias correction."""
from dataclasses import dataclass, field

import numpy as np


class MissingGradError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    lr_scale: list = field(default_factory=list)

    @classmethod
    def create(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, lr_scale=None):
        params = list(params)
        scale = [1.0] * len(params) if lr_scale is None else [float(s) for s in lr_scale]
        if len(scale) != len(params):
            raise ValueError("lr_scale must have one entry per parameter")
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params],
                   lr_scale=scale)


def adam_step(params, state):
    """Apply one Adam update in place and clear the gradients."""
    params = list(params)
    if len(params) != len(state.m):
        raise ValueError(f"optimizer tracks {len(state.m)} tensors, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGradError(f"parameter {p.name or i!r} has no gradient")
        if p.grad.shape != state.m[i].shape:
            raise ValueError(f"parameter {p.name or i!r}: shape {p.grad.shape} != state {state.m[i].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v, s in zip(params, state.m, state.v, state.lr_scale):
        g = p.grad
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # in-place form of lr * s * (m / c1) / (sqrt(v / c2) + eps)
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= (state.lr * s) / c1
        p.data -= tmp
        p.grad = None


def zero_grad(params):
    for p in params:
        p.grad = None
