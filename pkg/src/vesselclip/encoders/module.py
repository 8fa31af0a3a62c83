"""Minimal parameter container shared by every tower."""
import math

import numpy as np

from ..numcore import Tensor, linear


def kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameters are Tensor attributes; children are Module attributes or lists of them.

    Registration order is attribute assignment order, which keeps parameter
    names and optimizer slots stable across runs.
    """

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out += val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    out += v.named_parameters(f"{name}.{i}.")
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, prefix=""):
        named = self.named_parameters()
        missing = [n for n, _ in named if prefix + n not in state]
        if missing:
            raise KeyError(f"checkpoint lacks {missing[:3]}{'...' if len(missing) > 3 else ''}")
        for n, p in named:
            arr = np.asarray(state[prefix + n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{n}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, init="kaiming"):
        self.d_in, self.d_out = d_in, d_out
        w = np.zeros((d_in, d_out)) if init == "zeros" else kaiming_uniform(rng, (d_in, d_out), d_in)
        self.weight = param(w)
        if bias:
            self.bias = param(np.zeros(d_out))

    def forward(self, x):
        return linear(x, self.weight, getattr(self, "bias", None))


def count_params(model):
    """Exact number of trainable scalars in ``model`` (0 for None or an empty module)."""
    if model is None:
        return 0
    if isinstance(model, (list, tuple)):
        return sum(count_params(m) for m in model)
    return int(sum(p.size for p in model.parameters()))
