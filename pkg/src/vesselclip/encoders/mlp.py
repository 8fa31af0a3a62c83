from dataclasses import dataclass

import numpy as np

from ..numcore import ShapeError, as_tensor, relu
from .module import Linear, Module

TABULAR_HIDDEN = 1024
TABULAR_OUT = 1024
PROJ_HIDDEN = 512
PROJ_OUT = 128


@dataclass
class MlpConfig:
    d_in: int
    hidden: tuple = (TABULAR_HIDDEN,)
    d_out: int = TABULAR_OUT
    activation: str = "relu"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")


class MLP(Module):
    """Affine -> ReLU for each hidden layer, then a final affine map."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        dims = (cfg.d_in,) + cfg.hidden + (cfg.d_out,)
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.cfg.d_in:
            raise ShapeError(f"MLP expects (batch, {self.cfg.d_in}) input, got {x.shape}")
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)

    @property
    def d_out(self):
        return self.cfg.d_out


def tabular_encoder(d_in, rng, hidden=TABULAR_HIDDEN, d_out=TABULAR_OUT):
    return MLP(MlpConfig(d_in, (hidden,), d_out), rng)


def projector(d_in, rng, hidden=PROJ_HIDDEN, d_out=PROJ_OUT):
    return MLP(MlpConfig(d_in, (hidden,), d_out), rng)


def mlp_encode(x, cfg, weights):
    """Functional form: run an MLP described by ``cfg`` with a state dict ``weights``."""
    model = MLP(cfg, np.random.default_rng(0))
    model.load_state_dict(weights)
    return model(x)
