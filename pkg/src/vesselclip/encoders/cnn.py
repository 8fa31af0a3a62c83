"""Residual CNN image encoder (channels-last internally, C x H x W at the boundary)."""
from dataclasses import dataclass

import numpy as np

from ..numcore import ShapeError, Tensor, add, as_tensor, avg_pool2d, conv2d, global_avg_pool2d, relu
from .module import Linear, Module, kaiming_uniform, param


@dataclass
class CnnConfig:
    in_channels: int = 1
    stem_channels: int = 16
    stem_stride: int = 2
    stem_pool: int = 2
    stages: tuple = ((2, 16, 1), (2, 32, 2), (2, 64, 2))  # (blocks, channels, stride)
    block: str = "basic"  # basic | bottleneck
    expansion: int = 1
    d_out: int = 512
    image_size: int = 128

    def __post_init__(self):
        self.stages = tuple(tuple(int(v) for v in s) for s in self.stages)
        if self.block not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block type {self.block!r}")


def resnet50_config(in_channels=3, d_out=512):
    """ResNet50 layout (7x7/2 stem, max-pool-sized reduction, bottlenecks 3-4-6-3).

    Batch norm is replaced by conv biases, so the count sits slightly below
    the torchvision figure.  Meant for parameter counting, not training.
    """
    return CnnConfig(in_channels=in_channels, stem_channels=64, stem_stride=2, stem_pool=2,
                     stages=((3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)),
                     block="bottleneck", expansion=4, d_out=d_out)


class Conv(Module):
    def __init__(self, c_in, c_out, k, stride, rng, lazy=False):
        self.k, self.stride, self.pad = k, stride, k // 2
        shape = (c_out, c_in, k, k)
        self.weight = param(np.zeros(shape) if lazy else kaiming_uniform(rng, shape, c_in * k * k))
        self.bias = param(np.zeros(c_out))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.pad)


class BasicBlock(Module):
    def __init__(self, c_in, c_out, stride, rng, lazy=False):
        self.conv1 = Conv(c_in, c_out, 3, stride, rng, lazy)
        self.conv2 = Conv(c_out, c_out, 3, 1, rng, lazy)
        if stride != 1 or c_in != c_out:
            self.shortcut = Conv(c_in, c_out, 1, stride, rng, lazy)

    def forward(self, x):
        y = self.conv2(relu(self.conv1(x)))
        skip = self.shortcut(x) if hasattr(self, "shortcut") else x
        return relu(add(y, skip))


class Bottleneck(Module):
    def __init__(self, c_in, width, stride, rng, expansion=4, lazy=False):
        c_out = width * expansion
        self.conv1 = Conv(c_in, width, 1, 1, rng, lazy)
        self.conv2 = Conv(width, width, 3, stride, rng, lazy)
        self.conv3 = Conv(width, c_out, 1, 1, rng, lazy)
        if stride != 1 or c_in != c_out:
            self.shortcut = Conv(c_in, c_out, 1, stride, rng, lazy)

    def forward(self, x):
        y = self.conv3(relu(self.conv2(relu(self.conv1(x)))))
        skip = self.shortcut(x) if hasattr(self, "shortcut") else x
        return relu(add(y, skip))


class CNNEncoder(Module):
    def __init__(self, cfg, rng, lazy=False):
        """``lazy`` allocates zero weights without drawing from ``rng`` (for counting only)."""
        self.cfg = cfg
        k = 7 if cfg.block == "bottleneck" else 3
        self.stem = Conv(cfg.in_channels, cfg.stem_channels, k, cfg.stem_stride, rng, lazy)
        c = cfg.stem_channels
        self.blocks = []
        for n_blocks, width, stride in cfg.stages:
            for b in range(n_blocks):
                s = stride if b == 0 else 1
                if cfg.block == "basic":
                    self.blocks.append(BasicBlock(c, width, s, rng, lazy))
                    c = width
                else:
                    self.blocks.append(Bottleneck(c, width, s, rng, cfg.expansion, lazy))
                    c = width * cfg.expansion
        self.head = Linear(c, cfg.d_out, rng, init="zeros" if lazy else "kaiming")

    @property
    def d_out(self):
        return self.cfg.d_out

    def forward(self, images):
        """``images``: (B, C, H, W) array or Tensor, or a single (C, H, W) image."""
        x = as_tensor(images)
        if x.ndim == 3:
            x = Tensor(x.data[None])
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.image_size, cfg.image_size):
            raise ShapeError(f"CNN expects (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
        # inputs are data, never parameters, so the layout change needs no gradient
        h = Tensor(np.ascontiguousarray(np.transpose(x.data, (0, 2, 3, 1))))
        h = relu(self.stem(h))
        if cfg.stem_pool > 1:
            h = avg_pool2d(h, cfg.stem_pool)
        for block in self.blocks:
            h = block(h)
        return self.head(global_avg_pool2d(h))


def cnn_encode(images, cfg, weights):
    model = CNNEncoder(cfg, np.random.default_rng(0))
    model.load_state_dict(weights)
    return model(images)
