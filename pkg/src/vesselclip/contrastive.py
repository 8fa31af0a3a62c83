"""Bidirectional CLIP objective and the paired pretraining loop."""
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .dataprep import apply_augment, sample_augment
from .encoders import (
    CNNEncoder,
    CnnConfig,
    GATEncoder,
    GatConfig,
    Module,
    collate,
    load_checkpoint,
    projector,
    save_checkpoint,
    tabular_encoder,
)

log = logging.getLogger(__name__)

MODES = ("as-written", "standard")
MODALITIES = ("raw", "prob", "graph")
FORMAT = "vesselclip-pretrain"


@dataclass
class ContrastiveConfig:
    tau: float = 0.1
    lam: float = 0.5
    batch_size: int = 64
    mode: str = "as-written"
    epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.mode not in MODES:
            raise ValueError(f"denominator mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")


def _directional(sim, exclude_positive):
    """Sum over rows x of -(s_xx - log sum_y exp s_xy), y ranging over the row's denominator set."""
    b = sim.shape[0]
    eye = np.eye(b)
    keep = 1.0 - eye if exclude_positive else np.ones((b, b))
    # per-row shift by a constant keeps exp() in range without changing the value
    top = np.where(keep > 0, sim.data, -np.inf).max(axis=1, keepdims=True)
    # excluded cells are zeroed before exp so a dominant positive cannot overflow
    denom = nc.sum_(nc.mul(nc.exp(nc.mul(sim - top, keep)), keep), axis=1)
    lse = nc.log(denom) + top[:, 0]
    pos = nc.sum_(nc.mul(sim, eye), axis=1)
    return nc.sum_(lse - pos)


def clip_loss(zi, zt, tau=0.1, lam=0.5, mode="as-written"):
    """lam * l_it + (1 - lam) * l_ti over a batch of paired projections.

    Both directions sum (not average) over the batch.  ``as-written`` leaves
    the positive pair out of each denominator; ``standard`` keeps it, which is
    the usual InfoNCE form.
    """
    zi, zt = nc.as_tensor(zi), nc.as_tensor(zt)
    if zi.ndim != 2 or zi.shape != zt.shape:
        raise nc.ShapeError(f"projections must be matching matrices, got {zi.shape} and {zt.shape}")
    if zi.shape[0] < 2:
        raise ValueError("contrastive batch needs at least 2 pairs")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if mode not in MODES:
        raise ValueError(f"unknown denominator mode {mode!r}")
    sim = nc.matmul(nc.normalize_rows(zi), nc.transpose(nc.normalize_rows(zt))) * (1.0 / tau)
    excl = mode == "as-written"
    l_it = _directional(sim, excl)
    l_ti = _directional(nc.transpose(sim), excl)
    return l_it * lam + l_ti * (1.0 - lam)


# -- model -----------------------------------------------------------------------

@dataclass
class Architecture:
    modality: str
    tab_dim: int
    tab_hidden: int = 1024
    tab_out: int = 1024
    proj_hidden: int = 512
    proj_out: int = 128
    gat: dict = field(default_factory=lambda: asdict(GatConfig()))
    cnn: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.modality != "graph" and not self.cnn:
            self.cnn = asdict(CnnConfig(in_channels=3 if self.modality == "raw" else 1))
        # JSON-normal form (lists, not tuples) so a checkpoint round trip compares equal
        self.gat = json.loads(json.dumps(self.gat))
        self.cnn = json.loads(json.dumps(self.cnn))


def build_image_encoder(arch, rng):
    if arch.modality == "graph":
        return GATEncoder(GatConfig(**arch.gat), rng)
    return CNNEncoder(CnnConfig(**arch.cnn), rng)


class ContrastiveModel(Module):
    """Imaging encoder f_i, tabular encoder f_t and their projectors g_i, g_t."""

    def __init__(self, arch, seed=0):
        rng = np.random.default_rng(seed)
        self.arch = arch
        self.f_i = build_image_encoder(arch, rng)
        self.f_t = tabular_encoder(arch.tab_dim, rng, arch.tab_hidden, arch.tab_out)
        self.g_i = projector(self.f_i.d_out, rng, arch.proj_hidden, arch.proj_out)
        self.g_t = projector(self.f_t.d_out, rng, arch.proj_hidden, arch.proj_out)

    def forward(self, imaging, tabular):
        return self.g_i(self.f_i(imaging)), self.g_t(self.f_t(tabular))


# -- data --------------------------------------------------------------------------

class PairedData:
    """Aligned imaging inputs and encoded tabular rows.

    ``graphs`` is a list of GraphFeatures; ``images`` is either an array
    (N, C, H, W) or a callable mapping an index array to such a batch, so
    large cohorts can render images on demand.
    """

    def __init__(self, tabular, modality, graphs=None, images=None):
        self.tabular = np.asarray(tabular, dtype=np.float64)
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        self.modality = modality
        n = len(self.tabular)
        if modality == "graph":
            if graphs is None or len(graphs) != n:
                raise ValueError("graph modality needs one graph per tabular row")
        elif images is None:
            raise ValueError(f"{modality} modality needs images")
        elif not callable(images) and len(images) != n:
            raise ValueError("image count differs from tabular row count")
        self.graphs, self.images = graphs, images

    def __len__(self):
        return len(self.tabular)

    def imaging(self, idx, rng=None, augment=False):
        idx = np.asarray(idx)
        if self.modality == "graph":
            # graphs are never augmented
            return collate([self.graphs[i] for i in idx])
        imgs = self.images(idx) if callable(self.images) else np.asarray(self.images)[idx]
        imgs = np.asarray(imgs, dtype=np.float64)
        if augment:
            imgs = np.stack([apply_augment(im, sample_augment(rng)) for im in imgs])
        return imgs


# -- training loop -----------------------------------------------------------------

def _rng_from_state(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class Pretrainer:
    """Owns model, optimizer and data order; every piece of state is checkpointable."""

    def __init__(self, model, data, cfg):
        if len(data) == 0:
            raise ValueError("empty pretraining dataset")
        if len(data) < 2:
            raise ValueError("pretraining needs at least 2 pairs")
        if data.modality != model.arch.modality:
            raise ValueError(f"data modality {data.modality} != model modality {model.arch.modality}")
        self.model, self.data, self.cfg = model, data, cfg
        self.params = model.parameters()
        self.adam = nc.AdamState.create(self.params, lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.batch_idx = 0
        self.perm = None
        self.epoch_losses = []
        self.history = []
        self.step_count = 0

    @property
    def batch_size(self):
        return min(self.cfg.batch_size, len(self.data))

    @property
    def batches_per_epoch(self):
        return len(self.data) // self.batch_size

    def step(self):
        """One optimizer step; returns the batch loss.  Epoch bookkeeping happens here."""
        if self.perm is None:
            self.perm = self.rng.permutation(len(self.data))
            self.batch_idx = 0
            self.epoch_losses = []
            self._epoch_t0 = time.perf_counter()
        bs = self.batch_size
        idx = self.perm[self.batch_idx * bs : (self.batch_idx + 1) * bs]
        augment = self.cfg.augment and self.data.modality != "graph"
        imaging = self.data.imaging(idx, self.rng, augment)
        zi, zt = self.model(imaging, self.data.tabular[idx])
        loss = clip_loss(zi, zt, self.cfg.tau, self.cfg.lam, self.cfg.mode)
        loss.backward()
        nc.adam_step(self.params, self.adam)
        value = loss.item()
        self.epoch_losses.append(value)
        self.batch_idx += 1
        self.step_count += 1
        if self.batch_idx >= self.batches_per_epoch:
            self._finish_epoch()
        return value

    def _finish_epoch(self):
        entry = {"epoch": self.epoch, "mean_loss": float(np.mean(self.epoch_losses))}
        wall = time.perf_counter() - getattr(self, "_epoch_t0", time.perf_counter())
        self.history.append(entry)
        self.last_log = dict(entry, wall_seconds=wall)
        self.epoch += 1
        self.perm = None

    def run(self, epochs=None, max_steps=None, log_file=None, on_epoch=None):
        """Train until ``epochs`` total epochs are done or ``max_steps`` more steps ran."""
        target = self.cfg.epochs if epochs is None else epochs
        done = 0
        while self.epoch < target and (max_steps is None or done < max_steps):
            before = self.epoch
            self.step()
            done += 1
            if self.epoch != before:
                line = json.dumps(self.last_log)
                log.info("pretrain %s", line)
                if log_file is not None:
                    log_file.write(line + "\n")
                    log_file.flush()
                if on_epoch is not None:
                    on_epoch(self.last_log)
        return self

    # -- persistence ---------------------------------------------------------------
    def state(self):
        header = {
            "format": FORMAT,
            "config": asdict(self.cfg),
            "architecture": asdict(self.model.arch),
            "epoch": self.epoch,
            "batch_idx": self.batch_idx,
            "step": self.step_count,
            "epoch_losses": self.epoch_losses,
            "history": self.history,
            "rng": self.rng.bit_generator.state,
            "adam": {"t": self.adam.t, "lr": self.adam.lr, "beta1": self.adam.beta1,
                     "beta2": self.adam.beta2, "eps": self.adam.eps},
        }
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        names = [n for n, _ in self.model.named_parameters()]
        for n, m, v in zip(names, self.adam.m, self.adam.v):
            tensors[f"adam_m.{n}"] = m
            tensors[f"adam_v.{n}"] = v
        if self.perm is not None:
            tensors["perm"] = self.perm.astype(np.float64)
        return header, tensors

    def save(self, path):
        header, tensors = self.state()
        save_checkpoint(path, header, tensors)

    @classmethod
    def restore(cls, header, tensors, data):
        if header.get("format") != FORMAT:
            raise ValueError("not a pretraining checkpoint")
        cfg = ContrastiveConfig(**header["config"])
        model = ContrastiveModel(Architecture(**header["architecture"]))
        model.load_state_dict(tensors, prefix="model.")
        self = cls(model, data, cfg)
        self.epoch, self.batch_idx, self.step_count = header["epoch"], header["batch_idx"], header["step"]
        self.epoch_losses = list(header["epoch_losses"])
        self.history = list(header["history"])
        self.rng = _rng_from_state(header["rng"])
        a = header["adam"]
        self.adam.t = a["t"]
        names = [n for n, _ in model.named_parameters()]
        self.adam.m = [tensors[f"adam_m.{n}"].copy() for n in names]
        self.adam.v = [tensors[f"adam_v.{n}"].copy() for n in names]
        self.perm = tensors["perm"].astype(np.int64) if "perm" in tensors else None
        return self

    @classmethod
    def load(cls, path, data):
        header, tensors = load_checkpoint(path)
        return cls.restore(header, tensors, data)


def pretrain(data, arch, cfg, log_file=None, max_steps=None, model_seed=None):
    """Build a fresh model for ``arch`` and train it; returns the Pretrainer."""
    model = ContrastiveModel(arch, cfg.seed if model_seed is None else model_seed)
    return Pretrainer(model, data, cfg).run(max_steps=max_steps, log_file=log_file)


def load_encoders(path):
    """Return (architecture, image encoder, tabular encoder) from a pretraining checkpoint."""
    header, tensors = load_checkpoint(path)
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}: not a pretraining checkpoint")
    arch = Architecture(**header["architecture"])
    model = ContrastiveModel(arch)
    model.load_state_dict(tensors, prefix="model.")
    return arch, model.f_i, model.f_t
