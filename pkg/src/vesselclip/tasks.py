"""Balanced splits, supervised fine-tuning of the five methods, AUROC and ROC evaluation."""
import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .contrastive import Architecture, ContrastiveModel, load_encoders
from .dataprep import IterativeImputer, preprocess_image, read_csv, write_csv
from .encoders import CNNEncoder, CnnConfig, Linear, MLP, MlpConfig, Module, load_checkpoint, save_checkpoint
from .vesselgraph import NormStats, features_or_placeholder

log = logging.getLogger(__name__)

METHODS = ("tabular-nn", "multimodal-nn", "cl-raw", "cl-prob", "cl-graph")
CL_MODALITY = {"cl-raw": "raw", "cl-prob": "prob", "cl-graph": "graph"}
FORMAT = "vesselclip-finetune"
IMAGE_CACHE = 2000  # preprocessed images kept in memory (float32, ~200 MB for RGB)


class SplitLeakError(AssertionError):
    """A test-set row reached a fitting step."""


# -- metrics -------------------------------------------------------------------------

def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores for {len(labels)} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0/1")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("AUROC needs both classes present")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores, labels


def auroc(scores, labels):
    """Mann-Whitney U / (n_pos * n_neg) from average ranks; ties count one half."""
    from scipy.stats import rankdata

    scores, labels = _check_binary(scores, labels)
    ranks = rankdata(scores, method="average")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels):
    """(FPR, TPR) pairs, one per distinct threshold in descending order, framed by (0,0) and (1,1)."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # final index of each tie block
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    return list(zip(fpr.tolist(), tpr.tolist()))


def trapezoid_area(points):
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


# -- splits ---------------------------------------------------------------------------

@dataclass
class CohortSplit:
    test: np.ndarray
    train: np.ndarray
    val: np.ndarray
    balanced: np.ndarray  # fine-tune rows, a subset of train
    balanced_val: np.ndarray  # early-stopping rows, a subset of val
    seed: int = 0

    def assignment(self, n):
        out = np.full(n, "", dtype=object)
        out[self.train], out[self.val], out[self.test] = "train", "val", "test"
        if (out == "").any():
            raise ValueError("split does not cover the cohort")
        return out

    def guard(self, idx, what="fitting"):
        leaked = np.intersect1d(np.asarray(idx, dtype=np.int64), self.test)
        if leaked.size:
            raise SplitLeakError(f"{what} touched {leaked.size} test rows (first: {leaked[0]})")

    @classmethod
    def from_assignment(cls, assignment, labels, seed=0, neg_ratio=1.0, max_labels=None):
        assignment = np.asarray(assignment)
        labels = np.asarray(labels)
        parts = {k: np.flatnonzero(assignment == k) for k in ("train", "val", "test")}
        if sum(len(v) for v in parts.values()) != len(labels):
            raise ValueError(f"unknown split values: {sorted(set(assignment) - {'train', 'val', 'test'})}")
        rng = np.random.default_rng([seed, 1])
        bal = balanced_subset(labels, parts["train"], rng, neg_ratio, max_labels)
        bal_val = balanced_subset(labels, parts["val"], rng, 1.0, None)
        return cls(parts["test"], parts["train"], parts["val"], bal, bal_val, seed)


def balanced_subset(labels, pool, rng, neg_ratio=1.0, max_labels=None):
    """All positives in ``pool`` plus round(neg_ratio * n_pos) negatives drawn without replacement.

    ``max_labels`` caps the total, thinning positives first so the ratio holds.
    """
    labels = np.asarray(labels)
    pool = np.asarray(pool)
    pos, neg = pool[labels[pool] == 1], pool[labels[pool] == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError(f"degenerate labels: {len(pos)} positives, {len(neg)} negatives")
    if neg_ratio <= 0:
        raise ValueError("neg_ratio must be positive")
    if max_labels is not None:
        keep = max(1, int(max_labels // (1 + neg_ratio)))
        if keep < len(pos):
            pos = np.sort(rng.choice(pos, keep, replace=False))
    n_neg = int(round(neg_ratio * len(pos)))
    if n_neg > len(neg):
        raise ValueError(f"need {n_neg} negatives, only {len(neg)} available")
    chosen = rng.choice(neg, n_neg, replace=False)
    return np.sort(np.r_[pos, chosen])


def _stratified_take(idx_by_class, frac, rng):
    take, rest = [], []
    for idx in idx_by_class:
        idx = rng.permutation(idx)
        k = int(round(frac * len(idx)))
        take.append(idx[:k])
        rest.append(idx[k:])
    return take, rest


def make_balanced_split(labels, ratios=(0.2, 0.2), seed=0, neg_ratio=1.0, max_labels=None):
    """Stratified test split, then a stratified train/validation split of the remainder."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be a 1-D 0/1 array")
    rng = np.random.default_rng([seed, 0])
    by_class = [np.flatnonzero(labels == c) for c in (0, 1)]
    test, rest = _stratified_take(by_class, ratios[0], rng)
    val, train = _stratified_take(rest, ratios[1], rng)
    test, val, train = (np.sort(np.concatenate(p)) for p in (test, val, train))
    rng = np.random.default_rng([seed, 1])
    bal = balanced_subset(labels, train, rng, neg_ratio, max_labels)
    bal_val = balanced_subset(labels, val, rng, 1.0, None)
    return CohortSplit(test, train, val, bal, bal_val, seed)


# -- cohort data --------------------------------------------------------------------

class CohortData:
    """Raw rows, labels and split plus lazy access to every imaging modality.

    ``graphs`` maps a subject index to a VesselGraph; ``images`` maps a
    modality name to a function (index) -> HxW or HxWxC uint8 array.
    """

    def __init__(self, rows, schema, labels, assignment, graphs=None, images=None, root=None):
        self.rows, self.schema = rows, schema
        self.labels = np.asarray(labels, dtype=np.int64)
        self.assignment = np.asarray(assignment)
        self.graph_fn = graphs
        self.image_fns = images or {}
        self.root = root
        self._tab = self._feats = None
        self._img_cache = {}

    def __len__(self):
        return len(self.labels)

    @property
    def fit_rows(self):
        # preprocessing statistics come from train + validation, never test
        return np.flatnonzero(self.assignment != "test")

    def tabular(self):
        if self._tab is None:
            fit = self.fit_rows
            schema = copy.deepcopy(self.schema)
            schema.means, schema.stds = {}, {}
            schema.fit([self.rows[i] for i in fit])
            x = schema.encode(self.rows)
            imp = IterativeImputer()
            imp.fit_transform(x[fit])
            self._tab = imp.transform(x)
        return self._tab

    def has(self, modality):
        return self.graph_fn is not None if modality == "graph" else modality in self.image_fns

    def graph_features(self):
        if self._feats is None:
            if self.graph_fn is None:
                raise ValueError("cohort has no vessel graphs")
            graphs = [self.graph_fn(i) for i in range(len(self))]
            stats = NormStats.fit([graphs[i] for i in self.fit_rows])
            self._feats = [features_or_placeholder(g, stats, label=str(i)) for i, g in enumerate(graphs)]
        return self._feats

    def images(self, modality, idx):
        if modality not in self.image_fns:
            raise ValueError(f"cohort has no {modality} images")
        out = []
        for i in np.asarray(idx):
            key = (modality, int(i))
            img = self._img_cache.get(key)
            if img is None:
                img = preprocess_image(self.image_fns[modality](int(i)))
                if len(self._img_cache) < IMAGE_CACHE:
                    self._img_cache[key] = img.astype(np.float32)
            out.append(img)
        return np.stack(out).astype(np.float64)

    def imaging(self, modality, idx):
        if modality == "graph":
            from .encoders import collate

            feats = self.graph_features()
            return collate([feats[i] for i in idx])
        return self.images(modality, idx)


def load_cohort(root):
    """Open a dataset directory written by synthdata or by hand in the same layout."""
    from .dataprep import TabularSchema
    from .imageio import read_image, read_mask
    from .synthdata import COHORT_META
    from .vesselgraph import extract_graph, load_graph

    header, rows = read_csv(os.path.join(root, "cohort.csv"))
    with open(os.path.join(root, "manifest.json")) as fh:
        manifest = json.load(fh)
    schema = TabularSchema.from_json(manifest["schema"])
    col = {h: k for k, h in enumerate(header)}
    missing = [h for h in COHORT_META + [f.name for f in schema.fields] if h not in col]
    if missing:
        raise ValueError(f"cohort.csv lacks columns {missing}")
    labels = [int(r[col["label"]]) for r in rows]
    assignment = [r[col["split"]] for r in rows]
    ids = [r[col["subject"]] for r in rows]
    table = [[r[col[f.name]] for f in schema.fields] for r in rows]

    def path(sub, i, ext):
        return os.path.join(root, sub, ids[i] + ext)

    def graph(i):
        p = path("graphs", i, ".json")
        if os.path.exists(p):
            return load_graph(p)
        return extract_graph(read_mask(path("masks", i, ".pgm")))

    images = {}
    if os.path.isdir(os.path.join(root, "raw")):
        images["raw"] = lambda i: read_image(path("raw", i, ".png"))
    if os.path.isdir(os.path.join(root, "prob")):
        images["prob"] = lambda i: read_image(path("prob", i, ".pgm"))
    graphs = graph if os.path.isdir(os.path.join(root, "graphs")) or os.path.isdir(os.path.join(root, "masks")) else None
    return CohortData(table, schema, labels, assignment, graphs, images, root=root)


# -- models -------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    lr: float = 1e-3
    encoder_lr_scale: float = 0.1
    freeze_encoders: bool = False
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    neg_ratio: float = 1.0
    max_labels: int = None
    from_scratch: bool = False
    permute_labels: bool = False
    tab_hidden: int = 256
    image_embed: int = 256

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("lr, batch_size, patience and max_epochs must be positive")


class Classifier(Module):
    """Per-method network mapping (imaging, tabular) to two logits."""

    def __init__(self, method, tab_dim, rng, cfg, arch=None, encoders=None):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
        self.method = method
        self.modality = CL_MODALITY.get(method, "raw" if method == "multimodal-nn" else None)
        if method == "tabular-nn":
            self.tab = MLP(MlpConfig(tab_dim, (cfg.tab_hidden,), 2), rng)
        elif method == "multimodal-nn":
            self.tab = MLP(MlpConfig(tab_dim, (cfg.tab_hidden,), cfg.tab_hidden), rng)
            self.img = CNNEncoder(CnnConfig(in_channels=3), rng)
            self.img_proj = Linear(self.img.d_out, cfg.image_embed, rng)
            self.head = Linear(cfg.tab_hidden + cfg.image_embed, 2, rng)
        else:
            self.f_i, self.f_t = encoders
            self.head = Linear(self.f_i.d_out + self.f_t.d_out, 2, rng)
        self.arch = arch

    def encoder_params(self):
        if self.method.startswith("cl-"):
            return {id(p) for p in self.f_i.parameters()} | {id(p) for p in self.f_t.parameters()}
        return set()

    def forward(self, imaging, tabular):
        if self.method == "tabular-nn":
            return self.tab(tabular)
        if self.method == "multimodal-nn":
            t = self.tab(tabular)
            i = self.img_proj(self.img(imaging))
            return self.head(nc.concat([t, i], axis=1))
        return self.head(nc.concat([self.f_i(imaging), self.f_t(tabular)], axis=1))


def build_classifier(method, tab_dim, cfg, checkpoint=None):
    rng = np.random.default_rng([cfg.seed, 2])
    arch, encoders = None, None
    if method in CL_MODALITY:
        if checkpoint is not None and not cfg.from_scratch:
            arch, f_i, f_t = load_encoders(checkpoint)
            if arch.modality != CL_MODALITY[method]:
                raise ValueError(f"{method} needs a {CL_MODALITY[method]} checkpoint, got {arch.modality}")
            if arch.tab_dim != tab_dim:
                raise ValueError(f"checkpoint tabular width {arch.tab_dim} != cohort width {tab_dim}")
        elif cfg.from_scratch:
            arch = Architecture(CL_MODALITY[method], tab_dim)
            fresh = ContrastiveModel(arch, seed=cfg.seed)
            f_i, f_t = fresh.f_i, fresh.f_t
        else:
            raise ValueError(f"{method} needs a pretraining checkpoint (or from_scratch)")
        encoders = (f_i, f_t)
    return Classifier(method, tab_dim, rng, cfg, arch, encoders)


# -- training ------------------------------------------------------------------------

@dataclass
class EvalReport:
    method: str
    auroc: float
    n_pos: int
    n_neg: int
    seed: int
    config_hash: str
    roc: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        doc["roc"] = [list(p) for p in doc["roc"]]
        return cls(**doc)

    def save(self, path, roc_csv=None):
        with open(path, "w") as fh:
            fh.write(self.to_json())
        if roc_csv:
            write_csv(roc_csv, ["fpr", "tpr"], [[repr(a), repr(b)] for a, b in self.roc])


def config_hash(doc):
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _file_digest(path):
    if path is None:
        return None
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def predict(model, data, idx, batch_size=256):
    """Logit difference (class 1 minus class 0) per row; monotone in the class-1 probability."""
    tab = data.tabular()
    out = []
    with nc.no_grad():
        for lo in range(0, len(idx), batch_size):
            b = idx[lo : lo + batch_size]
            imaging = data.imaging(model.modality, b) if model.modality else None
            logits = model(imaging, tab[b]).data
            out.append(logits[:, 1] - logits[:, 0])
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model, data, idx, labels, method, seed, chash):
    scores = predict(model, data, idx)
    y = labels[idx]
    return EvalReport(method, auroc(scores, y), int(y.sum()), int(len(y) - y.sum()), seed, chash,
                      [list(p) for p in roc_points(scores, y)])


@dataclass
class FinetuneResult:
    model: Classifier
    report: EvalReport
    history: list
    best_epoch: int
    header: dict


def finetune(data, method, cfg=None, checkpoint=None, log_fn=None):
    """Train one method on the balanced subset, stop early on validation AUROC, report on test."""
    cfg = cfg or FinetuneConfig()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    needed = CL_MODALITY.get(method, "raw" if method == "multimodal-nn" else None)
    if needed and not data.has(needed):
        raise ValueError(f"{method} needs the {needed} modality, which this cohort lacks")
    split = CohortSplit.from_assignment(data.assignment, data.labels, cfg.seed, cfg.neg_ratio, cfg.max_labels)
    train_idx, val_idx = split.balanced, split.balanced_val
    split.guard(train_idx, "training batches")
    split.guard(val_idx, "early stopping")
    split.guard(data.fit_rows, "preprocessing statistics")

    labels = data.labels.copy()
    rng = np.random.default_rng([cfg.seed, 3])
    if cfg.permute_labels:
        # no-signal control: shuffle labels among the fitting rows only
        for part in (train_idx, val_idx):
            labels[part] = labels[rng.permutation(part)]

    tab = data.tabular()
    model = build_classifier(method, tab.shape[1], cfg, checkpoint)
    params = model.parameters()
    enc = model.encoder_params()
    scale = 0.0 if cfg.freeze_encoders else cfg.encoder_lr_scale
    adam = nc.AdamState.create(params, cfg.lr, lr_scale=[scale if id(p) in enc else 1.0 for p in params])

    resolved = {"method": method, "finetune": asdict(cfg), "checkpoint_sha256": _file_digest(checkpoint),
                "n_subjects": len(data)}
    chash = config_hash(resolved)
    best, best_state, best_epoch, bad, history = -1.0, None, -1, 0, []
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(train_idx)
        losses = []
        for lo in range(0, len(perm), cfg.batch_size):
            b = perm[lo : lo + cfg.batch_size]
            imaging = data.imaging(model.modality, b) if model.modality else None
            loss = nc.cross_entropy(model(imaging, tab[b]), labels[b])
            loss.backward()
            nc.adam_step(params, adam)
            losses.append(loss.item())
        val_auc = auroc(predict(model, data, val_idx), labels[val_idx])
        history.append({"epoch": epoch, "mean_loss": float(np.mean(losses)), "val_auroc": val_auc})
        if log_fn:
            log_fn(history[-1])
        if val_auc > best:
            best, best_epoch, bad = val_auc, epoch, 0
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    model.load_state_dict(best_state)
    report = evaluate(model, data, split.test, data.labels, method, cfg.seed, chash)
    header = {"format": FORMAT, "method": method, "config": resolved, "config_hash": chash,
              "tab_dim": int(tab.shape[1]), "best_epoch": best_epoch, "best_val_auroc": best,
              "architecture": asdict(model.arch) if model.arch else None}
    return FinetuneResult(model, report, history, best_epoch, header)


def save_finetuned(path, result):
    save_checkpoint(path, result.header, result.model.state_dict())


def load_finetuned(path):
    """Rebuild a fine-tuned classifier; returns (model, header)."""
    header, tensors = load_checkpoint(path)
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}: not a fine-tuned checkpoint")
    fields = {k: v for k, v in header["config"]["finetune"].items()}
    cfg = FinetuneConfig(**fields)
    method = header["method"]
    encoders = None
    arch = None
    if method in CL_MODALITY:
        arch = Architecture(**header["architecture"])
        fresh = ContrastiveModel(arch, seed=0)
        encoders = (fresh.f_i, fresh.f_t)
    model = Classifier(method, header["tab_dim"], np.random.default_rng(0), cfg, arch, encoders)
    model.load_state_dict(tensors)
    return model, header


# -- reporting -----------------------------------------------------------------------

def _row_key(r):
    return r.method


def summarize(reports):
    """Mean AUROC per method in the canonical order; unknown labels sort last."""
    groups = {}
    for r in reports:
        groups.setdefault(_row_key(r), []).append(r.auroc)
    order = {m: k for k, m in enumerate(METHODS)}
    keys = sorted(groups, key=lambda m: (order.get(m, len(METHODS)), m))
    return [(m, float(np.mean(groups[m])), float(np.std(groups[m])), len(groups[m])) for m in keys]


def format_report(reports):
    """Aligned text table plus CSV rows.

    Every row shows its gain over the best supervised baseline both as an
    absolute AUROC difference and as a relative change.
    """
    rows = summarize(reports)
    supervised = [(m, a) for m, a, _, _ in rows if m in ("tabular-nn", "multimodal-nn")]
    base_name, base = max(supervised, key=lambda t: t[1]) if supervised else (None, None)
    header = ["method", "auroc", "std", "runs", "delta_abs", "delta_rel"]
    csv_rows = []
    for m, a, s, k in rows:
        if base is None or m == base_name:
            da = dr = ""
        else:
            da, dr = f"{a - base:+.4f}", f"{(a / base - 1) * 100:+.2f}%"
        csv_rows.append([m, f"{a:.4f}", f"{s:.4f}", str(k), da, dr])
    widths = [max(len(header[j]), *(len(r[j]) for r in csv_rows)) for j in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in csv_rows]
    if base_name:
        lines.append(f"deltas relative to {base_name}")
    return "\n".join(lines) + "\n", [header] + csv_rows
