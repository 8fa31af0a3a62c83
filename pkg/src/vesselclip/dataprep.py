"""Tabular encoding, iterative imputation, and image preprocessing/augmentation."""
import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

MISSING = ("", "NA")
IMAGE_SIZE = 128


# -- tabular -------------------------------------------------------------------

@dataclass
class FieldSpec:
    name: str
    kind: str  # continuous | binary | categorical
    levels: tuple = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "binary", "categorical"):
            raise ValueError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "binary" and not self.levels:
            self.levels = ("0", "1")
        self.levels = tuple(str(v) for v in self.levels)
        if self.kind == "binary" and len(self.levels) != 2:
            raise ValueError(f"binary field {self.name!r} needs exactly 2 levels")
        if self.kind == "categorical" and not self.levels:
            raise ValueError(f"categorical field {self.name!r} has no levels")

    @property
    def width(self):
        return 1 if self.kind == "continuous" else len(self.levels)


def _is_missing(v):
    if v is None:
        return True
    if isinstance(v, float) and math.isnan(v):
        return True
    return isinstance(v, str) and v.strip() in MISSING


def _level_key(v):
    # "1", 1 and 1.0 all name the same level
    if isinstance(v, (int, float, np.integer, np.floating)) and float(v).is_integer():
        return str(int(v))
    return str(v).strip()


@dataclass
class TabularSchema:
    fields: list
    means: dict = field(default_factory=dict)
    stds: dict = field(default_factory=dict)

    @property
    def width(self):
        return sum(f.width for f in self.fields)

    @property
    def column_names(self):
        names = []
        for f in self.fields:
            names += [f.name] if f.kind == "continuous" else [f"{f.name}={lv}" for lv in f.levels]
        return names

    @property
    def fitted(self):
        return all(f.name in self.means for f in self.fields if f.kind == "continuous")

    def fit(self, rows):
        """Learn per-continuous-field mean and population std from ``rows`` (training split only)."""
        rows = self._check(rows)
        for j, f in enumerate(self.fields):
            if f.kind != "continuous":
                continue
            vals = np.array([float(r[j]) for r in rows if not _is_missing(r[j])])
            if len(vals) == 0:
                self.means[f.name], self.stds[f.name] = 0.0, 1.0
                continue
            mu = float(vals.mean())
            sd = float(np.sqrt(((vals - mu) ** 2).mean()))
            self.means[f.name] = mu
            self.stds[f.name] = sd if sd > 0 else 1.0
        return self

    def encode(self, rows):
        """Raw rows -> float matrix; missing cells (whole block for one-hot fields) become NaN."""
        if not self.fitted:
            raise ValueError("schema must be fitted before encoding")
        rows = self._check(rows)
        out = np.zeros((len(rows), self.width))
        unseen = {}
        col = 0
        for j, f in enumerate(self.fields):
            if f.kind == "continuous":
                for i, r in enumerate(rows):
                    v = r[j]
                    out[i, col] = np.nan if _is_missing(v) else (float(v) - self.means[f.name]) / self.stds[f.name]
            else:
                index = {lv: k for k, lv in enumerate(f.levels)}
                for i, r in enumerate(rows):
                    v = r[j]
                    if _is_missing(v):
                        out[i, col : col + f.width] = np.nan
                        continue
                    k = index.get(_level_key(v))
                    if k is None:
                        unseen.setdefault(f.name, set()).add(_level_key(v))
                    else:
                        out[i, col + k] = 1.0
            col += f.width
        for name, vals in unseen.items():
            log.warning("field %s: unseen categories %s encoded as all zeros", name, sorted(vals))
        return out

    def _check(self, rows):
        rows = list(rows)
        for i, r in enumerate(rows):
            if len(r) != len(self.fields):
                raise ValueError(f"row {i} has {len(r)} values, schema has {len(self.fields)} fields")
        return rows

    def to_json(self):
        return {
            "fields": [{"name": f.name, "kind": f.kind, "levels": list(f.levels)} for f in self.fields],
            "means": self.means,
            "stds": self.stds,
        }

    @classmethod
    def from_json(cls, doc):
        fields = [FieldSpec(d["name"], d["kind"], tuple(d.get("levels", ()))) for d in doc["fields"]]
        return cls(fields, dict(doc.get("means", {})), dict(doc.get("stds", {})))


def save_schema(path, schema):
    with open(path, "w") as fh:
        json.dump(schema.to_json(), fh, indent=1)


def load_schema(path):
    with open(path) as fh:
        return TabularSchema.from_json(json.load(fh))


def encode_tabular(rows, schema):
    return schema.encode(rows)


def read_csv(path):
    """Return (header, rows); missing markers ("" or "NA") become None."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[None if v.strip() in MISSING else v for v in r] for r in reader]
    return header, rows


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["NA" if _is_missing(v) else v for v in r])


class IterativeImputer:
    """Round-robin ridge regression of each incomplete column on all the others.

    Fit on training rows; ``transform`` replays the same rounds on new rows
    using the stored training means and per-round coefficients, so held-out
    data never feeds back into the regressions.
    """

    def __init__(self, rounds=10, ridge=1e-3, tol=1e-6):
        self.rounds, self.ridge, self.tol = rounds, ridge, tol

    def fit_transform(self, X):
        X = np.array(X, dtype=np.float64)
        miss = np.isnan(X)
        n, d = X.shape
        self.means_ = np.zeros(d)
        for j in range(d):
            obs = ~miss[:, j]
            if obs.any():
                self.means_[j] = X[obs, j].mean()
            else:
                log.warning("column %d has no observed values; filling with 0", j)
        X[miss] = np.take(self.means_, np.nonzero(miss)[1])
        self.targets_ = [j for j in range(d) if miss[:, j].any() and not miss[:, j].all()]
        self.coefs_ = []
        for _ in range(self.rounds):
            round_coefs, delta = [], 0.0
            for j in self.targets_:
                obs = ~miss[:, j]
                others = np.delete(np.arange(d), j)
                A, y = X[obs][:, others], X[obs, j]
                a_mu, y_mu = A.mean(axis=0), y.mean()
                Ac = A - a_mu
                beta = np.linalg.solve(Ac.T @ Ac + self.ridge * np.eye(d - 1), Ac.T @ (y - y_mu))
                b0 = y_mu - a_mu @ beta
                new = X[~obs][:, others] @ beta + b0
                delta = max(delta, float(np.abs(new - X[~obs, j]).max()))
                X[~obs, j] = new
                round_coefs.append((j, beta, b0))
            self.coefs_.append(round_coefs)
            if delta < self.tol:
                break
        return X

    def transform(self, X):
        X = np.array(X, dtype=np.float64)
        miss = np.isnan(X)
        X[miss] = np.take(self.means_, np.nonzero(miss)[1])
        d = X.shape[1]
        for round_coefs in self.coefs_:
            for j, beta, b0 in round_coefs:
                rows = miss[:, j]
                if rows.any():
                    X[rows, j] = X[rows][:, np.delete(np.arange(d), j)] @ beta + b0
        return X


def iterative_impute(X, rounds=10, ridge=1e-3, tol=1e-6):
    return IterativeImputer(rounds, ridge, tol).fit_transform(X)


# -- images --------------------------------------------------------------------

def cubic_kernel(t, a=-0.5):
    t = np.abs(t)
    return np.where(
        t <= 1, (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0),
    )


def _resize_matrix(n_in, n_out, a=-0.5):
    """Rows hold the bicubic weights mapping n_in samples onto n_out.

    Pixel centres are aligned (half-pixel convention); on downscaling the
    kernel is stretched by the scale factor so it also low-pass filters.
    Taps falling outside the image are dropped and the rest renormalised.
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    support = 2.0 * stretch
    M = np.zeros((n_out, n_in))
    for i in range(n_out):
        centre = (i + 0.5) * scale
        lo = max(int(centre - support + 0.5), 0)
        hi = min(int(centre + support + 0.5), n_in)
        w = cubic_kernel((np.arange(lo, hi) - centre + 0.5) / stretch, a)
        M[i, lo:hi] = w / w.sum()
    return M


def resize_bicubic(img, size):
    """Resize a C x H x W float image to C x size x size."""
    _, h, w = img.shape
    Mh, Mw = _resize_matrix(h, size), _resize_matrix(w, size)
    return Mh @ img @ Mw.T


def _as_chw(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None]
    if img.ndim == 3:
        if img.shape[2] in (1, 3) and img.shape[0] not in (1, 3):
            return np.transpose(img, (2, 0, 1))
        return img
    raise ValueError(f"expected a 2-D or 3-D image, got shape {img.shape}")


def _minmax(img):
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def preprocess_image(raw, size=IMAGE_SIZE):
    """Centre-crop to a square, min-max to [0, 1], bicubic resize, clamp.

    Accepts H x W, H x W x C or C x H x W and returns C x size x size.  The
    final min-max pass makes the output exactly span [0, 1] so running the
    function on its own output is a no-op.
    """
    img = _as_chw(raw)
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than {size}x{size}")
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    img = _minmax(img[:, top : top + s, left : left + s])
    if s != size:
        img = np.clip(resize_bicubic(img, size), 0.0, 1.0)
        img = _minmax(img)
    return img


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    angle: float = 0.0
    brightness: float = 1.0
    contrast: float = 1.0


def sample_augment(rng, max_angle=15.0, jitter=0.2, flip_p=0.5):
    return AugmentParams(
        flip=bool(rng.random() < flip_p),
        angle=float(rng.uniform(-max_angle, max_angle)),
        brightness=float(rng.uniform(1 - jitter, 1 + jitter)),
        contrast=float(rng.uniform(1 - jitter, 1 + jitter)),
    )


def apply_augment(img, p):
    img = np.asarray(img, dtype=np.float64)
    out = img[:, :, ::-1] if p.flip else img
    if p.angle != 0.0:
        th = math.radians(p.angle)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        centre = (np.array(out.shape[1:]) - 1) / 2.0
        offset = centre - rot @ centre
        out = np.stack([ndimage.affine_transform(c, rot, offset, order=1, mode="constant", cval=0.0) for c in out])
    if p.brightness != 1.0 or p.contrast != 1.0:
        out = out * p.brightness
        mu = out.mean()
        out = (out - mu) * p.contrast + mu
    return np.clip(out, 0.0, 1.0)


def augment_image(img, rng, max_angle=15.0, jitter=0.2):
    """Random flip, rotation and brightness/contrast jitter.  Never call this on graphs."""
    return apply_augment(img, sample_augment(rng, max_angle, jitter))
