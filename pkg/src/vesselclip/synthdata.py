"""Deterministic synthetic cohorts: vessel-tree masks, pseudo-fundus images, tabular records, labels.

Every subject is generated from its own RNG streams keyed by (seed, index),
so any subject can be regenerated alone and cohorts can be built in
parallel without changing a single byte.
"""
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataprep import FieldSpec, TabularSchema, write_csv
from .vesselgraph.phantoms import stroke_many

log = logging.getLogger(__name__)

SIZE = 128
PROB_SIGMA = 1.5
MISSING_RATE = 0.05

# Label model: logit = W0 + W_TORT * z(tortuosity) + W_BRANCH * z(branch) + W_RISK * risk + N(0, LABEL_NOISE^2).
# z() standardises a U(0, 1) latent.  W0 is solved for the target prevalence.
W_TORT = 2.4
W_BRANCH = 1.0
W_RISK = 0.8
LABEL_NOISE = 0.5
PREVALENCE = 0.10

_UNIFORM_SD = math.sqrt(1 / 12)


# -- latents -----------------------------------------------------------------------

@dataclass
class LatentSubject:
    tortuosity: float  # U(0, 1); wiggle amplitude of vessel headings
    branching: float  # U(0, 1); per-step branch probability scale
    caliber: float  # U(0, 1); vessel half-width scale
    risk: float  # N(0, 1); clinical risk, seen only through the table
    p: float = 0.0
    label: int = 0


def z_uniform(u):
    return (u - 0.5) / _UNIFORM_SD


def label_logit(lat, intercept, noise=0.0):
    return (intercept + W_TORT * z_uniform(lat.tortuosity) + W_BRANCH * z_uniform(lat.branching)
            + W_RISK * lat.risk + noise)


_INTERCEPTS = {}


def intercept_for(prevalence=PREVALENCE):
    """Intercept giving the requested expected prevalence (bisection on a fixed quadrature sample)."""
    if prevalence in _INTERCEPTS:
        return _INTERCEPTS[prevalence]
    if not 0 < prevalence < 1:
        raise ValueError(f"prevalence must lie in (0, 1), got {prevalence}")
    rng = np.random.default_rng(12345)
    n = 400_000
    core = (W_TORT * z_uniform(rng.random(n)) + W_BRANCH * z_uniform(rng.random(n))
            + W_RISK * rng.standard_normal(n) + LABEL_NOISE * rng.standard_normal(n))
    lo, hi = -20.0, 20.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if np.mean(1 / (1 + np.exp(-(core + mid)))) < prevalence:
            lo = mid
        else:
            hi = mid
    _INTERCEPTS[prevalence] = 0.5 * (lo + hi)
    return _INTERCEPTS[prevalence]


def _streams(seed, index):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return [np.random.default_rng(s) for s in ss.spawn(3)]  # latent/table, tree, background


def draw_latent(rng, prevalence=PREVALENCE):
    lat = LatentSubject(float(rng.random()), float(rng.random()), float(rng.random()), float(rng.standard_normal()))
    z = label_logit(lat, intercept_for(prevalence), LABEL_NOISE * rng.standard_normal())
    lat.p = float(1 / (1 + math.exp(-z)))
    lat.label = int(rng.random() < lat.p)
    return lat


# -- vessel trees ----------------------------------------------------------------------

STEP = 2.0
WIGGLE_PERIOD = 24.0  # arc length (px) of one heading oscillation
MAX_WIGGLE = 1.2  # radians at tortuosity 1; below ~1.2 rad paths never self-cross
MAX_BRANCH_RATE = 0.07  # branch events per step at branch intensity 1
MAX_GENERATION = 3
WIDTH_DECAY = 0.8


@dataclass
class TreeStats:
    branches: int
    segments: int
    mean_tortuosity: float  # arc / chord, averaged over walked paths


def gen_vessel_tree(lat, rng, size=SIZE):
    """Rasterise a branching walk from a border root; returns (mask, TreeStats).

    Headings follow base + A sin(2 pi s / period + phase) with amplitude A set
    by tortuosity.  Each step may spawn a child path, with probability set by
    branch intensity; children are narrower and shorter.
    """
    mask = np.zeros((size, size), bool)
    half_width = 0.9 + 0.9 * lat.caliber
    amp = MAX_WIGGLE * lat.tortuosity
    side = int(rng.integers(4))
    t = rng.uniform(0.25, 0.75) * (size - 1)
    root, heading = [((t, 1.0), math.pi / 2), ((size - 2.0, t), math.pi), ((t, size - 2.0), -math.pi / 2),
                     ((1.0, t), 0.0)][side]
    heading += rng.uniform(-0.35, 0.35)
    queue = [(root, heading, 0, half_width, size * 1.1)]
    ratios, branches, segments = [], 0, []
    while queue:
        (x, y), base, gen, hw, budget = queue.pop(0)
        phase = rng.uniform(0, 2 * math.pi)
        # offset so the wiggle starts tangent to the parent direction
        offset = amp * math.sin(phase)
        pts = [(x, y)]
        s = 0.0
        while s < budget:
            h = base + amp * math.sin(2 * math.pi * s / WIGGLE_PERIOD + phase) - offset
            nx, ny = x + STEP * math.cos(h), y + STEP * math.sin(h)
            if not (1 <= nx <= size - 2 and 1 <= ny <= size - 2):
                break
            segments.append((x, y, nx, ny, hw))
            x, y = nx, ny
            s += STEP
            pts.append((x, y))
            if gen < MAX_GENERATION and s > 12 and rng.random() < MAX_BRANCH_RATE * lat.branching:
                turn = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
                queue.append(((x, y), h + turn, gen + 1, max(hw * WIDTH_DECAY, 0.6), budget * 0.55))
                branches += 1
        if len(pts) > 3:
            chord = math.dist(pts[0], pts[-1])
            ratios.append(s / max(chord, 1e-9))
    stroke_many(mask, segments)
    return mask, TreeStats(branches, len(ratios), float(np.mean(ratios)) if ratios else 1.0)


def prob_mask(mask, sigma=PROB_SIGMA):
    return np.clip(ndimage.gaussian_filter(mask.astype(np.float64), sigma), 0.0, 1.0)


def pseudo_fundus(mask, rng, size=SIZE):
    """RGB uint8: reddish disc with low-frequency shading, vessels darker."""
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2
    r = np.hypot(yy - c, xx - c) / (size / 2)
    shade = ndimage.gaussian_filter(rng.standard_normal((size // 8, size // 8)), 1.5)
    shade = ndimage.zoom(shade, 8, order=1)[:size, :size]
    base = np.clip(1.0 - 0.35 * r**2, 0, 1) + 0.05 * shade
    vessels = ndimage.gaussian_filter(mask.astype(np.float64), 0.7)
    tint = np.array([0.85, 0.45, 0.2])
    img = base[..., None] * tint - vessels[..., None] * np.array([0.35, 0.25, 0.1])
    img += 0.02 * rng.standard_normal(img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


# -- tabular ---------------------------------------------------------------------------

# (name, kind, levels, loadings on (risk, tortuosity, branching, caliber), mean, sd)
# Continuous values are mean + sd * score; binary/categorical fields cut the
# score at fixed quantiles of N(0, 1).  Fields with all-zero loadings are noise.
_C, _B, _K = "continuous", "binary", "categorical"
FIELDS = [
    ("age", _C, (), (0.5, 0.3, 0, 0), 57.0, 8.0),
    ("systolic_bp", _C, (), (0.45, 0.5, 0, 0), 138.0, 18.0),
    ("diastolic_bp", _C, (), (0.30, 0.45, 0, 0), 82.0, 10.0),
    ("hba1c", _C, (), (0.35, 0, 0.5, 0), 36.0, 6.0),
    ("glucose", _C, (), (0.30, 0, 0.45, 0), 5.1, 1.1),
    ("bmi", _C, (), (0.35, 0, 0, 0), 27.4, 4.7),
    ("ldl", _C, (), (0.30, 0, 0, 0.35), 3.6, 0.9),
    ("hdl", _C, (), (-0.30, 0, 0, 0), 1.45, 0.38),
    ("total_cholesterol", _C, (), (0.25, 0, 0, 0), 5.7, 1.1),
    ("crp", _C, (), (0.25, 0, 0.35, 0), 2.6, 2.0),
    ("egfr", _C, (), (-0.30, 0, 0, 0), 90.0, 14.0),
    ("pulse_rate", _C, (), (0.20, 0, 0, 0.45), 70.0, 11.0),
    ("smoker", _B, ("0", "1"), (0.35, 0, 0, 0.3), 0.80, None),
    ("diabetes", _B, ("0", "1"), (0.40, 0, 0.45, 0), 0.92, None),
    ("hypertension", _B, ("0", "1"), (0.40, 0.45, 0, 0), 0.70, None),
    ("antihypertensive", _B, ("0", "1"), (0.30, 0.4, 0, 0), 0.78, None),
    ("statin", _B, ("0", "1"), (0.30, 0, 0, 0), 0.82, None),
    ("alcohol", _K, ("never", "monthly", "weekly", "daily"), (0.15, 0, 0, 0), (0.15, 0.35, 0.8), None),
    ("activity", _K, ("high", "moderate", "low"), (0.25, 0, 0, 0), (0.3, 0.7), None),
    # pure noise from here on
    ("height_cm", _C, (), (0, 0, 0, 0), 169.0, 9.0),
    ("sleep_hours", _C, (), (0, 0, 0, 0), 7.1, 1.1),
    ("townsend_index", _C, (), (0, 0, 0, 0), -1.3, 3.0),
    ("tea_cups", _C, (), (0, 0, 0, 0), 3.4, 2.6),
    ("coffee_cups", _C, (), (0, 0, 0, 0), 2.0, 2.0),
    ("screen_hours", _C, (), (0, 0, 0, 0), 2.8, 1.6),
    ("fruit_portions", _C, (), (0, 0, 0, 0), 2.9, 1.8),
    ("veg_portions", _C, (), (0, 0, 0, 0), 4.8, 3.0),
    ("water_glasses", _C, (), (0, 0, 0, 0), 2.7, 2.2),
    ("commute_minutes", _C, (), (0, 0, 0, 0), 24.0, 18.0),
    ("hearing_score", _C, (), (0, 0, 0, 0), -5.5, 2.3),
    ("reaction_ms", _C, (), (0, 0, 0, 0), 560.0, 110.0),
    ("grip_kg", _C, (), (0, 0, 0, 0), 31.0, 11.0),
    ("fev1_l", _C, (), (0, 0, 0, 0), 2.8, 0.8),
    ("neuroticism", _C, (), (0, 0, 0, 0), 4.1, 3.3),
    ("household_size", _C, (), (0, 0, 0, 0), 2.4, 1.2),
    ("visit_day", _C, (), (0, 0, 0, 0), 180.0, 100.0),
    ("sex", _B, ("F", "M"), (0, 0, 0, 0), 0.54, None),
    ("glasses", _B, ("0", "1"), (0, 0, 0, 0), 0.3, None),
    ("own_home", _B, ("0", "1"), (0, 0, 0, 0), 0.2, None),
    ("pet_owner", _B, ("0", "1"), (0, 0, 0, 0), 0.5, None),
    ("twin", _B, ("0", "1"), (0, 0, 0, 0), 0.97, None),
    ("ethnicity", _K, ("white", "asian", "black", "mixed", "other"), (0, 0, 0, 0), (0.9, 0.95, 0.97, 0.985), None),
    ("centre", _K, ("c1", "c2", "c3", "c4", "c5", "c6"), (0, 0, 0, 0), (0.17, 0.33, 0.5, 0.67, 0.83), None),
    ("education", _K, ("none", "school", "college", "degree"), (0, 0, 0, 0), (0.15, 0.45, 0.65), None),
    ("income_band", _K, ("low", "mid", "high"), (0, 0, 0, 0), (0.3, 0.75), None),
    ("handedness", _K, ("right", "left", "both"), (0, 0, 0, 0), (0.88, 0.98), None),
    ("employment", _K, ("employed", "retired", "other"), (0, 0, 0, 0), (0.55, 0.9), None),
    ("chronotype", _K, ("morning", "evening", "neither"), (0, 0, 0, 0), (0.45, 0.8), None),
    ("hair_colour", _K, ("dark", "brown", "fair", "red", "grey"), (0, 0, 0, 0), (0.2, 0.6, 0.8, 0.85), None),
]
assert len(FIELDS) == 49
NOISE_FIELDS = tuple(f[0] for f in FIELDS if not any(f[3]))


def cohort_schema():
    return TabularSchema([FieldSpec(name, kind, levels) for name, kind, levels, *_ in FIELDS])


def _normal_quantile(p):
    from scipy.special import ndtri

    return float(ndtri(p))


_CUTS = {f[0]: ([_normal_quantile(q) for q in f[4]] if f[1] == _K else [_normal_quantile(f[4])])
         for f in FIELDS if f[1] != _C}


def tabular_row(lat, rng, missing_rate=MISSING_RATE):
    """One raw record (strings, None for missing); fields in FIELDS order."""
    basis = np.array([lat.risk, z_uniform(lat.tortuosity), z_uniform(lat.branching), z_uniform(lat.caliber)])
    eps = rng.standard_normal(len(FIELDS))
    drop = rng.random(len(FIELDS)) < missing_rate
    row = []
    for j, (name, kind, levels, load, centre, sd) in enumerate(FIELDS):
        load = np.asarray(load, float)
        score = float(load @ basis) + math.sqrt(max(1.0 - load @ load, 0.0)) * eps[j]
        if kind == _C:
            value = f"{centre + sd * score:.3f}"
        else:
            value = levels[int(np.searchsorted(_CUTS[name], score))]
        row.append(None if drop[j] else value)
    return row


# -- subjects and cohorts ----------------------------------------------------------

@dataclass
class Subject:
    index: int
    latent: LatentSubject
    stats: TreeStats
    row: list
    mask: np.ndarray = None
    prob: np.ndarray = None
    raw: np.ndarray = None
    graph: object = None


def gen_record(seed, index, prevalence=PREVALENCE):
    """Latent and tabular row only; cheap, for label-level checks at large n."""
    r_lat = _streams(seed, index)[0]
    lat = draw_latent(r_lat, prevalence)
    return lat, tabular_row(lat, r_lat)


def gen_subject(seed, index, prevalence=PREVALENCE, images=True):
    r_lat, r_tree, r_bg = _streams(seed, index)
    lat = draw_latent(r_lat, prevalence)
    row = tabular_row(lat, r_lat)
    mask, stats = gen_vessel_tree(lat, r_tree)
    sub = Subject(index, lat, stats, row, mask=mask)
    if images:
        sub.prob = prob_mask(mask)
        sub.raw = pseudo_fundus(mask, r_bg)
    return sub


def render_images(seed, index, prevalence=PREVALENCE):
    """(mask, prob, raw) for one subject, regenerated from its RNG streams."""
    s = gen_subject(seed, index, prevalence)
    return s.mask, s.prob, s.raw


@dataclass
class Cohort:
    seed: int
    latents: list
    stats: list
    rows: list
    schema: TabularSchema
    split: np.ndarray  # "train" | "val" | "test" per subject
    graphs: list = None  # VesselGraph per subject when requested
    prevalence: float = PREVALENCE

    @property
    def labels(self):
        return np.array([l.label for l in self.latents], dtype=np.int64)

    def latent_matrix(self):
        return np.array([[l.tortuosity, l.branching, l.caliber, l.risk] for l in self.latents])

    def to_data(self):
        """In-memory CohortData; images are re-rendered on demand from the subject seeds."""
        from .imageio import to_uint8
        from .tasks import CohortData

        def image(kind):
            def fn(i):
                mask, prob, raw = render_images(self.seed, i, self.prevalence)
                return raw if kind == "raw" else to_uint8(prob)
            return fn

        graphs = self.graphs.__getitem__ if self.graphs is not None else None
        return CohortData(self.rows, self.schema, self.labels, self.split, graphs,
                          {"raw": image("raw"), "prob": image("prob")})


def _write_subject(out, sub):
    from .imageio import to_uint8, write_mask, write_pgm, write_png
    from .vesselgraph import save_graph

    tag = f"{sub.index:05d}"
    write_mask(os.path.join(out, "masks", tag + ".pgm"), sub.mask)
    write_pgm(os.path.join(out, "prob", tag + ".pgm"), to_uint8(sub.prob))
    write_png(os.path.join(out, "raw", tag + ".png"), sub.raw)
    save_graph(sub.graph, os.path.join(out, "graphs", tag + ".json"))


def _work(args):
    from .vesselgraph import deserialize, extract_graph, serialize

    seed, lo, hi, prevalence, out, graphs = args
    res = []
    for i in range(lo, hi):
        sub = gen_subject(seed, i, prevalence, images=out is not None)
        if out is not None or graphs:
            # round-trip so in-memory graphs carry the same 9-digit values as the JSON files
            sub.graph = deserialize(serialize(extract_graph(sub.mask)))
        if out is not None:
            _write_subject(out, sub)
        sub.mask = sub.prob = sub.raw = None
        if not graphs:
            sub.graph = None
        res.append(sub)
    return res


def gen_cohort(n=10_000, seed=7, out=None, prevalence=PREVALENCE, workers=1, graphs=False, chunk=250):
    """Generate ``n`` subjects; with ``out`` also write the dataset directory.

    ``graphs`` keeps each subject's extracted VesselGraph in memory.  Output
    is identical for any ``workers`` since each subject owns its RNG.
    """
    from .tasks import make_balanced_split

    if n < 50:
        raise ValueError(f"cohort needs at least 50 subjects, got {n}")
    if out is not None:
        for sub in ("masks", "prob", "raw", "graphs"):
            os.makedirs(os.path.join(out, sub), exist_ok=True)
    jobs = [(seed, lo, min(lo + chunk, n), prevalence, out, graphs) for lo in range(0, n, chunk)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_work, jobs))
    else:
        parts = [_work(j) for j in jobs]
    subjects = [s for p in parts for s in p]
    labels = np.array([s.latent.label for s in subjects])
    split = make_balanced_split(labels, seed=seed)
    cohort = Cohort(seed, [s.latent for s in subjects], [s.stats for s in subjects],
                    [s.row for s in subjects], cohort_schema(), split.assignment(len(labels)),
                    [s.graph for s in subjects] if graphs else None, prevalence)
    if out is not None:
        write_cohort(out, cohort)
    return cohort


COHORT_META = ["subject", "label", "split"]


def write_cohort(out, cohort):
    header = COHORT_META + [f.name for f in cohort.schema.fields]
    rows = [[f"{i:05d}", str(l.label), s] + r
            for i, (l, s, r) in enumerate(zip(cohort.latents, cohort.split, cohort.rows))]
    write_csv(os.path.join(out, "cohort.csv"), header, rows)
    lat_rows = [[f"{i:05d}", repr(l.tortuosity), repr(l.branching), repr(l.caliber), repr(l.risk), repr(l.p),
                 str(s.branches), repr(s.mean_tortuosity)]
                for i, (l, s) in enumerate(zip(cohort.latents, cohort.stats))]
    write_csv(os.path.join(out, "latents.csv"),
              ["subject", "tortuosity", "branching", "caliber", "risk", "p", "true_branches", "true_tortuosity"],
              lat_rows)
    manifest = {
        "seed": cohort.seed,
        "n": len(cohort.latents),
        "prevalence_target": PREVALENCE,
        "weights": {"intercept": intercept_for(), "tortuosity": W_TORT, "branching": W_BRANCH,
                    "risk": W_RISK, "noise_sd": LABEL_NOISE, "latent_scaling": "uniform latents standardised"},
        "schema": cohort.schema.to_json(),
        "noise_fields": list(NOISE_FIELDS),
        "image_size": SIZE,
        "prob_sigma": PROB_SIGMA,
        "missing_rate": MISSING_RATE,
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
