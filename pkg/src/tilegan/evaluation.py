"""Sample-level validation of generated tiles.

The protocol clusters the real set with k-means to find image archetypes,
reports how the real and generated sets distribute over those archetypes,
and measures within-archetype diversity with pairwise SSIM:

* real/real  -- two distinct real images of the same cluster
* fake/fake  -- two distinct generated images of the same cluster
* real/fake  -- one of each

A segmentation oracle (any callable mapping a tile to a binary water mask)
gives a task-level comparison of the two sets.
"""
from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import ks_2samp

from .errors import InputError, StateError
from .tile_store import Tile, build_manifest, save_dataset

FEATURE_RECIPE = "blockmean16+dark-v1"
DARK_THRESHOLD = 80
PAIR_CLASSES = ("real/real", "fake/fake", "real/fake")

# Published reference values (Sentinel-1 corpus, fully trained model).
# Not reachable with synthetic data; kept for side-by-side reading.
REFERENCE_TABLE_4 = {
    "real": {"real/real": (0.02, 0.03, 0.03, 0.08), "fake/fake": (0.04, 0.04, 0.05, 0.11),
             "real/fake": (0.01, 0.02, 0.02, 0.05), "% images": (29, 41, 19, 11)},
    "fake": {"real/real": (0.02, 0.03, 0.03, 0.07), "fake/fake": (0.03, 0.05, 0.05, 0.10),
             "real/fake": (0.01, 0.02, 0.02, 0.04), "% images": (31, 40, 18, 11)},
}
REFERENCE_TABLE_3 = {
    "real": {"real/real": (0.03, 0.02, 0.06), "fake/fake": (0.04, 0.03, 0.08),
             "real/fake": (0.02, 0.02, 0.04), "% images": (56, 28, 16)},
    "fake": {"real/real": (0.03, 0.02, 0.06), "fake/fake": (0.04, 0.04, 0.08),
             "real/fake": (0.02, 0.01, 0.04), "% images": (54, 29, 17)},
}


def _pixels(tiles) -> np.ndarray:
    if isinstance(tiles, np.ndarray):
        arr = tiles
    else:
        tiles = list(tiles)
        if not tiles:
            return np.zeros((0, 0, 0), dtype=np.uint8)
        arr = np.stack([t.pixels if isinstance(t, Tile) else np.asarray(t) for t in tiles])
    if arr.ndim != 3:
        raise InputError(f"expected a stack of 2-D tiles, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------- features

def extract_features(tile, grid: int = 16, dark_threshold: int = DARK_THRESHOLD,
                     stat_weight: float = 8.0) -> np.ndarray:
    """Feature vector used for clustering.

    The first ``grid**2`` entries are block-mean intensities on a
    ``grid x grid`` lattice, in raw 0..255 units divided by 255. Two water
    proxies follow, each square-rooted and multiplied by ``stat_weight``:
    the fraction of pixels darker than ``dark_threshold`` and the fraction
    of blocks whose mean is darker than it. The square root evens out the
    spread between nearly dry and mostly flooded scenes.
    """
    px = tile.pixels if isinstance(tile, Tile) else np.asarray(tile)
    s = px.shape[0]
    if px.ndim != 2 or px.shape[1] != s:
        raise InputError(f"expected a square tile, got shape {px.shape}")
    if s % grid:
        raise InputError(f"tile size {s} is not a multiple of the {grid}x{grid} feature grid")
    f = s // grid
    means = px.astype(np.float64).reshape(grid, f, grid, f).mean(axis=(1, 3))
    dark = float((px < dark_threshold).mean())
    dark_blocks = float((means < dark_threshold).mean())
    return np.concatenate([means.ravel() / 255.0,
                           stat_weight * np.sqrt([dark, dark_blocks])])


def feature_matrix(tiles, **kw) -> np.ndarray:
    return np.stack([extract_features(p, **kw) for p in _pixels(tiles)])


# ----------------------------------------------------------------- k-means

@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    recipe: str = FEATURE_RECIPE
    rng_seed: int = 0
    inertia_history: list[float] = field(default_factory=list)

    def predict_features(self, X: np.ndarray) -> np.ndarray:
        d = ((X[:, None, :] - self.centroids[None]) ** 2).sum(-1)
        return np.argmin(d, axis=1)  # ties -> lowest index

    def predict(self, tiles) -> np.ndarray:
        return self.predict_features(feature_matrix(tiles))


def _kmeans_pp(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return np.array(centers)


def lloyd(X: np.ndarray, init: np.ndarray, max_iter: int = 300):
    """Plain Lloyd iterations; returns centroids, labels and the objective after each assignment."""
    centroids = init.astype(np.float64).copy()
    labels = None
    history = []
    for _ in range(max_iter):
        d = ((X[:, None, :] - centroids[None]) ** 2).sum(-1)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(centroids)):
            members = X[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return centroids, labels, history


def fit_kmeans_features(X: np.ndarray, k: int, rng_seed: int = 0, n_init: int = 8,
                        max_iter: int = 300, order_by: int | None = None) -> ClusterModel:
    """k-means++ seeded Lloyd clustering of a feature matrix, best of ``n_init`` restarts.

    When ``order_by`` is given, clusters are relabelled in ascending order of
    that feature column so that labels are stable across fits.
    """
    X = np.asarray(X, dtype=np.float64)
    if k < 1:
        raise InputError("k must be >= 1")
    if len(X) < k:
        raise InputError(f"need at least k={k} samples, got {len(X)}")
    rng = np.random.default_rng(rng_seed)
    best = None
    for _ in range(n_init):
        c, labels, hist = lloyd(X, _kmeans_pp(X, k, rng), max_iter)
        if best is None or hist[-1] < best[2][-1]:
            best = (c, labels, hist)
    centroids, _, hist = best
    if order_by is not None:
        centroids = centroids[np.argsort(centroids[:, order_by], kind="stable")]
    return ClusterModel(k, centroids, FEATURE_RECIPE, rng_seed, hist)


def fit_kmeans(tiles, k: int, rng_seed: int = 0, n_init: int = 8) -> ClusterModel:
    px = _pixels(tiles)
    if len(px) < k:
        raise InputError(f"need at least k={k} tiles, got {len(px)}")
    # order clusters from driest to wettest by the dark-pixel fraction column
    return fit_kmeans_features(feature_matrix(px), k, rng_seed, n_init, order_by=-2)


def cluster_purity(labels: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of samples carrying the majority true label of their cluster."""
    labels, truth = np.asarray(labels), np.asarray(truth)
    hits = 0
    for c in np.unique(labels):
        _, counts = np.unique(truth[labels == c], return_counts=True)
        hits += counts.max()
    return hits / len(labels)


def composition(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return np.zeros(k)
    return 100.0 * np.bincount(labels, minlength=k) / len(labels)


def assign_and_compose(model: ClusterModel, tiles) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels and the percentage of tiles in each cluster."""
    labels = model.predict(tiles)
    return labels, composition(labels, model.k)


# -------------------------------------------------------------------- SSIM

def _box_sums(x: np.ndarray, w: int) -> np.ndarray:
    c = np.zeros((x.shape[0] + 1, x.shape[1] + 1), dtype=x.dtype)
    c[1:, 1:] = x.cumsum(0).cumsum(1)
    return c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]


def ssim(a, b, window: int = 8, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 255.0) -> float:
    """Mean SSIM over all ``window x window`` sliding windows (stride 1, no padding).

    Local statistics are uniform-window means and population (co)variances.
    For integer inputs every window statistic is accumulated in exact
    integer arithmetic, which makes the result symmetric in its arguments
    and exactly 1 for identical inputs.
    """
    a = a.pixels if isinstance(a, Tile) else np.asarray(a)
    b = b.pixels if isinstance(b, Tile) else np.asarray(b)
    if a.shape != b.shape or a.ndim != 2:
        raise InputError(f"ssim needs two equal-shape 2-D inputs, got {a.shape} and {b.shape}")
    if not 1 <= window <= min(a.shape):
        raise InputError(f"window {window} does not fit shape {a.shape}")
    n = window * window
    exact = np.issubdtype(a.dtype, np.integer) and np.issubdtype(b.dtype, np.integer)
    dt = np.int64 if exact else np.float64
    a = a.astype(dt)
    b = b.astype(dt)
    sa, sb = _box_sums(a, window), _box_sums(b, window)
    saa, sbb, sab = _box_sums(a * a, window), _box_sums(b * b, window), _box_sums(a * b, window)
    # n^2 times the local means / variances / covariance
    mu_ab = (sa * sb).astype(np.float64)
    mu_aa = (sa * sa).astype(np.float64)
    mu_bb = (sb * sb).astype(np.float64)
    var_a = (n * saa - sa * sa).astype(np.float64)
    var_b = (n * sbb - sb * sb).astype(np.float64)
    cov = (n * sab - sa * sb).astype(np.float64)
    c1 = (k1 * data_range) ** 2 * n * n
    c2 = (k2 * data_range) ** 2 * n * n
    num = (2 * mu_ab + c1) * (2 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


# ------------------------------------------------------------- SSIM tables

@dataclass
class SsimTable:
    k: int
    values: dict[str, np.ndarray]
    composition_real: np.ndarray
    composition_fake: np.ndarray
    pairs_per_cell: int
    rng_seed: int
    members_real: np.ndarray
    members_fake: np.ndarray


def _within_pairs(n, count, rng):
    i = rng.integers(n, size=count)
    j = rng.integers(n - 1, size=count)
    j = j + (j >= i)
    return i, j


def _mean_ssim(xs, ys, i, j, **kw):
    return float(np.mean([ssim(xs[p], ys[q], **kw) for p, q in zip(i, j)]))


def ssim_table(real, fake, model: ClusterModel, pairs_per_cell: int = 1000,
               rng_seed: int = 0, window: int = 8) -> SsimTable:
    """Per-cluster mean SSIM for the three pair classes plus cluster composition.

    Real/real and fake/fake cells of a cluster draw their index pairs from
    the same seeded stream, so identical sets give identical rows. Cells
    without enough members (two for a within-set pair, one per side for
    real/fake) are reported as NaN.
    """
    if pairs_per_cell < 1:
        raise InputError("pairs_per_cell must be >= 1")
    rp, fp = _pixels(real), _pixels(fake)
    lr = model.predict(rp) if len(rp) else np.zeros(0, dtype=int)
    lf = model.predict(fp) if len(fp) else np.zeros(0, dtype=int)
    values = {c: np.full(model.k, np.nan) for c in PAIR_CLASSES}
    for c in range(model.k):
        r_idx, f_idx = np.flatnonzero(lr == c), np.flatnonzero(lf == c)
        rs, fs = rp[r_idx], fp[f_idx]
        for name, xs in (("real/real", rs), ("fake/fake", fs)):
            if len(xs) >= 2:
                rng = np.random.default_rng([rng_seed, c, 0])
                i, j = _within_pairs(len(xs), pairs_per_cell, rng)
                values[name][c] = _mean_ssim(xs, xs, i, j, window=window)
        if len(rs) and len(fs):
            rng = np.random.default_rng([rng_seed, c, 1])
            i = rng.integers(len(rs), size=pairs_per_cell)
            j = rng.integers(len(fs), size=pairs_per_cell)
            values["real/fake"][c] = _mean_ssim(rs, fs, i, j, window=window)
    return SsimTable(model.k, values, composition(lr, model.k), composition(lf, model.k),
                     pairs_per_cell, rng_seed,
                     np.bincount(lr, minlength=model.k), np.bincount(lf, minlength=model.k))


@dataclass
class EvaluationReport:
    """Two table blocks: clusters fitted on the real set and on the generated set."""

    k: int
    real_block: SsimTable
    fake_block: SsimTable
    real_model: ClusterModel
    fake_model: ClusterModel

    def blocks(self):
        yield "real", self.real_block, self.real_block.composition_real
        yield "fake", self.fake_block, self.fake_block.composition_fake


def evaluate_samples(real, fake, k: int = 4, pairs_per_cell: int = 1000,
                     rng_seed: int = 0) -> EvaluationReport:
    real_model = fit_kmeans(real, k, rng_seed)
    fake_model = fit_kmeans(fake, k, rng_seed)
    return EvaluationReport(
        k,
        ssim_table(real, fake, real_model, pairs_per_cell, rng_seed),
        ssim_table(real, fake, fake_model, pairs_per_cell, rng_seed),
        real_model, fake_model)


_ROW_LABELS = {"real/real": "Real/Real", "fake/fake": "Fake/Fake", "real/fake": "Real/Fake"}


def format_report(report: EvaluationReport) -> str:
    """Plain-text table, one column group per clustering, plus a '% images' row."""
    k = report.k
    cell = 6
    group = cell * k
    label_w = 12
    head = f"Real Data with {k} clusters".center(group) + "   " + \
        f"Fake Data with {k} clusters".center(group)
    lines = [" " * label_w + head, "-" * (label_w + 2 * group + 3)]

    def fmt(v, pct=False):
        if np.isnan(v):
            return "n/a".rjust(cell)
        return (f"{v:.0f}" if pct else f"{v:.2f}").rjust(cell)

    for row in PAIR_CLASSES:
        parts = []
        for _, block, _ in report.blocks():
            parts.append("".join(fmt(v) for v in block.values[row]))
        lines.append(_ROW_LABELS[row].ljust(label_w) + "   ".join(parts))
    parts = ["".join(fmt(v, pct=True) for v in comp) for _, _, comp in report.blocks()]
    lines.append("% images".ljust(label_w) + "   ".join(parts))
    return "\n".join(lines) + "\n"


def report_records(report: EvaluationReport) -> list[dict]:
    """Machine-readable form of :func:`format_report`, one record per table cell."""
    recs = []
    for name, block, comp in report.blocks():
        for row in PAIR_CLASSES:
            for c, v in enumerate(block.values[row]):
                recs.append({"k": report.k, "block": name, "row": row, "cluster": c,
                             "value": None if np.isnan(v) else float(v),
                             "pairs": block.pairs_per_cell})
        for c, v in enumerate(comp):
            recs.append({"k": report.k, "block": name, "row": "% images", "cluster": c,
                         "value": float(v)})
    return recs


def write_report(report: EvaluationReport, stem) -> None:
    stem = Path(stem)
    stem.with_suffix(".txt").write_text(format_report(report))
    with open(stem.with_suffix(".jsonl"), "w") as fh:
        for rec in report_records(report):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -------------------------------------------------------------- robustness

def label_agreement(a: np.ndarray, b: np.ndarray, k: int) -> tuple[float, np.ndarray]:
    """Agreement of two labelings after the best one-to-one matching of cluster ids."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.size == 0:
        raise InputError("labelings must be non-empty and of equal length")
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (a, b), 1)
    rows, cols = linear_sum_assignment(-confusion)
    return confusion[rows, cols].sum() / a.size, confusion


@dataclass
class RobustnessReport:
    k: int
    agreement: float
    confusion: np.ndarray


def cluster_robustness(real, fake, k: int = 4, rng_seed: int = 0) -> RobustnessReport:
    """Fit k-means on each set separately and compare the two labelings of all tiles."""
    rp, fp = _pixels(real), _pixels(fake)
    if not len(rp) or not len(fp):
        raise InputError("both sets must be non-empty")
    X = feature_matrix(np.concatenate([rp, fp]))
    m_real = fit_kmeans_features(feature_matrix(rp), k, rng_seed, order_by=-2)
    m_fake = fit_kmeans_features(feature_matrix(fp), k, rng_seed, order_by=-2)
    agreement, confusion = label_agreement(m_real.predict_features(X),
                                           m_fake.predict_features(X), k)
    return RobustnessReport(k, float(agreement), confusion)


# ------------------------------------------------------ segmentation oracle

class SegmentationOracle(Protocol):
    def __call__(self, pixels: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ThresholdOracle:
    """Stand-in flood segmenter: water is whatever is darker than ``threshold``."""

    threshold: int = DARK_THRESHOLD

    def __call__(self, pixels):
        return (np.asarray(pixels) < self.threshold).astype(np.uint8)


@dataclass(frozen=True)
class ExternalOracle:
    """Runs an executable over a dataset directory.

    The command is invoked as ``command... DATASET_DIR OUT_DIR`` and must write
    ``OUT_DIR/<tile id>.mask`` (raw row-major 8-bit 0/1 values) for every tile
    listed in ``DATASET_DIR/manifest.txt``.
    """

    command: tuple[str, ...]
    timeout: float | None = None

    def __call__(self, pixels):
        return self.run_batch(np.asarray(pixels)[None])[0]

    def run_batch(self, stack: np.ndarray) -> list[np.ndarray]:
        s = stack.shape[-1]
        tiles = [Tile(p, None, ("oracle", i, 0)) for i, p in enumerate(stack)]
        with tempfile.TemporaryDirectory() as tmp:
            data_dir, out_dir = Path(tmp) / "in", Path(tmp) / "out"
            out_dir.mkdir()
            save_dataset(tiles, build_manifest(tiles, s), data_dir)
            subprocess.run([*self.command, str(data_dir), str(out_dir)], check=True,
                           timeout=self.timeout, capture_output=True)
            masks = []
            for t in tiles:
                path = out_dir / f"{t.id}.mask"
                if not path.is_file():
                    raise StateError(f"oracle produced no mask for {t.id}")
                masks.append(np.frombuffer(path.read_bytes(), dtype=np.uint8).reshape(s, s).copy())
        return masks


@dataclass
class OracleResult:
    masks: list[np.ndarray]
    water_fraction: np.ndarray


def run_oracle(tiles, oracle: SegmentationOracle) -> OracleResult:
    px = _pixels(tiles)
    masks = oracle.run_batch(px) if hasattr(oracle, "run_batch") else [oracle(p) for p in px]
    checked = []
    for p, m in zip(px, masks):
        m = np.asarray(m)
        if m.shape != p.shape:
            raise InputError(f"oracle mask shape {m.shape} differs from tile shape {p.shape}")
        if not np.isin(m, (0, 1)).all():
            raise InputError("oracle mask values must be 0 or 1")
        checked.append(m.astype(np.uint8))
    fractions = np.array([m.mean() for m in checked]) if checked else np.zeros(0)
    return OracleResult(checked, fractions)


@dataclass
class OracleComparison:
    real: OracleResult
    fake: OracleResult
    bins: np.ndarray
    hist_real: np.ndarray
    hist_fake: np.ndarray
    distance: float  # two-sample Kolmogorov-Smirnov statistic on water fractions


def compare_oracle(real, fake, oracle: SegmentationOracle | None = None,
                   bins: int = 20) -> OracleComparison:
    oracle = oracle or ThresholdOracle()
    r, f = run_oracle(real, oracle), run_oracle(fake, oracle)
    if not len(r.water_fraction) or not len(f.water_fraction):
        raise InputError("both sets must be non-empty")
    edges = np.linspace(0, 1, bins + 1)
    hr, _ = np.histogram(r.water_fraction, edges)
    hf, _ = np.histogram(f.water_fraction, edges)
    dist = float(ks_2samp(r.water_fraction, f.water_fraction, method="asymp").statistic)
    return OracleComparison(r, f, edges, hr, hf, dist)
