"""Splits, clustering, error metrics, partial dependence and exponent comparison."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Normalizer, ShotRecord, decode_features, encode_many, physical_matrix, targets
from .errors import ArgumentError
from .physics import EXPERT, ExpertExponents, expert_yield_array
from .schema import FEATURE_INDEX, FEATURES

log = logging.getLogger(__name__)

PD_GRID_POINTS = 50


# ---------------------------------------------------------------------------
# splits


def kfold_split(n: int, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold partition. The first n % k folds hold one extra index."""
    if k < 2:
        raise ArgumentError(f"need at least 2 folds, got {k}")
    if k > n:
        raise ArgumentError(f"cannot make {k} folds from {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    sizes = np.full(k, n // k)
    sizes[: n % k] += 1
    folds, start = [], 0
    for size in sizes:
        test = np.sort(order[start : start + size])
        train = np.sort(np.concatenate([order[:start], order[start + size :]]))
        folds.append((train, test))
        start += size
    return folds


# ---------------------------------------------------------------------------
# clustering


@dataclass
class ClusterPartition:
    assignments: np.ndarray
    centroids: np.ndarray
    k: int
    inertia: float
    history: list = field(default_factory=list)  # within-cluster sum of squares per Lloyd iteration
    silhouette: float | None = None

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == c)


def _sq_dists(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def _kmeans_pp(points, k, rng):
    n = points.shape[0]
    centroids = [points[rng.integers(n)]]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centroids)


def _lloyd(points, centroids, max_iter):
    k = centroids.shape[0]
    assign = np.full(points.shape[0], -1)
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(points, centroids)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # empty cluster: move its centroid onto the point worst served by its current centroid
            far = int(np.argmax(d2[np.arange(points.shape[0]), new]))
            new[far] = c
            centroids[c] = points[far]
            d2 = _sq_dists(points, centroids)
        history.append(float(d2[np.arange(points.shape[0]), new].sum()))
        if np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            centroids[c] = points[assign == c].mean(axis=0)
        history.append(float(((points - centroids[assign]) ** 2).sum()))
    inertia = float(((points - centroids[assign]) ** 2).sum())
    return assign, centroids, inertia, history


def kmeans(points, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> ClusterPartition:
    """Lloyd's algorithm from k-means++ starts; the best of ``n_init`` restarts is kept."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ArgumentError("points must be a 2-D array")
    if k < 1 or points.shape[0] < k:
        raise ArgumentError(f"need 1 <= k <= number of points, got k={k} for {points.shape[0]} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        init = _kmeans_pp(points, k, rng)
        assign, centroids, inertia, history = _lloyd(points, init.copy(), max_iter)
        if best is None or inertia < best.inertia:
            best = ClusterPartition(assign, centroids, k, inertia, history)
    return best


def silhouette_samples(points, assignments) -> np.ndarray:
    """Per-point silhouette (b - a) / max(a, b) with Euclidean distance; singletons score 0."""
    points = np.asarray(points, dtype=np.float64)
    assignments = np.asarray(assignments)
    labels = np.unique(assignments)
    if labels.size < 2:
        raise ArgumentError("silhouette needs at least two clusters")
    dist = np.sqrt(np.maximum(_sq_dists(points, points), 0.0))
    sums = np.stack([dist[:, assignments == c].sum(axis=1) for c in labels], axis=1)
    counts = np.array([(assignments == c).sum() for c in labels])
    own = np.searchsorted(labels, assignments)
    n = points.shape[0]
    own_count = counts[own]
    with np.errstate(invalid="ignore", divide="ignore"):
        a = sums[np.arange(n), own] / (own_count - 1)
        means = sums / counts
    means[np.arange(n), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own_count > 1, s, 0.0)


def silhouette(points, partition: ClusterPartition) -> float:
    return float(silhouette_samples(points, partition.assignments).mean())


def select_cluster_count(points, k_max: int, seed: int = 0) -> tuple[int, dict]:
    """Scan k = 2..k_max (capped at n - 1); return the k with the highest mean silhouette."""
    points = np.asarray(points, dtype=np.float64)
    if k_max < 2:
        raise ArgumentError(f"k_max must be >= 2, got {k_max}")
    upper = min(k_max, points.shape[0] - 1)
    if upper < 2:
        raise ArgumentError("need at least 3 points to compare cluster counts")
    scores = {}
    for k in range(2, upper + 1):
        part = kmeans(points, k, seed)
        if np.unique(part.assignments).size < 2:
            scores[k] = -1.0
            continue
        scores[k] = silhouette(points, part)
    best_k = max(scores, key=lambda k: (scores[k], -k))
    return best_k, scores


# ---------------------------------------------------------------------------
# predictors


class ExpertModel:
    """The expert yield formula behind the normalised-model interface."""

    kind = "expert"

    def __init__(self, normalizer: Normalizer, exponents: ExpertExponents = EXPERT):
        self.normalizer = normalizer
        self.exponents = exponents

    def predict(self, X) -> np.ndarray:
        phys, comp = decode_features(X, self.normalizer)
        return self.normalizer.scale_target(expert_yield_array(phys, comp, self.exponents))

    __call__ = predict


def predict_yield(model, records: Sequence[ShotRecord], normalizer: Normalizer) -> np.ndarray:
    X, _ = encode_many(records, normalizer)
    return normalizer.unscale_target(model.predict(X))


def mse(predictions, targets_) -> float:
    r = np.asarray(predictions, dtype=np.float64) - np.asarray(targets_, dtype=np.float64)
    return float(np.mean(r * r))


# ---------------------------------------------------------------------------
# out-of-distribution protocol


@dataclass
class OodResult:
    cluster_mse: dict  # cluster index -> MSE on normalised targets
    cluster_size: dict
    skipped: list

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.cluster_mse.values()))) if self.cluster_mse else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(list(self.cluster_mse.values()))) if self.cluster_mse else float("nan")

    def to_dict(self) -> dict:
        return {
            "clusters": [
                {"cluster": c, "size": self.cluster_size[c], "mse": self.cluster_mse[c]} for c in sorted(self.cluster_mse)
            ],
            "skipped": list(self.skipped),
            "mse_mean": self.mean,
            "mse_std": self.std,
        }


FitFn = Callable[[list, int], tuple]


def ood_evaluate(
    fit: FitFn | Mapping,
    records: Sequence[ShotRecord],
    partition: ClusterPartition,
    min_cluster_size: int = 2,
    clusters: Sequence[int] | None = None,
) -> OodResult:
    """Hold out each cluster in turn and score the model fitted on the rest.

    ``fit(train_records, cluster)`` returns ``(predictor, normalizer)``; a
    mapping from cluster index to that pair is also accepted. MSE is computed
    on targets normalised with the returned normalizer.
    """
    records = list(records)
    if len(records) != partition.assignments.size:
        raise ArgumentError("partition does not match the dataset")
    result = OodResult({}, {}, [])
    for c in range(partition.k) if clusters is None else clusters:
        if not 0 <= c < partition.k:
            raise ArgumentError(f"cluster index {c} out of range for {partition.k} clusters")
        members = set(partition.members(c).tolist())
        test = [r for i, r in enumerate(records) if i in members]
        if len(test) < min_cluster_size:
            log.warning("cluster %d has %d record(s); skipped", c, len(test))
            result.skipped.append(c)
            continue
        train = [r for i, r in enumerate(records) if i not in members]
        model, normalizer = fit[c] if isinstance(fit, Mapping) else fit(train, c)
        X, y = encode_many(test, normalizer)
        result.cluster_mse[c] = mse(model.predict(X), y)
        result.cluster_size[c] = len(test)
    return result


def prediction_error_stats(model, records: Sequence[ShotRecord], normalizer: Normalizer) -> tuple[float, float]:
    """Mean and standard deviation of 100 * (y_hat - y) / y on de-normalised yields."""
    if not records:
        raise ArgumentError("no records to score")
    y = targets(records)
    if np.any(y <= 0.0):
        raise ArgumentError("prediction error needs strictly positive yields")
    err = 100.0 * (predict_yield(model, records, normalizer) - y) / y
    return float(err.mean()), float(err.std())


# ---------------------------------------------------------------------------
# partial dependence


@dataclass
class PdCurve:
    feature: str
    grid: np.ndarray
    response: np.ndarray  # mean yield, scaled to 1 at grid[len(grid) // 2]
    spread: np.ndarray | None = None  # per-grid-point std of the individual responses, same scaling

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["value", "response"])
        for v, r in zip(self.grid, self.response):
            w.writerow([repr(float(v)), repr(float(r))])
        return buf.getvalue()


def _feature_index(feature) -> int:
    if isinstance(feature, str):
        if feature not in FEATURE_INDEX:
            raise ArgumentError(f"unknown feature {feature!r}; expected one of {', '.join(FEATURES)}")
        return FEATURE_INDEX[feature]
    j = int(feature)
    if not 0 <= j < len(FEATURES):
        raise ArgumentError(f"feature index {j} out of range")
    return j


def partial_dependence(
    model,
    records: Sequence[ShotRecord],
    feature,
    normalizer: Normalizer,
    n_grid: int = PD_GRID_POINTS,
) -> PdCurve:
    """Average de-normalised model yield as ``feature`` sweeps its training range."""
    j = _feature_index(feature)
    if not records:
        raise ArgumentError("partial dependence needs at least one record")
    grid = np.linspace(normalizer.feature_min[j], normalizer.feature_max[j], n_grid)
    X, _ = encode_many(records, normalizer)
    n = X.shape[0]
    stacked = np.repeat(X[None, :, :], n_grid, axis=0)
    stacked[:, :, j] = ((grid - normalizer.feature_min[j]) / normalizer.span[j])[:, None]
    yields = normalizer.unscale_target(model.predict(stacked.reshape(n_grid * n, -1))).reshape(n_grid, n)
    mean = yields.mean(axis=1)
    anchor = mean[n_grid // 2]
    return PdCurve(FEATURES[j], grid, mean / anchor, yields.std(axis=1) / anchor)


def effective_exponent(curve: PdCurve, sub_range: tuple | None = None) -> float:
    """Least-squares slope of log(response) against log(grid) over ``sub_range`` (inclusive)."""
    grid, resp = curve.grid, curve.response
    lo, hi = (grid[0], grid[-1]) if sub_range is None else sub_range
    tol = 1e-12 * max(1.0, abs(grid[-1]))
    if lo < grid[0] - tol or hi > grid[-1] + tol or lo >= hi:
        raise ArgumentError(f"sub-range ({lo}, {hi}) is not inside the grid [{grid[0]}, {grid[-1]}]")
    sel = (grid >= lo - tol) & (grid <= hi + tol)
    if sel.sum() < 2:
        raise ArgumentError(f"sub-range ({lo}, {hi}) holds fewer than two grid points")
    if np.any(resp[sel] <= 0.0) or np.any(grid[sel] <= 0.0):
        raise ArgumentError("effective exponent needs positive grid values and responses")
    slope, _ = np.polyfit(np.log(grid[sel]), np.log(resp[sel]), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# exponent comparison


def reference_pieces(feature: str, lo: float, hi: float, exponents: ExpertExponents = EXPERT) -> list:
    """Expert exponent pieces that overlap [lo, hi], clipped to it."""
    out = []
    for piece in exponents.pieces(feature):
        a, b = max(piece.lo, lo), min(piece.hi, hi)
        if b > a:
            out.append((float(a), float(b), float(piece.exponent)))
    return out


def exponent_rows(model, records, normalizer: Normalizer, exponents: ExpertExponents = EXPERT) -> list[dict]:
    """One row per (feature, expert piece): learned vs expert power-law exponent."""
    rows = []
    for feature in FEATURES:
        curve = partial_dependence(model, records, feature, normalizer)
        pieces = reference_pieces(feature, float(curve.grid[0]), float(curve.grid[-1]), exponents)
        for a, b, expected in pieces:
            try:
                learned = effective_exponent(curve, (a, b))
            except ArgumentError:
                continue
            rows.append(
                {
                    "feature": feature,
                    "range": [a, b],
                    "effective_exponent": learned,
                    "expert_exponent": expected,
                    "abs_deviation": abs(learned - expected),
                }
            )
    return rows


@dataclass
class EvalReport:
    protocol: str
    models: list
    results: dict
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "models": self.models, "config": self.config, "results": self.results}
