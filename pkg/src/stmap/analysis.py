"""Prediction accuracy, hotspot clustering and regional aggregation.

Hotspots: the study window is cut into consecutive 18-week intervals, each
area's weekly rates are standardized within the interval, the standardized
profiles are k-means clustered, the cluster count is picked by the elbow of
the within-cluster sum of squares, and the three-cluster partition is
labelled high / medium / low by center level.  Regional series are
population-weighted averages of the per-area rates.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateVarianceError, ParameterError


def rmse_mae(pred: dict, obs: dict) -> tuple:
    """Root-mean-square and mean absolute error over matched keys.

    Both arguments map (area_id, week) to a value; only the intersection
    (the uncensored cells) is scored.
    """
    keys = sorted(set(pred) & set(obs))
    if not keys:
        raise DataError("no matching (area, week) keys between predictions and observations")
    diff = np.array([pred[k] - obs[k] for k in keys], dtype=float)
    return float(np.sqrt(np.mean(diff**2))), float(np.mean(np.abs(diff)))


def week_intervals(T: int, width: int = 18) -> list:
    """Consecutive non-overlapping (start, end) week ranges, 1-based inclusive."""
    if width < 1 or T < 1:
        raise ParameterError("need positive T and width")
    return [(s, min(s + width - 1, T)) for s in range(1, T + 1, width)]


def standardize_interval(rates: np.ndarray, interval: tuple,
                         axis: str = "week") -> np.ndarray:
    """Z-scores of the (areas x weeks) rate matrix inside a week interval.

    axis="week" standardizes each week column across areas (the default);
    axis="area" standardizes each area's own profile instead.
    """
    rates = np.asarray(rates, dtype=float)
    start, end = interval
    if start < 1 or end > rates.shape[1] or start > end:
        raise ParameterError(f"interval {interval} outside 1..{rates.shape[1]}")
    block = rates[:, start - 1:end]
    ax = 0 if axis == "week" else (1 if axis == "area" else None)
    if ax is None:
        raise ParameterError(f"unknown standardization axis {axis!r}")
    mean = block.mean(axis=ax, keepdims=True)
    sd = block.std(axis=ax, keepdims=True)
    if np.any(sd == 0.0):
        raise DegenerateVarianceError("constant slice: cannot standardize")
    return (block - mean) / sd


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Distance-squared-proportional seeding."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total == 0.0:
            centers[c:] = centers[0]
            break
        centers[c] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int = 300):
    """Iterate to an assignment fixpoint; returns the WSS trace as well."""
    trace = []
    labels = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new_labels = d2.argmin(axis=1)   # ties go to the lowest index
        trace.append(float(d2[np.arange(len(points)), new_labels].sum()))
        for c in range(centers.shape[0]):
            member = new_labels == c
            if member.any():
                centers[c] = points[member].mean(axis=0)
            else:
                # deterministic restart: move to the point worst served
                centers[c] = points[int(d2.min(axis=1).argmax())]
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    labels = d2.argmin(axis=1)
    wss = float(d2[np.arange(len(points)), labels].sum())
    return labels, centers, wss, trace


def kmeans(points, k: int, restarts: int = 8, seed: int = 0):
    """k-means with ++-style seeding; best of `restarts` by WSS.

    Deterministic given the seed; assignment ties take the lowest cluster
    index.  Returns (labels, centers, wss).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    if k < 1 or k > n:
        raise ParameterError(f"k={k} must lie in 1..{n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        centers = _kmeanspp_init(points, k, rng)
        labels, centers, wss, _ = _lloyd(points, centers.copy())
        if best is None or wss < best[2]:
            best = (labels, centers, wss)
    return best


def elbow_select(wss) -> int:
    """Cluster count at the elbow of a k=1..10 WSS curve.

    Scores each interior k by its second difference relative to the local
    WSS level, (wss[k-1] - 2 wss[k] + wss[k+1]) / wss[k], so a near-flat
    tail after a sharp drop wins over the drop itself; ties take the
    smaller k.
    """
    wss = np.asarray(wss, dtype=float)
    if wss.size != 10:
        raise ParameterError("expected WSS values for k = 1..10")
    if np.any(np.diff(wss) > 1e-9):
        raise DataError("WSS sequence must be non-increasing")
    scores = np.empty(8)
    for k in range(2, 10):       # 1-based cluster count
        d2 = wss[k - 2] - 2.0 * wss[k - 1] + wss[k]
        denom = wss[k - 1] if wss[k - 1] > 0 else 1.0
        scores[k - 2] = d2 / denom
    return int(np.argmax(scores)) + 2


LEVELS = ("high", "medium", "low")


def label_levels(centers: np.ndarray, labels: np.ndarray):
    """Map a three-cluster partition to high / medium / low by center mean.

    Ties between center means keep cluster-index order.  Returns the
    per-point level array and the cluster -> level mapping.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if centers.shape[0] != 3:
        raise ParameterError("level labelling needs exactly 3 clusters")
    means = centers.mean(axis=1)
    order = np.argsort(-means, kind="stable")
    mapping = {int(c): LEVELS[rank] for rank, c in enumerate(order)}
    return np.array([mapping[int(l)] for l in labels]), mapping


@dataclass
class ClusterResult:
    """Hotspot partition of one interval."""

    interval: tuple              # (start_week, end_week)
    area_ids: list
    levels: np.ndarray           # per-area "high"/"medium"/"low"
    wss_by_k: np.ndarray         # k = 1..10
    chosen_k: int


def cluster_interval(rates: np.ndarray, interval: tuple, area_ids,
                     axis: str = "week", restarts: int = 8,
                     seed: int = 0) -> ClusterResult:
    """Standardize an interval, scan k = 1..10, pick the elbow, label levels.

    Levels always come from the three-cluster partition (the scale the
    labels are defined on); the elbow's k is reported alongside.
    """
    z = standardize_interval(rates, interval, axis=axis)
    kmax = min(10, z.shape[0])
    wss = np.zeros(10)
    results = {}
    for k in range(1, kmax + 1):
        results[k] = kmeans(z, k, restarts=restarts, seed=seed + k)
        wss[k - 1] = results[k][2]
    wss[kmax:] = wss[kmax - 1]
    chosen = elbow_select(wss)
    labels3, centers3, _ = results[min(3, kmax)]
    levels, _ = label_levels(centers3, labels3)
    return ClusterResult(interval=interval, area_ids=list(area_ids),
                         levels=levels, wss_by_k=wss, chosen_k=chosen)


@dataclass
class RegionalSeries:
    region_id: str
    phi: np.ndarray          # (T,) population-weighted mean rate per week


def region_aggregate(rates: np.ndarray, areas) -> list:
    """Population-weighted regional mean rates.

    phi_rt = sum_{i in r} p_i rate_it / sum_{i in r} p_i, computed for
    every week column of the (areas x weeks) rate matrix.
    """
    rates = np.asarray(rates, dtype=float)
    if rates.shape[0] != areas.n:
        raise DataError("rate rows do not match the area table")
    out = []
    for region in sorted(set(areas.region_ids)):
        member = np.array([r == region for r in areas.region_ids])
        if not member.any():
            raise DataError(f"region {region!r} has no areas")
        p = areas.population[member].astype(float)
        phi = (p[:, None] * rates[member]).sum(axis=0) / p.sum()
        out.append(RegionalSeries(region_id=region, phi=phi))
    return out
