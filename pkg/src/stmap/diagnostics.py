"""Pre-model checks: spatial/temporal autocorrelation and collinearity.

The global spatial statistic uses a binary neighbour structure (k-nearest
symmetrized by union, or rook contiguity from polygons) with a permutation
null by default.  Collinearity screening mirrors the usual workflow: drop
one variable of each highly correlated pair by priority, then confirm with
variance inflation factors on the survivors.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.stats import chi2, norm

from .errors import (DataError, DegenerateVarianceError, ParameterError,
                     SingularityError)


@dataclass
class SpatialWeights:
    """Sparse symmetric spatial weights with zero diagonal."""

    W: sp.csr_matrix
    area_ids: list
    scheme: str
    islands: list = field(default_factory=list)   # row indices with no neighbour

    @property
    def n(self) -> int:
        return self.W.shape[0]


def build_spatial_weights(areas, scheme: str = "knn", k: int = 5) -> SpatialWeights:
    """Binary neighbour weights from centroids (knn) or polygons (contiguity).

    knn links each area to its k nearest centroids and symmetrizes by
    union; contiguity links areas whose polygons share an edge (rook).
    """
    n = areas.n
    if n < 2:
        raise ParameterError("need at least 2 areas")
    if scheme == "knn":
        if k >= n:
            raise ParameterError(f"k={k} must be smaller than the number of areas {n}")
        if k < 1:
            raise ParameterError("k must be at least 1")
        d2 = ((areas.centroids[:, None, :] - areas.centroids[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        neighbours = np.argsort(d2, axis=1, kind="stable")[:, :k]
        rows = np.repeat(np.arange(n), k)
        W = sp.csr_matrix((np.ones(n * k), (rows, neighbours.ravel())), shape=(n, n))
        W = W.maximum(W.T)
    elif scheme == "contiguity":
        if areas.polygons is None:
            raise DataError("contiguity weights need polygons")
        edge_owner: dict = {}
        rows, cols = [], []
        for i, area_id in enumerate(areas.area_ids):
            ring = np.asarray(areas.polygons[area_id], dtype=float).round(9)
            for a, b in zip(ring[:-1], ring[1:]):
                key = tuple(sorted((tuple(a), tuple(b))))
                j = edge_owner.setdefault(key, i)
                if j != i:
                    rows += [i, j]
                    cols += [j, i]
        W = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        W.data[:] = 1.0  # shared multi-edges still count once
    else:
        raise ParameterError(f"unknown weights scheme {scheme!r}")
    W.setdiag(0.0)
    W.eliminate_zeros()
    islands = np.nonzero(np.asarray(W.sum(axis=1)).ravel() == 0)[0].tolist()
    return SpatialWeights(W=W.tocsr(), area_ids=list(areas.area_ids),
                          scheme=scheme, islands=islands)


@dataclass
class MoranResult:
    I: float
    p_value: float
    expected: float           # -1/(n-1) under the randomization null
    n_perm: int
    replicates: np.ndarray    # permutation-null draws of I (empty for "normal")


def morans_i(values, weights: SpatialWeights, n_perm: int = 999,
             seed: int = 0, method: str = "permutation") -> MoranResult:
    """Global spatial autocorrelation with a one-sided (greater) p-value.

    I = (n / S0) (z' W z) / (z' z) with z the centered values.  The default
    null is `n_perm` random relabellings; method="normal" uses the classic
    normality approximation instead.
    """
    x = np.asarray(values, dtype=float)
    n = x.size
    if n != weights.n:
        raise ParameterError("value length does not match the weights")
    z = x - x.mean()
    denom = float(z @ z)
    if denom == 0.0:
        raise DegenerateVarianceError("constant values: spatial statistic undefined")
    W = weights.W
    S0 = float(W.sum())
    I_obs = float(n / S0 * (z @ (W @ z)) / denom)
    expected = -1.0 / (n - 1)

    if method == "normal":
        Wd = W.toarray()
        S1 = 0.5 * ((Wd + Wd.T) ** 2).sum()
        S2 = ((Wd.sum(axis=0) + Wd.sum(axis=1)) ** 2).sum()
        var = (n**2 * S1 - n * S2 + 3 * S0**2) / (S0**2 * (n**2 - 1)) - expected**2
        p = float(norm.sf((I_obs - expected) / np.sqrt(var)))
        return MoranResult(I=I_obs, p_value=p, expected=expected, n_perm=0,
                           replicates=np.empty(0))
    if method != "permutation":
        raise ParameterError(f"unknown method {method!r}")

    rng = np.random.default_rng(seed)
    perms = rng.permuted(np.tile(z, (n_perm, 1)), axis=1)
    nums = ((perms @ W.T) * perms).sum(axis=1)
    reps = n / S0 * nums / denom
    p = float((1 + np.sum(reps >= I_obs)) / (n_perm + 1))
    return MoranResult(I=I_obs, p_value=p, expected=expected, n_perm=n_perm,
                       replicates=reps)


@dataclass
class LjungBoxResult:
    Q: float
    p_value: float
    lags: int


def ljung_box(series, lags: int) -> LjungBoxResult:
    """Portmanteau whiteness test: Q = T(T+2) sum_k acf_k^2 / (T-k).

    The p-value comes from the chi-square distribution with `lags` degrees
    of freedom.
    """
    x = np.asarray(series, dtype=float)
    T = x.size
    if lags < 1 or T <= lags:
        raise ParameterError("need T > lags >= 1")
    z = x - x.mean()
    denom = float(z @ z)
    if denom == 0.0:
        raise DegenerateVarianceError("constant series: autocorrelation undefined")
    acf = np.array([float(z[k:] @ z[:-k]) / denom for k in range(1, lags + 1)])
    Q = T * (T + 2.0) * np.sum(acf**2 / (T - np.arange(1, lags + 1)))
    return LjungBoxResult(Q=float(Q), p_value=float(chi2.sf(Q, lags)), lags=lags)


def pearson_matrix(X) -> np.ndarray:
    """Pearson correlations of the columns; unit diagonal, symmetric."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ParameterError("X must be two-dimensional")
    sd = X.std(axis=0)
    if np.any(sd == 0.0):
        j = int(np.nonzero(sd == 0.0)[0][0])
        raise DegenerateVarianceError(f"column {j} is constant")
    C = np.corrcoef(X, rowvar=False)
    return np.atleast_2d(C)


def vif(X) -> np.ndarray:
    """Variance inflation factor 1/(1-R^2) per column.

    Each column is regressed on the remaining columns plus an intercept.
    An exact linear dependence raises SingularityError naming the column.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n <= p:
        raise ParameterError("need more rows than columns")
    out = np.empty(p)
    for j in range(p):
        yj = X[:, j]
        others = np.column_stack([np.ones(n), np.delete(X, j, axis=1)])
        coef, _, _, _ = np.linalg.lstsq(others, yj, rcond=None)
        resid = yj - others @ coef
        tss = float(((yj - yj.mean()) ** 2).sum())
        if tss == 0.0:
            raise DegenerateVarianceError(f"column {j} is constant")
        r2 = 1.0 - float(resid @ resid) / tss
        if 1.0 - r2 < 1e-10:
            raise SingularityError(f"column {j} is exactly collinear with the others")
        out[j] = 1.0 / (1.0 - r2)
    return out


@dataclass
class ScreeningReport:
    """Outcome of the collinearity screen."""

    correlations: np.ndarray     # of the original columns
    names: list                  # original column names
    retained: list
    vif: dict                    # name -> VIF among survivors
    dropped: list                # (name, reason) in drop order


def screen_covariates(X, names, r_threshold: float = 0.6,
                      keep_priority=()) -> ScreeningReport:
    """Iteratively drop one variable of each over-correlated pair.

    Pairs are visited by decreasing |r|.  Within a pair the loser is the
    variable lower in `keep_priority` (absent names rank below listed
    ones); between two unlisted names the later column loses.  VIFs are
    recomputed on the survivors.
    """
    X = np.asarray(X, dtype=float)
    names = list(names)
    full_corr = pearson_matrix(X)
    priority = {name: r for r, name in enumerate(keep_priority)}

    def rank(name):
        return (priority.get(name, len(priority)), names.index(name))

    active = list(names)
    dropped = []
    while len(active) > 1:
        idx = [names.index(a) for a in active]
        C = np.abs(full_corr[np.ix_(idx, idx)])
        np.fill_diagonal(C, 0.0)
        i, j = np.unravel_index(int(np.argmax(C)), C.shape)
        if C[i, j] < r_threshold:
            break
        a, b = active[i], active[j]
        winner, loser = (a, b) if rank(a) < rank(b) else (b, a)
        dropped.append((loser, f"|r|={C[i, j]:.3f} with {winner}"))
        active.remove(loser)

    idx = [names.index(a) for a in active]
    if len(active) >= 1 and X.shape[0] > len(active):
        vifs = vif(X[:, idx])
        vif_map = {a: float(v) for a, v in zip(active, vifs)}
    else:
        vif_map = {}
    return ScreeningReport(correlations=full_corr, names=names,
                           retained=active, vif=vif_map, dropped=dropped)
