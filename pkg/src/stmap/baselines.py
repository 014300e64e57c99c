"""Comparison regressions: pooled least squares and locally weighted fits.

The locally weighted model re-estimates the coefficient vector at every
location with kernel weights on distance, so relationships may vary over
space; it is fitted one week at a time by the pipeline.  Bandwidth is
picked by leave-one-out prediction error with the self-weight removed.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, SingularityError


@dataclass
class OlsFit:
    beta: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray


def ols_fit(X, y) -> OlsFit:
    """Least squares via SVD; raises on rank deficiency."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if n <= k:
        raise ParameterError("need more observations than coefficients")
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < k:
        raise SingularityError(f"design matrix rank {rank} below {k} columns")
    fitted = X @ beta
    return OlsFit(beta=beta, fitted=fitted, residuals=y - fitted)


def _kernel_weights(d: np.ndarray, bandwidth: float, kernel: str) -> np.ndarray:
    if kernel == "gaussian":
        return np.exp(-(d**2) / (2.0 * bandwidth**2))
    if kernel == "bisquare":
        w = np.zeros_like(d)
        inside = d < bandwidth
        w[inside] = (1.0 - (d[inside] / bandwidth) ** 2) ** 2
        return w
    raise ParameterError(f"unknown kernel {kernel!r}")


@dataclass
class GwrFit:
    """Per-location coefficients and fitted values for one time slice."""

    bandwidth: float
    coefficients: np.ndarray   # (n, k)
    fitted: np.ndarray         # (n,)
    kernel: str


def _local_solves(locations, X, y, bandwidth, kernel, zero_self=False):
    """Batch of weighted normal-equation solves, one per location."""
    d = np.sqrt(((locations[:, None, :] - locations[None, :, :]) ** 2).sum(-1))
    W = _kernel_weights(d, bandwidth, kernel)
    if zero_self:
        np.fill_diagonal(W, 0.0)
    XtWX = np.einsum("in,na,nb->iab", W, X, X)
    XtWy = np.einsum("in,na,n->ia", W, X, y)
    try:
        return np.linalg.solve(XtWX, XtWy)
    except np.linalg.LinAlgError:
        for i in range(len(locations)):
            try:
                np.linalg.solve(XtWX[i], XtWy[i])
            except np.linalg.LinAlgError:
                raise SingularityError(
                    f"weighted design is singular at location {i} "
                    f"(bandwidth {bandwidth:g})") from None
        raise


def gwr_fit(locations, X, y, bandwidth: float, kernel: str = "gaussian") -> GwrFit:
    """Weighted least squares at every location, Gaussian kernel by default:
    w_ij = exp(-d_ij^2 / (2 b^2))."""
    locations = np.asarray(locations, dtype=float)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if bandwidth <= 0:
        raise ParameterError("bandwidth must be positive")
    betas = _local_solves(locations, X, y, bandwidth, kernel)
    fitted = np.einsum("ik,ik->i", X, betas)
    return GwrFit(bandwidth=float(bandwidth), coefficients=betas,
                  fitted=fitted, kernel=kernel)


def loo_press(locations, X, y, bandwidth: float, kernel: str = "gaussian") -> float:
    """Leave-one-out squared prediction error with the self-weight zeroed."""
    locations = np.asarray(locations, dtype=float)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    betas = _local_solves(locations, X, y, bandwidth, kernel, zero_self=True)
    pred = np.einsum("ik,ik->i", X, betas)
    return float(((y - pred) ** 2).sum())


def gwr_bandwidth_cv(locations, X, y, grid, kernel: str = "gaussian") -> float:
    """Grid member minimizing leave-one-out error; ties take the smaller.

    Candidates whose weighted design is singular are skipped; if all fail
    a SingularityError is raised.
    """
    candidates = sorted(float(b) for b in grid)
    if not candidates:
        raise ParameterError("bandwidth grid is empty")
    best, best_err = None, np.inf
    for b in candidates:
        try:
            err = loo_press(locations, X, y, b, kernel)
        except SingularityError:
            continue
        if err < best_err:
            best, best_err = b, err
    if best is None:
        raise SingularityError("every candidate bandwidth produced a singular fit")
    return best
