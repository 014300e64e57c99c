"""Shared fixtures and independent oracles for the test suite."""

import numpy as np
import pytest

from stmap.model import Hyper, StDataset
from stmap.spde import build_mesh, build_projector, convert_params, fem_matrices, spde_precision


def dense_gaussian_logpdf(y: np.ndarray, Sigma: np.ndarray) -> float:
    """Zero-mean multivariate normal log density via dense linear algebra."""
    n = y.size
    sign, logdet = np.linalg.slogdet(Sigma)
    assert sign > 0
    return float(-0.5 * n * np.log(2 * np.pi) - 0.5 * logdet
                 - 0.5 * y @ np.linalg.solve(Sigma, y))


def ar1_covariance(alpha: float, T: int) -> np.ndarray:
    """Stationary AR1 covariance with unit innovation variance."""
    t = np.arange(T)
    return alpha ** np.abs(t[:, None] - t[None, :]) / (1.0 - alpha**2)


def dense_design(ds: StDataset) -> np.ndarray:
    """[X | A_st] assembled row by row with plain loops."""
    n, k, m, T = ds.n_obs, ds.n_coef, ds.m, ds.T
    D = np.zeros((n, k + m * T))
    A = ds.A.toarray()
    for r in range(n):
        D[r, :k] = ds.X[r]
        t = ds.week[r] - 1
        D[r, k + t * m: k + (t + 1) * m] = A[ds.area_index[r]]
    return D


def dense_marginal_logpdf(hyper: Hyper, ds: StDataset,
                          beta_variance: float = 1000.0) -> float:
    """Marginal log likelihood of y by dense joint-Gaussian computation.

    Builds the latent covariance directly (AR1 covariance kron the dense
    inverse of the spatial precision) instead of the sparse precision
    identities used by the implementation.
    """
    kappa, tau = convert_params(hyper.rho, hyper.sigma_omega)
    Sig_s = np.linalg.inv(spde_precision(ds.fem, kappa, tau).Q.toarray())
    Sig_xi = np.kron(ar1_covariance(hyper.alpha, ds.T), Sig_s)
    D = dense_design(ds)
    k = ds.n_coef
    Sig_u = np.zeros((D.shape[1], D.shape[1]))
    Sig_u[:k, :k] = beta_variance * np.eye(k)
    Sig_u[k:, k:] = Sig_xi
    Sig_y = hyper.sigma_e**2 * np.eye(ds.n_obs) + D @ Sig_u @ D.T
    return dense_gaussian_logpdf(ds.y, Sig_y)


def dense_conditional(hyper: Hyper, ds: StDataset,
                      beta_variance: float = 1000.0):
    """Dense latent conditioning oracle: (mean, marginal SDs)."""
    kappa, tau = convert_params(hyper.rho, hyper.sigma_omega)
    Sig_s = np.linalg.inv(spde_precision(ds.fem, kappa, tau).Q.toarray())
    Sig_xi = np.kron(ar1_covariance(hyper.alpha, ds.T), Sig_s)
    D = dense_design(ds)
    k = ds.n_coef
    q = D.shape[1]
    Q_u = np.zeros((q, q))
    Q_u[:k, :k] = np.eye(k) / beta_variance
    Q_u[k:, k:] = np.linalg.inv(Sig_xi)
    Q_c = Q_u + D.T @ D / hyper.sigma_e**2
    b = D.T @ ds.y / hyper.sigma_e**2
    mean = np.linalg.solve(Q_c, b)
    sd = np.sqrt(np.diag(np.linalg.inv(Q_c)))
    return mean, sd


def make_small_dataset(rng: np.random.Generator, n_areas: int = 4, T: int = 3,
                       p: int = 1, frac_obs: float = 0.8,
                       extra_mesh_points: int = 1) -> StDataset:
    """A tiny but fully valid dataset on a real mesh."""
    from stmap.model import assemble_dataset  # noqa: F401 (import kept local)

    base = rng.uniform(0.1, 0.9, (n_areas, 2))
    helpers = rng.uniform(0.0, 1.0, (extra_mesh_points, 2))
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    mesh = build_mesh(np.vstack([base, helpers, corners]), max_edge=10.0)
    fem = fem_matrices(mesh)
    A = build_projector(mesh, base).A

    X_area = np.column_stack([np.ones(n_areas), rng.standard_normal((n_areas, p))])
    cells = [(i, t) for i in range(n_areas) for t in range(1, T + 1)]
    take = max(p + 2, int(round(frac_obs * len(cells))))
    chosen = [cells[j] for j in rng.permutation(len(cells))[:take]]
    area_index = np.array([c[0] for c in chosen])
    week = np.array([c[1] for c in chosen])
    y = -5.0 + 0.4 * rng.standard_normal(len(chosen))
    return StDataset(
        y=y, X=X_area[area_index], area_index=area_index, week=week, T=T,
        A=A, X_area=X_area,
        covariate_names=["intercept"] + [f"x{j+1}" for j in range(p)],
        area_ids=[f"A{i}" for i in range(n_areas)], fem=fem, mesh=mesh)


def adjusted_rand_index(a, b) -> float:
    """ARI from the pair-counting contingency table."""
    a = np.asarray(a)
    b = np.asarray(b)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ua.size, ub.size), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def comb2(x):
        return x * (x - 1) // 2

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    n_pairs = comb2(a.size)
    expected = sum_a * sum_b / n_pairs
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
