"""Hierarchical model for log infection rates and its inference.

Observation model per reporting area i and week t:

    theta(s_i, t) ~ N(mu(s_i, t), sigma_e^2)
    mu(s_i, t)    = x(s_i)' beta + xi(s_i, t)

xi follows an AR1 recursion in time, xi_t = alpha xi_{t-1} + omega_t, with
omega_t a mesh-node Matern field (range rho, innovation SD sigma_omega) and
a stationary start, so the joint precision of the stacked field is the
Kronecker product of the AR1 and spatial precisions.  beta carries a flat
Gaussian prior and is appended to the latent vector, so conditional on the
four hyperparameters everything is Gaussian and the latent posterior is
exact.  The hyperparameter posterior is maximized in transformed space
(log rho, log sigma_omega, logit, log sigma_e) with Nelder-Mead, and its
curvature at the mode supplies the reported SDs and credible intervals.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq, minimize

from .errors import CalibrationError, NumericalError, ParameterError
from .sparse import SparseCholesky
from .spde import FemMatrices, Mesh, Projector, convert_params, spde_precision

HYPER_NAMES = ("rho", "sigma_omega", "alpha", "sigma_e")


@dataclass(frozen=True)
class Hyper:
    """The four hyperparameters: spatial range, innovation SD of the
    spatial field, AR1 coefficient, observation-noise SD."""

    rho: float
    sigma_omega: float
    alpha: float
    sigma_e: float

    def __post_init__(self):
        if not (self.rho > 0 and self.sigma_omega > 0 and self.sigma_e > 0):
            raise ParameterError("rho, sigma_omega and sigma_e must be positive")
        if not abs(self.alpha) < 1:
            raise ParameterError("alpha must lie in (-1, 1)")

    def to_transformed(self) -> np.ndarray:
        a01 = (self.alpha + 1.0) / 2.0
        return np.array([
            math.log(self.rho),
            math.log(self.sigma_omega),
            math.log(a01 / (1.0 - a01)),
            math.log(self.sigma_e),
        ])

    @staticmethod
    def from_transformed(t: np.ndarray) -> "Hyper":
        a01 = 1.0 / (1.0 + math.exp(-t[2]))
        return Hyper(
            rho=math.exp(t[0]),
            sigma_omega=math.exp(t[1]),
            alpha=2.0 * a01 - 1.0,
            sigma_e=math.exp(t[3]),
        )


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameter priors.

    The range and SD priors are the exponential-penalty kind stated through
    tail probabilities: P(rho < range_threshold) = range_prob and
    P(sigma_omega > sigma_threshold) = sigma_prob.  The AR1 prior penalizes
    distance from the static limit alpha = 1 and is pinned by
    P(alpha > ar1_threshold) = ar1_prob.  The noise precision 1/sigma_e^2
    gets a Gamma(shape, rate) prior.  beta_variance is the prior variance
    of every regression coefficient.
    """

    beta_variance: float = 1000.0
    range_threshold: float = 1.5
    range_prob: float = 0.5
    sigma_threshold: float = 1.0
    sigma_prob: float = 0.01
    ar1_threshold: float = 0.0
    ar1_prob: float = 0.9
    noise_shape: float = 1.0
    noise_rate: float = 5e-5

    def __post_init__(self):
        for p in (self.range_prob, self.sigma_prob, self.ar1_prob):
            if not 0.0 < p < 1.0:
                raise CalibrationError("tail probabilities must lie in (0, 1)")
        if self.range_threshold <= 0 or self.sigma_threshold <= 0:
            raise CalibrationError("thresholds must be positive")
        if not -1.0 < self.ar1_threshold < 1.0:
            raise CalibrationError("the AR1 threshold must lie in (-1, 1)")


@dataclass(frozen=True)
class PcLambdas:
    lam_rho: float
    lam_sigma: float
    lam_alpha: float


def calibrate_pc_lambdas(spec: PriorSpec) -> PcLambdas:
    """Solve each prior's rate so its tail statement holds exactly.

    Range (d=2): P(rho < rho0) = exp(-lam / rho0)  ->  lam = -rho0 ln p.
    SD: P(sigma > s0) = exp(-lam s0)               ->  lam = -ln(p) / s0.
    AR1: P(alpha > u) = (1 - e^{-lam sqrt(1-u)}) / (1 - e^{-lam sqrt 2}),
    solved numerically; it has a root only if p exceeds the lam -> 0 limit
    sqrt(1-u)/sqrt(2).
    """
    lam_rho = -spec.range_threshold * math.log(spec.range_prob)
    lam_sigma = -math.log(spec.sigma_prob) / spec.sigma_threshold

    u, p = spec.ar1_threshold, spec.ar1_prob
    limit = math.sqrt(1.0 - u) / math.sqrt(2.0)
    if p <= limit:
        raise CalibrationError(
            f"P(alpha > {u}) = {p} is unattainable; must exceed {limit:.4f}")

    def tail(lam):
        return (-math.expm1(-lam * math.sqrt(1.0 - u))
                / -math.expm1(-lam * math.sqrt(2.0))) - p

    lam_alpha = brentq(tail, 1e-10, 1e4, xtol=1e-12, rtol=1e-14)
    return PcLambdas(lam_rho=lam_rho, lam_sigma=lam_sigma, lam_alpha=float(lam_alpha))


def pc_range_logpdf(rho: float, lam: float) -> float:
    """Density of the range prior in d=2: lam rho^{-2} exp(-lam/rho)."""
    if rho <= 0:
        return -np.inf
    return math.log(lam) - 2.0 * math.log(rho) - lam / rho


def pc_sd_logpdf(sigma: float, lam: float) -> float:
    """Exponential prior on a standard deviation."""
    if sigma <= 0:
        return -np.inf
    return math.log(lam) - lam * sigma


def pc_ar1_logpdf(alpha: float, lam: float) -> float:
    """AR1 prior with base model alpha = 1, restricted to (-1, 1)."""
    if not -1.0 < alpha < 1.0:
        return -np.inf
    s = math.sqrt(1.0 - alpha)
    norm = -math.expm1(-lam * math.sqrt(2.0))
    return math.log(lam) - lam * s - math.log(2.0 * s) - math.log(norm)


def noise_sd_logpdf(sigma_e: float, shape: float, rate: float) -> float:
    """Density in sigma_e implied by precision ~ Gamma(shape, rate)."""
    if sigma_e <= 0:
        return -np.inf
    prec = sigma_e**-2
    log_gamma = (shape * math.log(rate) - math.lgamma(shape)
                 + (shape - 1.0) * math.log(prec) - rate * prec)
    return log_gamma + math.log(2.0) - 3.0 * math.log(sigma_e)


def log_prior(hyper: Hyper, spec: PriorSpec,
              lambdas: Optional[PcLambdas] = None) -> float:
    """Joint log prior density with respect to d(rho, sigma_omega, alpha, sigma_e)."""
    if lambdas is None:
        lambdas = calibrate_pc_lambdas(spec)
    return (pc_range_logpdf(hyper.rho, lambdas.lam_rho)
            + pc_sd_logpdf(hyper.sigma_omega, lambdas.lam_sigma)
            + pc_ar1_logpdf(hyper.alpha, lambdas.lam_alpha)
            + noise_sd_logpdf(hyper.sigma_e, spec.noise_shape, spec.noise_rate))


def ar1_precision(alpha: float, T: int) -> sp.csc_matrix:
    """Precision of a unit-innovation AR1 with stationary start.

    Tridiagonal with diagonal (1, 1+a^2, ..., 1+a^2, 1) and off-diagonal
    -a; the single-point case is the stationary precision 1 - a^2.
    """
    if not abs(alpha) < 1:
        raise ParameterError("alpha must lie in (-1, 1)")
    if T < 1:
        raise ParameterError("T must be at least 1")
    if T == 1:
        return sp.csc_matrix(np.array([[1.0 - alpha**2]]))
    diag = np.full(T, 1.0 + alpha**2)
    diag[0] = diag[-1] = 1.0
    off = np.full(T - 1, -alpha)
    return sp.diags([off, diag, off], offsets=[-1, 0, 1]).tocsc()


def st_precision(Q_s, alpha: float, T: int) -> sp.csc_matrix:
    """Joint precision of the week-stacked field: kron(AR1, spatial).

    Index layout is week-major: entry t*m + j is node j in week t+1.
    """
    Qs = Q_s.Q if hasattr(Q_s, "Q") else Q_s
    return sp.kron(ar1_precision(alpha, T), Qs, format="csc")


@dataclass
class StDataset:
    """Stacked observations plus everything needed to assemble the model.

    y holds the observed log rates; X the matching covariate rows with the
    intercept first.  A maps mesh nodes to the area centroids, X_area is the
    per-area design used for full-grid prediction, and (area_index, week)
    locate each observation; weeks are 1-based.
    """

    y: np.ndarray
    X: np.ndarray
    area_index: np.ndarray
    week: np.ndarray
    T: int
    A: sp.csr_matrix
    X_area: np.ndarray
    covariate_names: list
    area_ids: list
    fem: FemMatrices
    mesh: Mesh
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        if self.X.shape[0] != self.y.shape[0]:
            raise ParameterError("X and y row counts differ")
        if len(self.area_index) != len(self.y) or len(self.week) != len(self.y):
            raise ParameterError("row index length mismatch")
        if np.any(self.week < 1) or np.any(self.week > self.T):
            raise ParameterError("weeks must lie in 1..T")

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_areas(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    @property
    def n_coef(self) -> int:
        return self.X.shape[1]

    @property
    def n_latent(self) -> int:
        return self.n_coef + self.m * self.T

    def design(self) -> sp.csr_matrix:
        """Sparse [X | A_st] with A rows placed in their week block."""
        if "D" not in self._cache:
            obs_A = self.A[self.area_index].tocoo()
            cols = obs_A.col + (self.week[obs_A.row] - 1) * self.m
            A_st = sp.csr_matrix((obs_A.data, (obs_A.row, cols)),
                                 shape=(self.n_obs, self.m * self.T))
            self._cache["D"] = sp.hstack(
                [sp.csr_matrix(self.X), A_st], format="csr")
        return self._cache["D"]

    def gram(self):
        """(D'D, D'y, y'y), reused across objective evaluations."""
        if "gram" not in self._cache:
            D = self.design()
            self._cache["gram"] = (
                (D.T @ D).tocsc(), D.T @ self.y, float(self.y @ self.y))
        return self._cache["gram"]

    def observed_mask(self) -> np.ndarray:
        """(n_areas, T) boolean, True where a log rate was observed."""
        mask = np.zeros((self.n_areas, self.T), dtype=bool)
        mask[self.area_index, self.week - 1] = True
        return mask


def effective_field_sd(hyper: Hyper, convention: str = "innovation") -> float:
    """SD handed to the spatial precision under the chosen reading.

    "innovation": sigma_omega is the SD of the weekly innovation field, so
    the stacked field has stationary variance sigma_omega^2 / (1-alpha^2).
    "marginal": sigma_omega is the stationary SD of the field itself.
    """
    if convention == "innovation":
        return hyper.sigma_omega
    if convention == "marginal":
        return hyper.sigma_omega * math.sqrt(1.0 - hyper.alpha**2)
    raise ParameterError(f"unknown sigma convention: {convention!r}")


def _prior_precision(hyper: Hyper, data: StDataset, beta_variance: float,
                     convention: str) -> tuple[sp.csc_matrix, float]:
    """Block-diagonal latent prior precision and its log-determinant."""
    kappa, tau = convert_params(hyper.rho, effective_field_sd(hyper, convention))
    Qs = spde_precision(data.fem, kappa, tau)
    logdet_Qs = SparseCholesky(Qs.Q, context=f"spatial precision, {hyper}").logdet
    Qst = st_precision(Qs, hyper.alpha, data.T)
    # log|kron(A, B)| = m log|A| + T log|B|; the AR1 determinant is 1-alpha^2
    logdet_Qst = data.m * math.log(1.0 - hyper.alpha**2) + data.T * logdet_Qs
    k = data.n_coef
    Q_u = sp.block_diag(
        [sp.identity(k) / beta_variance, Qst], format="csc")
    logdet_Qu = -k * math.log(beta_variance) + logdet_Qst
    return Q_u, logdet_Qu


def _conditional(hyper: Hyper, data: StDataset, beta_variance: float,
                 convention: str):
    """Factorized latent conditional: (chol(Q_c), b, logdet Q_u, y'y)."""
    Q_u, logdet_Qu = _prior_precision(hyper, data, beta_variance, convention)
    DtD, Dty, yty = data.gram()
    s2 = hyper.sigma_e**2
    Q_c = (Q_u + DtD / s2).tocsc()
    chol = SparseCholesky(Q_c, context=f"latent conditional, {hyper}")
    return chol, Dty / s2, logdet_Qu, yty


def log_marginal_likelihood(hyper: Hyper, data: StDataset,
                            beta_variance: float = 1000.0,
                            convention: str = "innovation") -> float:
    """log p(y | hyper) with the latent vector integrated out.

    Computed through sparse factorizations of the prior and conditional
    precisions:

        1/2 log|Q_u| - 1/2 log|Q_c| - n/2 log(2 pi sigma_e^2)
        - 1/2 (y'y / sigma_e^2 - b' Q_c^{-1} b).
    """
    chol, b, logdet_Qu, yty = _conditional(hyper, data, beta_variance, convention)
    mu = chol.solve(b)
    s2 = hyper.sigma_e**2
    return float(0.5 * logdet_Qu - 0.5 * chol.logdet
                 - 0.5 * data.n_obs * math.log(2.0 * math.pi * s2)
                 - 0.5 * (yty / s2 - b @ mu))


def log_hyper_posterior(hyper: Hyper, data: StDataset, priors: PriorSpec,
                        convention: str = "innovation",
                        lambdas: Optional[PcLambdas] = None) -> float:
    """Unnormalized log posterior density of the hyperparameters."""
    return (log_marginal_likelihood(hyper, data, priors.beta_variance, convention)
            + log_prior(hyper, priors, lambdas))


def _log_jacobian(t: np.ndarray) -> float:
    """log |d(hyper)/d(transformed)| of the componentwise transform."""
    a01 = 1.0 / (1.0 + math.exp(-t[2]))
    return float(t[0] + t[1] + t[3] + math.log(2.0 * a01 * (1.0 - a01)))


@dataclass
class HyperSummary:
    mean: float
    sd: float
    q025: float
    q975: float


@dataclass
class HyperFit:
    """MAP of the hyperparameters with a Gaussian curvature approximation
    in transformed space, plus per-parameter summaries on the natural scale."""

    map: Hyper
    transformed_mode: np.ndarray
    transformed_cov: np.ndarray
    summary: dict
    log_posterior: float
    objective_init: float
    objective_final: float
    n_evaluations: int
    converged: bool
    message: str = ""


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(31)
_GH_WEIGHTS = _GH_WEIGHTS / np.sqrt(2.0 * np.pi)

_INVERSE_TRANSFORMS = (
    np.exp,
    np.exp,
    lambda t: 2.0 / (1.0 + np.exp(-t)) - 1.0,
    np.exp,
)


def _natural_scale_summary(mode: np.ndarray, cov: np.ndarray) -> dict:
    """Mean/SD by Gauss-Hermite quadrature over each transformed marginal,
    quantiles by mapping the normal quantiles through the transform."""
    out = {}
    for j, name in enumerate(HYPER_NAMES):
        g = _INVERSE_TRANSFORMS[j]
        sd_t = math.sqrt(max(cov[j, j], 0.0))
        vals = g(mode[j] + sd_t * _GH_NODES)
        mean = float(_GH_WEIGHTS @ vals)
        var = float(_GH_WEIGHTS @ (vals - mean) ** 2)
        out[name] = HyperSummary(
            mean=mean,
            sd=math.sqrt(max(var, 0.0)),
            q025=float(g(mode[j] - 1.959963984540054 * sd_t)),
            q975=float(g(mode[j] + 1.959963984540054 * sd_t)),
        )
    return out


def optimize_hyper(data: StDataset, priors: PriorSpec, init: Hyper,
                   budget: int = 400, convention: str = "innovation") -> HyperFit:
    """Maximize the hyperparameter posterior with Nelder-Mead.

    The objective is the posterior density of the transformed parameters
    (the componentwise Jacobian is included), which keeps the search
    unconstrained.  Curvature at the mode comes from a central-difference
    Hessian; a budget exhausted before the relative-improvement tolerance
    is met is reported through `converged`, not raised.
    """
    lambdas = calibrate_pc_lambdas(priors)
    evaluations = 0

    def objective(t):
        nonlocal evaluations
        evaluations += 1
        try:
            h = Hyper.from_transformed(t)
            value = (log_hyper_posterior(h, data, priors, convention, lambdas)
                     + _log_jacobian(t))
        except (NumericalError, OverflowError):
            return np.inf
        return -value if np.isfinite(value) else np.inf

    t0 = init.to_transformed()
    f0 = objective(t0)
    # relative-improvement stop: scale the absolute ftol by the objective size
    fatol = 1e-8 * (1.0 + (abs(f0) if np.isfinite(f0) else 1.0))
    res = minimize(objective, t0, method="Nelder-Mead",
                   options=dict(maxfev=budget, xatol=1e-5, fatol=fatol,
                                adaptive=False))
    mode = res.x
    f_mode = float(res.fun)

    n = mode.size
    h_steps = 0.01 * (1.0 + np.abs(mode))
    H = np.zeros((n, n))
    f_center = -f_mode

    def f_at(delta):
        return -objective(mode + delta)

    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h_steps[i]
        H[i, i] = (f_at(ei) - 2.0 * f_center + f_at(-ei)) / h_steps[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h_steps[j]
            H[i, j] = H[j, i] = (
                f_at(ei + ej) - f_at(ei - ej) - f_at(-ei + ej) + f_at(-ei - ej)
            ) / (4.0 * h_steps[i] * h_steps[j])

    neg_H = -(H + H.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(neg_H)
    message = "" if res.success else str(res.message)
    if np.any(eigvals <= 0):
        # flat or indefinite curvature: floor the spectrum so the Gaussian
        # approximation stays usable, and flag it
        eigvals = np.maximum(eigvals, 1e-8)
        message = (message + "; " if message else "") + "Hessian not negative definite at mode"
    cov = (eigvecs / eigvals) @ eigvecs.T

    map_hyper = Hyper.from_transformed(mode)
    return HyperFit(
        map=map_hyper,
        transformed_mode=mode,
        transformed_cov=cov,
        summary=_natural_scale_summary(mode, cov),
        log_posterior=log_hyper_posterior(map_hyper, data, priors, convention, lambdas),
        objective_init=-f0,
        objective_final=-f_mode,
        n_evaluations=evaluations,
        converged=bool(res.success) and np.all(eigvals > 1e-8),
        message=message,
    )


@dataclass
class BetaSummary:
    name: str
    mean: float
    sd: float
    lo95: float
    hi95: float
    significant: bool


@dataclass
class FitResult:
    """Posterior summaries conditional on a hyperparameter value.

    theta arrays have shape (n_areas, T) and cover every cell, censored or
    not; `censored` marks cells with no observed log rate.
    """

    beta: list
    hyper: Optional[HyperFit]
    xi_mean: np.ndarray          # (m, T)
    theta_mean: np.ndarray       # (n_areas, T)
    theta_sd: np.ndarray
    theta_lo95: np.ndarray
    theta_hi95: np.ndarray
    censored: np.ndarray         # (n_areas, T) bool
    area_ids: list
    log_posterior: float
    n_samples: int
    seed: int

    @property
    def rate(self) -> np.ndarray:
        return np.exp(self.theta_mean)

    @property
    def rate_lo95(self) -> np.ndarray:
        return np.exp(self.theta_lo95)

    @property
    def rate_hi95(self) -> np.ndarray:
        return np.exp(self.theta_hi95)


_Z95 = 1.959963984540054


def latent_posterior(data: StDataset, hyper: Hyper, n_samples: int = 250,
                     seed: int = 0, priors: Optional[PriorSpec] = None,
                     hyper_fit: Optional[HyperFit] = None,
                     convention: str = "innovation") -> FitResult:
    """Exact Gaussian posterior of (beta, xi) given the hyperparameters.

    The mean solves Q_c mu = b; marginal spread comes from `n_samples`
    exact draws of the factorized conditional, and intervals are
    mean +/- 1.96 SD, which is exact up to the sampled SD because the
    conditional is Gaussian.  Predictions cover all area-week cells.
    """
    priors = priors or PriorSpec()
    chol, b, _, _ = _conditional(hyper, data, priors.beta_variance, convention)
    mu = chol.solve(b)
    rng = np.random.default_rng(seed)
    draws = mu[:, None] + chol.sample_zero_mean(rng, size=n_samples)

    k = data.n_coef
    beta_mean = mu[:k]
    beta_sd = draws[:k].std(axis=1, ddof=1)
    names = list(data.covariate_names)
    beta = []
    for j in range(k):
        lo = beta_mean[j] - _Z95 * beta_sd[j]
        hi = beta_mean[j] + _Z95 * beta_sd[j]
        beta.append(BetaSummary(
            name=names[j], mean=float(beta_mean[j]), sd=float(beta_sd[j]),
            lo95=float(lo), hi95=float(hi), significant=bool(lo > 0.0 or hi < 0.0)))

    m, T, n_areas = data.m, data.T, data.n_areas
    xi_mean = mu[k:].reshape(T, m).T

    theta_mean = np.empty((n_areas, T))
    theta_sd = np.empty((n_areas, T))
    xb_mean = data.X_area @ beta_mean
    xb_draws = data.X_area @ draws[:k]
    for t in range(T):  # week blocks keep the draw matrix small
        xi_t = mu[k + t * m: k + (t + 1) * m]
        theta_mean[:, t] = xb_mean + data.A @ xi_t
        block = xb_draws + data.A @ draws[k + t * m: k + (t + 1) * m]
        theta_sd[:, t] = block.std(axis=1, ddof=1)

    censored = ~data.observed_mask()
    log_post = None
    if hyper_fit is not None:
        log_post = hyper_fit.log_posterior
    else:
        log_post = log_marginal_likelihood(hyper, data, priors.beta_variance, convention) \
            + log_prior(hyper, priors)

    return FitResult(
        beta=beta,
        hyper=hyper_fit,
        xi_mean=xi_mean,
        theta_mean=theta_mean,
        theta_sd=theta_sd,
        theta_lo95=theta_mean - _Z95 * theta_sd,
        theta_hi95=theta_mean + _Z95 * theta_sd,
        censored=censored,
        area_ids=list(data.area_ids),
        log_posterior=float(log_post),
        n_samples=n_samples,
        seed=seed,
    )


@dataclass(frozen=True)
class RelativeRisk:
    name: str
    delta: float
    rr: float
    lo95: float
    hi95: float
    significant: bool


def relative_risks(beta_summary, deltas: dict) -> list:
    """Multiplicative rate change for a realistic covariate increment.

    RR = exp(beta * delta); interval endpoints are the transformed
    coefficient interval (ordered, so negative deltas are fine), and
    significance carries over from the coefficient interval excluding zero.
    """
    out = []
    for b in beta_summary:
        if b.name not in deltas:
            raise ParameterError(f"no increment supplied for covariate {b.name!r}")
        d = float(deltas[b.name])
        lo, hi = sorted((math.exp(b.lo95 * d), math.exp(b.hi95 * d)))
        out.append(RelativeRisk(
            name=b.name, delta=d, rr=math.exp(b.mean * d),
            lo95=lo, hi95=hi, significant=b.significant))
    return out


def assemble_dataset(cases, areas, covariates, mesh: Mesh,
                     projector: Optional[Projector] = None) -> StDataset:
    """Join the ingested tables into the stacked model dataset.

    `cases` must expose (area_id, week, cases) rows plus T; covariate rows
    are matched per area and get an intercept column prepended.  The log
    rate of every present row becomes an observation.
    """
    from .spde import build_projector, fem_matrices  # local import avoids cycle

    area_pos = {a: i for i, a in enumerate(areas.area_ids)}
    X_area = np.column_stack([np.ones(len(areas.area_ids)),
                              covariates.for_areas(areas.area_ids)])
    names = ["intercept"] + list(covariates.names)

    idx = np.array([area_pos[a] for a in cases.area_id], dtype=int)
    theta = np.log(cases.cases / areas.population[idx])

    if projector is None:
        projector = build_projector(mesh, areas.centroids)
    return StDataset(
        y=theta,
        X=X_area[idx],
        area_index=idx,
        week=np.asarray(cases.week, dtype=int),
        T=cases.T,
        A=projector.A,
        X_area=X_area,
        covariate_names=names,
        area_ids=list(areas.area_ids),
        fem=fem_matrices(mesh),
        mesh=mesh,
    )
