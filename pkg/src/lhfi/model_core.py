"""Evaluation of the latent health factor model.

Links, multinomial likelihoods, priors and the joint unnormalised log
posterior.  Everything here is a pure function of its arguments; the
sampler and the diagnostics build on these pieces.

Metric layout
-------------
Five AMBI metrics are ordered ``m1..m5``.  Metrics 1-2 form the "+" group
(good or neutral health indicators) and metrics 3-5 the "-" group.  Each
group is a multinomial whose residual category (organisms in neither named
metric) is derived as cardinality minus the named counts and never stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln, multigammaln

from .errors import InvalidArgumentError

N_METRICS = 5
NU_CLAMP = 500.0
PRIOR_VAR = 100.0
IG_SHAPE = 1.0
IG_SCALE = 1.0
LOG_2PI = math.log(2.0 * math.pi)

DIAGONAL = "diagonal"
UNSTRUCTURED = "unstructured"
BLOCK = "block"
OFFSET = "offset"
COVARIANCE_VARIANTS = (DIAGONAL, UNSTRUCTURED, BLOCK, OFFSET)

SINGLE = "single"
TWO_LEVEL = "two"
INDEPENDENT = "independent"
CORRELATED = "correlated"


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricGrouping:
    """Split of the five metrics (1-based) by sign of association with health."""

    positive_metrics: tuple[int, ...] = (1, 2)
    negative_metrics: tuple[int, ...] = (3, 4, 5)

    def __post_init__(self):
        pos, neg = set(self.positive_metrics), set(self.negative_metrics)
        if pos & neg or pos | neg != set(range(1, N_METRICS + 1)):
            raise InvalidArgumentError("metric groups must partition {1,...,5}")
        if len(pos) != 2 or len(neg) != 3:
            raise InvalidArgumentError("AMBI grouping needs 2 positive and 3 negative metrics")

    @property
    def positive_index(self) -> np.ndarray:
        return np.asarray(self.positive_metrics) - 1

    @property
    def negative_index(self) -> np.ndarray:
        return np.asarray(self.negative_metrics) - 1

    @property
    def negative_indicator(self) -> np.ndarray:
        """0/1 vector marking metrics that receive the group effect theta_-."""
        s = np.zeros(N_METRICS)
        s[self.negative_index] = 1.0
        return s


AMBI = MetricGrouping()


@dataclass(frozen=True)
class SiteObservation:
    """Counts for one replicate grab sample at one site."""

    site_id: int
    replicate_id: int
    counts: tuple[int, ...]
    cardinality: int

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        where = f"site {self.site_id} replicate {self.replicate_id}"
        if len(counts) != N_METRICS:
            raise InvalidArgumentError(f"{where}: expected {N_METRICS} metric counts, got {len(counts)}")
        if any(c < 0 for c in counts):
            raise InvalidArgumentError(f"{where}: negative metric count")
        if self.cardinality < 1:
            raise InvalidArgumentError(f"{where}: cardinality must be >= 1")
        for name, idx in (("positive", AMBI.positive_index), ("negative", AMBI.negative_index)):
            if sum(counts[i] for i in idx) > self.cardinality:
                raise InvalidArgumentError(f"{where}: {name}-group counts exceed cardinality")


@dataclass(frozen=True)
class GroupProbabilities:
    site_id: int
    p_positive: tuple[float, float]
    p_negative: tuple[float, float, float]


@dataclass(frozen=True)
class CovarianceSpec:
    """Structure of the metric-effect covariance Sigma.

    ``diagonal``      Sigma = sigma_beta^2 I, sigma_beta^2 ~ IG(1, 1)
    ``unstructured``  Sigma ~ IW_5
    ``block``         Sigma_+ ~ IW_2, Sigma_- ~ IW_3, cross block 0
    ``offset``        blocks IW_d + varsigma J, cross block varsigma J,
                      varsigma ~ N(0, 100) truncated to positive-definite Sigma
    """

    variant: str = DIAGONAL

    def __post_init__(self):
        if self.variant not in COVARIANCE_VARIANTS:
            raise InvalidArgumentError(
                f"unknown covariance variant {self.variant!r}; choose from {COVARIANCE_VARIANTS}"
            )


@dataclass(frozen=True)
class ModelSpec:
    """Model variant: covariance structure, covariate levels and coefficient prior.

    ``covariates`` are the columns entering the latent health regression.  For
    a two-level model the downstream covariate (``upstream[1]``) is regressed
    on by ``upstream[0]`` and must not appear in ``covariates``.  Coefficients
    are ordered as :attr:`coefficient_names`.
    """

    covariates: tuple[str, ...] = ()
    covariance: CovarianceSpec = field(default_factory=CovarianceSpec)
    level: str = SINGLE
    upstream: tuple[str, str] = ("salinity", "dd")
    prior_correlation: str = INDEPENDENT

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if isinstance(self.covariance, str):
            object.__setattr__(self, "covariance", CovarianceSpec(self.covariance))
        if len(set(self.covariates)) != len(self.covariates):
            raise InvalidArgumentError("duplicate covariate names")
        if self.level not in (SINGLE, TWO_LEVEL):
            raise InvalidArgumentError(f"level must be {SINGLE!r} or {TWO_LEVEL!r}")
        if self.prior_correlation not in (INDEPENDENT, CORRELATED):
            raise InvalidArgumentError(
                f"prior_correlation must be {INDEPENDENT!r} or {CORRELATED!r}"
            )
        response, driver = self.upstream
        if self.level == TWO_LEVEL:
            if response not in self.covariates:
                raise InvalidArgumentError(f"two-level model needs {response!r} among covariates")
            if driver in self.covariates:
                raise InvalidArgumentError(
                    f"two-level model regresses {response!r} on {driver!r}; "
                    f"{driver!r} cannot also enter the health regression"
                )
        if self.prior_correlation == CORRELATED:
            names = self.coefficient_names
            if response not in names or driver not in names:
                raise InvalidArgumentError(
                    f"correlated prior needs coefficients for both {response!r} and {driver!r}"
                )

    @property
    def two_level(self) -> bool:
        return self.level == TWO_LEVEL

    @property
    def coefficient_names(self) -> tuple[str, ...]:
        if self.two_level:
            return self.covariates + (self.upstream[1],)
        return self.covariates

    @property
    def n_health_coefficients(self) -> int:
        return len(self.covariates)

    @property
    def correlated_pair(self) -> tuple[int, int] | None:
        if self.prior_correlation != CORRELATED:
            return None
        names = self.coefficient_names
        return names.index(self.upstream[0]), names.index(self.upstream[1])

    def required_columns(self) -> tuple[str, ...]:
        cols = list(self.covariates)
        if self.two_level:
            cols.append(self.upstream[1])
        return tuple(cols)


@dataclass
class ParameterState:
    """One point in parameter space.

    ``alpha`` holds every regression coefficient in ``spec.coefficient_names``
    order; for a two-level model its last entry is the salinity-on-DD slope.
    ``theta_plus`` is identically zero and therefore not stored.  Optional
    fields are ``None`` when the model variant does not use them.
    """

    H: np.ndarray
    alpha0: float
    alpha: np.ndarray
    theta_minus: float
    beta: np.ndarray
    sigma_H2: float
    Sigma: np.ndarray
    sigma_beta2: float | None = None
    sigma_delta2: float | None = None
    varsigma: float | None = None
    rho: float | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.Sigma = np.asarray(self.Sigma, dtype=float)

    def copy(self) -> "ParameterState":
        return replace(
            self,
            H=self.H.copy(),
            alpha=self.alpha.copy(),
            beta=self.beta.copy(),
            Sigma=self.Sigma.copy(),
        )


class LHFIData:
    """Observations and engineered covariates aligned on sorted site ids.

    Sufficient statistics are precomputed: per-site summed metric counts and
    summed cardinalities, plus the multinomial-coefficient constant.  Because
    every replicate at a site shares the same probabilities, the per-site
    log-likelihood depends on the counts only through these sums.
    """

    def __init__(
        self,
        observations: Sequence[SiteObservation],
        covariates: Mapping[str, Sequence[float]] | None = None,
        site_ids: Sequence[int] | None = None,
    ):
        if not observations:
            raise InvalidArgumentError("no observations")
        self.observations = tuple(observations)
        keys = [(o.site_id, o.replicate_id) for o in self.observations]
        if len(set(keys)) != len(keys):
            raise InvalidArgumentError("duplicate (site, replicate) observations")
        observed_sites = sorted({o.site_id for o in self.observations})
        self.site_ids = tuple(site_ids) if site_ids is not None else tuple(observed_sites)
        if sorted(self.site_ids) != observed_sites:
            raise InvalidArgumentError("site_ids must match the observed sites")
        index = {s: i for i, s in enumerate(self.site_ids)}
        n = len(self.site_ids)
        self.counts = np.zeros((n, N_METRICS))
        self.cardinality = np.zeros(n)
        self.log_coef = np.zeros(n)
        pos, neg = AMBI.positive_index, AMBI.negative_index
        for o in self.observations:
            i = index[o.site_id]
            y = np.asarray(o.counts, dtype=float)
            self.counts[i] += y
            self.cardinality[i] += o.cardinality
            self.log_coef[i] += _log_multinomial_coef(y[pos], o.cardinality)
            self.log_coef[i] += _log_multinomial_coef(y[neg], o.cardinality)
        self.covariates = {}
        for name, col in (covariates or {}).items():
            arr = np.asarray(col, dtype=float)
            if arr.shape != (n,):
                raise InvalidArgumentError(f"covariate {name!r} has {arr.size} values for {n} sites")
            self.covariates[name] = arr
        self._pos_counts = self.counts[:, pos]
        self._neg_counts = self.counts[:, neg]

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[name]
        except KeyError:
            raise InvalidArgumentError(f"covariate {name!r} not in data") from None

    def design(self, spec: ModelSpec) -> np.ndarray:
        """Health-regression design matrix (n_sites x len(spec.covariates)), no intercept."""
        if not spec.covariates:
            return np.zeros((self.n_sites, 0))
        return np.column_stack([self.column(c) for c in spec.covariates])

    def site_loglik(self, nu: np.ndarray) -> np.ndarray:
        """Per-site multinomial log-likelihood for linear predictors ``nu`` (n_sites x 5).

        Includes the multinomial coefficients.
        """
        pos, neg = AMBI.positive_index, AMBI.negative_index
        nu = np.clip(nu, -NU_CLAMP, NU_CLAMP)
        nu_p = nu[:, pos]
        nu_n = nu[:, neg]
        lse_p = _log1p_sum_exp(nu_p)
        lse_n = _log1p_sum_exp(-nu_n)
        out = (self._pos_counts * nu_p).sum(axis=1) - self.cardinality * lse_p
        out -= (self._neg_counts * nu_n).sum(axis=1) + self.cardinality * lse_n
        return out + self.log_coef


def _log1p_sum_exp(x: np.ndarray) -> np.ndarray:
    """Row-wise log(1 + sum_j exp(x_j)) for inputs already clamped to +-NU_CLAMP.

    exp(500) is finite in double precision, so no max-shift is needed.
    """
    return np.log1p(np.exp(x).sum(axis=1))


def _log_multinomial_coef(counts: np.ndarray, cardinality: float) -> float:
    residual = cardinality - counts.sum()
    return float(gammaln(cardinality + 1) - gammaln(counts + 1).sum() - gammaln(residual + 1))


# ---------------------------------------------------------------------------
# Links and likelihood
# ---------------------------------------------------------------------------


def _finite_vector(nu, size, name):
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (size,):
        raise InvalidArgumentError(f"{name} expects {size} linear predictors, got shape {nu.shape}")
    if not np.all(np.isfinite(nu)):
        raise InvalidArgumentError(f"{name}: non-finite linear predictor {nu}")
    return np.clip(nu, -NU_CLAMP, NU_CLAMP)


def link_inverse_positive(nu, residual: bool = False):
    """Invert the generalised logit for the "+" group.

    ``p_j = exp(nu_j) / (1 + sum exp(nu))``.  With ``residual=True`` also
    return the residual-category probability ``1 / (1 + sum exp(nu))``,
    computed directly rather than as ``1 - sum(p)`` so it keeps full
    relative precision when the named probabilities are close to 1.
    """
    nu = _finite_vector(nu, 2, "link_inverse_positive")
    lse = _log1p_sum_exp(nu[None, :])[0]
    p = np.exp(nu - lse)
    return (p, math.exp(-lse)) if residual else p


def link_inverse_negative(nu, residual: bool = False):
    """Invert the reversed generalised logit for the "-" group.

    ``nu_j = log(residual / p_j)``, so ``p_j = exp(-nu_j) / (1 + sum exp(-nu))``
    and larger ``nu`` (better health) shrinks every ``p_j``.
    """
    nu = _finite_vector(nu, 3, "link_inverse_negative")
    lse = _log1p_sum_exp(-nu[None, :])[0]
    p = np.exp(-nu - lse)
    return (p, math.exp(-lse)) if residual else p


def _log_residual(p, p_residual):
    if p_residual is None:
        return math.log1p(-float(np.sum(p)))
    return math.log(p_residual)


def link_positive(p, p_residual: float | None = None) -> np.ndarray:
    """Forward "+" link: log(p_j / residual); residual defaults to 1 - sum(p)."""
    p = np.asarray(p, dtype=float)
    return np.log(p) - _log_residual(p, p_residual)


def link_negative(p, p_residual: float | None = None) -> np.ndarray:
    """Forward "-" link: log(residual / p_j)."""
    p = np.asarray(p, dtype=float)
    return _log_residual(p, p_residual) - np.log(p)


def linear_predictor(H_i: float, theta: float, beta_j: float) -> float:
    vals = (H_i, theta, beta_j)
    if not all(math.isfinite(v) for v in vals):
        raise InvalidArgumentError("linear_predictor inputs must be finite")
    return H_i + theta + beta_j


def linear_predictors(H: np.ndarray, theta_minus: float, beta: np.ndarray) -> np.ndarray:
    """All nu_ij for every site (n_sites x 5)."""
    return H[:, None] + (theta_minus * AMBI.negative_indicator + beta)[None, :]


def multinomial_loglik(counts, cardinality: int, p) -> float:
    """Log PMF of the named counts plus the derived residual category."""
    counts = np.asarray(counts, dtype=float)
    p = np.asarray(p, dtype=float)
    if counts.shape != p.shape:
        raise InvalidArgumentError("counts and probabilities differ in length")
    if np.any(counts < 0):
        raise InvalidArgumentError("negative count")
    residual = cardinality - counts.sum()
    if residual < 0:
        raise InvalidArgumentError(f"counts sum {counts.sum():g} exceeds cardinality {cardinality}")
    if np.any(p <= 0):
        raise InvalidArgumentError("probabilities must be positive")
    p_res = 1.0 - p.sum()
    if p_res <= 0:
        raise InvalidArgumentError("residual probability must be positive")
    ll = _log_multinomial_coef(counts, cardinality)
    ll += float(np.dot(counts, np.log(p)))
    ll += residual * math.log(p_res)
    return ll


def latent_health_mean(alpha0: float, alpha, x_i) -> float:
    alpha = np.asarray(alpha, dtype=float)
    x_i = np.asarray(x_i, dtype=float)
    if alpha.shape != x_i.shape:
        raise InvalidArgumentError(
            f"coefficient length {alpha.size} does not match covariate length {x_i.size}"
        )
    return float(alpha0 + alpha @ x_i)


def collapse_two_level(alpha: Mapping[str, float], alpha_dd: float, response: str = "salinity") -> dict:
    """Coefficients of the collapsed single-level regression.

    The salinity slope is replaced by an implicit DD slope ``alpha_sal * alpha_dd``;
    the implied error is ``alpha_sal * delta_i + eps_i``.
    """
    if response not in alpha:
        raise InvalidArgumentError(f"{response!r} coefficient absent; nothing to collapse")
    out = {k: float(v) for k, v in alpha.items() if k != response}
    out["dd"] = float(alpha[response]) * float(alpha_dd)
    return out


def variance_ratio(sigma_H2, alpha_sal, sigma_delta2):
    """Share of latent-regression error variance not explained by the implicit covariate.

    Vectorised; apply per posterior draw and summarise the draws.
    """
    sigma_H2 = np.asarray(sigma_H2, dtype=float)
    sigma_delta2 = np.asarray(sigma_delta2, dtype=float)
    if np.any(sigma_H2 <= 0) or np.any(sigma_delta2 <= 0):
        raise InvalidArgumentError("variances must be positive")
    alpha_sal = np.asarray(alpha_sal, dtype=float)
    out = sigma_H2 / (alpha_sal**2 * sigma_delta2 + sigma_H2)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def normal_logpdf(x, mean, var):
    x = np.asarray(x, dtype=float)
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def inv_gamma_logpdf(x: float, shape: float = IG_SHAPE, scale: float = IG_SCALE) -> float:
    if x <= 0:
        return -math.inf
    return shape * math.log(scale) - math.lgamma(shape) - (shape + 1) * math.log(x) - scale / x


def mvn_logpdf(x: np.ndarray, cov: np.ndarray) -> float:
    """Zero-mean multivariate normal log-density; -inf if ``cov`` is not positive definite."""
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return -math.inf
    z = np.linalg.solve(L, x)
    return float(-0.5 * (x.size * LOG_2PI + z @ z) - np.log(np.diag(L)).sum())


def inv_wishart_logpdf(X: np.ndarray, df: float, scale: np.ndarray | None = None) -> float:
    """IW(df, scale): density proportional to |X|^{-(df+d+1)/2} exp(-tr(scale X^{-1})/2)."""
    d = X.shape[0]
    S = np.eye(d) if scale is None else scale
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        return -math.inf
    logdet_X = 2.0 * np.log(np.diag(L)).sum()
    _, logdet_S = np.linalg.slogdet(S)
    Linv = np.linalg.inv(L)
    trace = float(np.sum(S * (Linv.T @ Linv)))
    return float(
        0.5 * df * logdet_S
        - 0.5 * df * d * math.log(2.0)
        - multigammaln(0.5 * df, d)
        - 0.5 * (df + d + 1) * logdet_X
        - 0.5 * trace
    )


def is_positive_definite(M: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    return True


def assemble_offset_sigma(A_pos: np.ndarray, A_neg: np.ndarray, varsigma: float) -> np.ndarray:
    """Sigma = blockdiag(A_+, A_-) + varsigma * J_55 (blocks in metric order)."""
    Sigma = np.zeros((N_METRICS, N_METRICS))
    pos, neg = AMBI.positive_index, AMBI.negative_index
    Sigma[np.ix_(pos, pos)] = A_pos
    Sigma[np.ix_(neg, neg)] = A_neg
    return Sigma + varsigma


def offset_blocks(Sigma: np.ndarray, varsigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Recover the IW-distributed blocks A_+ and A_- from an offset-structured Sigma."""
    pos, neg = AMBI.positive_index, AMBI.negative_index
    return Sigma[np.ix_(pos, pos)] - varsigma, Sigma[np.ix_(neg, neg)] - varsigma


def _require(value, name, spec_desc):
    if value is None:
        raise InvalidArgumentError(f"{spec_desc} requires {name} in the parameter state")
    return value


def covariance_log_prior(state: ParameterState, covariance: CovarianceSpec) -> float:
    Sigma = state.Sigma
    if Sigma.shape != (N_METRICS, N_METRICS):
        raise InvalidArgumentError(f"Sigma must be {N_METRICS}x{N_METRICS}")
    pos, neg = AMBI.positive_index, AMBI.negative_index
    variant = covariance.variant
    if variant == DIAGONAL:
        s2 = _require(state.sigma_beta2, "sigma_beta2", "diagonal covariance")
        if not np.allclose(Sigma, s2 * np.eye(N_METRICS), rtol=1e-12, atol=0.0):
            raise InvalidArgumentError("diagonal covariance: Sigma must equal sigma_beta2 * I")
        return inv_gamma_logpdf(s2)
    if variant == UNSTRUCTURED:
        return inv_wishart_logpdf(Sigma, N_METRICS)
    if variant == BLOCK:
        if np.any(Sigma[np.ix_(pos, neg)] != 0):
            raise InvalidArgumentError("block covariance: cross-group block must be zero")
        return inv_wishart_logpdf(Sigma[np.ix_(pos, pos)], 2) + inv_wishart_logpdf(
            Sigma[np.ix_(neg, neg)], 3
        )
    varsigma = _require(state.varsigma, "varsigma", "offset covariance")
    if not np.allclose(Sigma[np.ix_(pos, neg)], varsigma, rtol=1e-12, atol=1e-12):
        raise InvalidArgumentError("offset covariance: cross-group block must equal varsigma")
    if not is_positive_definite(Sigma):
        return -math.inf
    A_pos, A_neg = offset_blocks(Sigma, varsigma)
    return (
        inv_wishart_logpdf(A_pos, 2)
        + inv_wishart_logpdf(A_neg, 3)
        + float(normal_logpdf(varsigma, 0.0, PRIOR_VAR))
    )


def coefficient_log_prior(alpha: np.ndarray, spec: ModelSpec, rho: float | None) -> float:
    """N(0, 100) per coefficient; the correlated pair is bivariate normal with correlation rho.

    The pair's joint density is factored as N(a; 0, 100) N(b; rho a, 100 (1 - rho^2)),
    so rho = 0 reproduces the independent prior term for term.
    """
    terms = normal_logpdf(alpha, 0.0, PRIOR_VAR)
    pair = spec.correlated_pair
    if pair is not None:
        rho = _require(rho, "rho", "correlated coefficient prior")
        if not -1.0 < rho < 1.0:
            return -math.inf
        i, j = pair
        terms[j] = normal_logpdf(alpha[j], rho * alpha[i], PRIOR_VAR * (1.0 - rho * rho))
    return float(terms.sum())


def rho_log_prior(rho: float) -> float:
    """Unif(-1, 1)."""
    return math.log(0.5) if -1.0 < rho < 1.0 else -math.inf


def log_prior(state: ParameterState, spec: ModelSpec) -> float:
    """Sum of all prior log densities; -inf outside the support.

    Fields the model variant does not use are ignored.
    """
    if state.alpha.shape != (len(spec.coefficient_names),):
        raise InvalidArgumentError(
            f"alpha has {state.alpha.size} entries; spec has coefficients {spec.coefficient_names}"
        )
    lp = float(normal_logpdf(state.alpha0, 0.0, PRIOR_VAR))
    lp += float(normal_logpdf(state.theta_minus, 0.0, PRIOR_VAR))
    lp += coefficient_log_prior(state.alpha, spec, state.rho)
    if spec.correlated_pair is not None:
        lp += rho_log_prior(state.rho)
    lp += inv_gamma_logpdf(state.sigma_H2)
    if spec.two_level:
        lp += inv_gamma_logpdf(_require(state.sigma_delta2, "sigma_delta2", "two-level model"))
    if lp == -math.inf:
        return lp
    return lp + covariance_log_prior(state, spec.covariance)


def salinity_residuals(state: ParameterState, data: LHFIData, spec: ModelSpec) -> np.ndarray:
    """delta_i = x_sal,i - alpha_DD * x_DD,i for a two-level model."""
    if not spec.two_level:
        raise InvalidArgumentError("salinity residuals only exist in a two-level model")
    response, driver = spec.upstream
    return data.column(response) - state.alpha[-1] * data.column(driver)


def total_loglik(state: ParameterState, data: LHFIData) -> float:
    """Multinomial log-likelihood of all metric counts given H, theta_-, beta."""
    nu = linear_predictors(state.H, state.theta_minus, state.beta)
    return float(data.site_loglik(nu).sum())


def deviance(state: ParameterState, data: LHFIData) -> float:
    return -2.0 * total_loglik(state, data)


def joint_log_posterior(state: ParameterState, data: LHFIData, spec: ModelSpec) -> float:
    """Unnormalised log posterior of ``state`` given the data under ``spec``."""
    if state.H.shape != (data.n_sites,):
        raise InvalidArgumentError(f"H has {state.H.size} entries for {data.n_sites} sites")
    if state.beta.shape != (N_METRICS,):
        raise InvalidArgumentError("beta must have 5 entries")
    if not state.sigma_H2 > 0:
        return -math.inf
    if spec.two_level and not (state.sigma_delta2 is not None and state.sigma_delta2 > 0):
        if state.sigma_delta2 is None:
            raise InvalidArgumentError("two-level model requires sigma_delta2")
        return -math.inf
    lp = log_prior(state, spec)
    if lp == -math.inf:
        return lp
    X = data.design(spec)
    k = spec.n_health_coefficients
    mean = state.alpha0 + X @ state.alpha[:k]
    lp += float(normal_logpdf(state.H, mean, state.sigma_H2).sum())
    lp += mvn_logpdf(state.beta, state.Sigma)
    if spec.two_level:
        delta = salinity_residuals(state, data, spec)
        lp += float(normal_logpdf(delta, 0.0, state.sigma_delta2).sum())
    return lp + total_loglik(state, data)
