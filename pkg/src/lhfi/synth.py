"""Forward simulation from the generative model, and parameter-recovery studies."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import model_core as mc
from .covariates import CovariateTable, center
from .errors import InvalidArgumentError, LHFIError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthTruth:
    """Generating parameter values.  Standard deviations, not variances."""

    alpha0: float = -1.56
    coefficients: Mapping[str, float] = field(default_factory=lambda: {"salinity": 0.39})
    alpha_dd: float | None = 0.77
    sigma_H: float = 0.67
    sigma_delta: float = 0.70
    theta_minus: float = 2.09
    sigma_beta: float = 1.12
    Sigma: np.ndarray | None = None


CovariateScheme = Callable[[int, np.random.Generator, "SynthDesign"], dict]


def grid_scheme(name: str = "dd", span: float = 5.8) -> CovariateScheme:
    """Evenly spaced values over [0, span], centred."""

    def scheme(n, rng, design):
        return {name: np.linspace(0.0, span, n) - 0.5 * span}

    return scheme


def uniform_scheme(name: str, half_width: float = 1.0) -> CovariateScheme:
    def scheme(n, rng, design):
        return {name: rng.uniform(-half_width, half_width, n)}

    return scheme


def correlated_pair_scheme(driver: str = "dd", response: str = "salinity", span: float = 5.8) -> CovariateScheme:
    """Driver on a centred grid; response = alpha_dd * driver + N(0, sigma_delta^2)."""

    def scheme(n, rng, design):
        x = np.linspace(0.0, span, n) - 0.5 * span
        t = design.truth
        if t.alpha_dd is None:
            raise InvalidArgumentError("correlated-pair scheme needs truth.alpha_dd")
        return {driver: x, response: t.alpha_dd * x + t.sigma_delta * rng.standard_normal(n)}

    return scheme


@dataclass(frozen=True)
class SynthDesign:
    n_sites: int = 18
    replicates: int = 3
    cardinality: tuple[int, int] = (200, 2000)
    truth: SynthTruth = field(default_factory=SynthTruth)
    schemes: tuple[CovariateScheme, ...] = field(default_factory=lambda: (correlated_pair_scheme(),))
    raw_offsets: Mapping[str, float] = field(default_factory=lambda: {"salinity": 20.0, "dd": 3.0})
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.cardinality
        if self.n_sites < 1 or self.replicates < 1:
            raise InvalidArgumentError("need at least one site and one replicate")
        if lo < 1 or hi < lo:
            raise InvalidArgumentError("cardinality range must satisfy 1 <= min <= max")
        t = self.truth
        if min(t.sigma_H, t.sigma_delta, t.sigma_beta) < 0:
            raise InvalidArgumentError("standard deviations must be non-negative")


@dataclass
class SynthDataset:
    observations: list[mc.SiteObservation]
    covariates: CovariateTable
    truth: mc.ParameterState
    generating_covariates: dict[str, np.ndarray]
    truth_names: tuple[str, ...]


def generate(design: SynthDesign) -> SynthDataset:
    """Simulate counts and covariates.

    Order of draws: covariates (salinity residuals included), latent health
    errors, metric effects, then per-replicate cardinalities and the two
    multinomials.  Everything comes from one seeded stream.
    """
    rng = np.random.default_rng(design.seed)
    n = design.n_sites
    t = design.truth
    x: dict[str, np.ndarray] = {}
    for scheme in design.schemes:
        x.update(scheme(n, rng, design))
    names = tuple(t.coefficients)
    for name in names:
        if name not in x:
            raise InvalidArgumentError(f"no covariate scheme produces {name!r}")
    mean = t.alpha0 + sum(t.coefficients[c] * x[c] for c in names)
    H = mean + t.sigma_H * rng.standard_normal(n)
    Sigma = t.Sigma if t.Sigma is not None else t.sigma_beta**2 * np.eye(mc.N_METRICS)
    beta = rng.multivariate_normal(np.zeros(mc.N_METRICS), Sigma, method="eigh")
    nu = mc.linear_predictors(H, t.theta_minus, beta)
    site_ids = list(range(1, n + 1))
    lo, hi = design.cardinality
    observations = []
    for i, s in enumerate(site_ids):
        p_pos, r_pos = mc.link_inverse_positive(nu[i, :2], residual=True)
        p_neg, r_neg = mc.link_inverse_negative(nu[i, 2:], residual=True)
        for k in range(1, design.replicates + 1):
            N = int(rng.integers(lo, hi + 1))
            pos = rng.multinomial(N, _normalised(p_pos, r_pos))
            neg = rng.multinomial(N, _normalised(p_neg, r_neg))
            observations.append(mc.SiteObservation(s, k, (*pos[:2], *neg[:3]), N))
    raw = {c: v + design.raw_offsets.get(c, 0.0) for c, v in x.items()}
    table = CovariateTable(tuple(site_ids), raw)
    truth = mc.ParameterState(
        H=H,
        alpha0=t.alpha0,
        alpha=np.array([t.coefficients[c] for c in names] + ([t.alpha_dd] if t.alpha_dd is not None else [])),
        theta_minus=t.theta_minus,
        beta=beta,
        sigma_H2=t.sigma_H**2,
        Sigma=Sigma,
        sigma_beta2=t.sigma_beta**2,
        sigma_delta2=t.sigma_delta**2,
    )
    return SynthDataset(observations, table, truth, x, names)


def _normalised(p, residual):
    probs = np.append(p, residual)
    return probs / probs.sum()


def to_model_data(ds: SynthDataset, extra_columns: Mapping[str, np.ndarray] | None = None) -> mc.LHFIData:
    """Centre every generated covariate by its sample mean and build LHFIData."""
    cols = {c: center(ds.covariates[c]).values for c in ds.covariates.columns}
    cols.update(extra_columns or {})
    return mc.LHFIData(ds.observations, cols, site_ids=ds.covariates.site_ids)


def fitted_truth(ds: SynthDataset, spec: mc.ModelSpec) -> dict[str, float | np.ndarray]:
    """True values expressed in the fitted (sample-centred) parameterisation.

    Slopes are invariant to centring; the intercept absorbs each generating
    covariate's sample mean.  Covariates omitted by ``spec`` are not
    absorbed, so the intercept target stays the mean latent health.
    """
    t = ds.truth
    coef = dict(zip(ds.truth_names, t.alpha[: len(ds.truth_names)]))
    alpha0 = t.alpha0 + sum(coef[c] * ds.generating_covariates[c].mean() for c in ds.truth_names)
    out: dict[str, float | np.ndarray] = {
        "alpha0": alpha0,
        "theta2": t.theta_minus,
        "sigma_H": float(np.sqrt(t.sigma_H2)),
        "H": t.H,
    }
    for c in spec.covariates:
        out[f"alpha_{c}"] = coef.get(c, 0.0)
    if spec.two_level:
        out[f"alpha_{spec.upstream[1]}"] = t.alpha[-1]
        out["sigma_delta"] = float(np.sqrt(t.sigma_delta2))
    if spec.covariance.variant == mc.DIAGONAL:
        out["sigma_beta"] = float(np.sqrt(t.sigma_beta2))
    return out


@dataclass
class CoverageReport:
    n_replications: int
    covered: dict[str, int] = field(default_factory=dict)
    trials: dict[str, int] = field(default_factory=dict)
    widths: dict[str, list] = field(default_factory=dict)
    failures: list[tuple[int, str]] = field(default_factory=list)

    def coverage(self, name: str) -> float:
        return self.covered[name] / self.trials[name]

    def mean_width(self, name: str) -> float:
        return float(np.mean(self.widths[name]))

    def flagged(self, threshold: float) -> list[str]:
        """Parameters whose empirical coverage fell below ``threshold``."""
        return sorted(n for n in self.trials if self.trials[n] and self.coverage(n) < threshold)

    def rows(self):
        for name in sorted(self.trials):
            yield name, self.covered[name], self.trials[name], self.coverage(name), self.mean_width(name)


def recovery_study(
    design: SynthDesign,
    spec: mc.ModelSpec,
    config,
    n_replications: int,
    level: float = 0.95,
) -> CoverageReport:
    """Generate, fit and check CI coverage of the true values, ``n_replications`` times.

    Replication r uses design seed ``(design.seed, r)`` and sampler seed
    ``config.seed + r``.  Sampler failures are recorded, not raised.
    """
    from .diagnostics import fit_summary
    from .sampler import run_chains

    report = CoverageReport(n_replications)
    for r in range(n_replications):
        seed = int(np.random.SeedSequence([design.seed, r]).generate_state(1)[0])
        ds = generate(replace(design, seed=seed))
        data = to_model_data(ds)
        try:
            chains = run_chains(data, spec, replace(config, seed=config.seed + r))
        except LHFIError as exc:
            report.failures.append((r, str(exc)))
            log.warning("replication %d failed: %s", r, exc)
            continue
        summaries = fit_summary(chains, data, levels=(level,))
        truth = fitted_truth(ds, spec)
        for name, true_value in truth.items():
            if name == "H":
                for i, h in enumerate(true_value):
                    _score(report, "H", summaries[f"H_{data.site_ids[i]}"], h, level)
                continue
            _score(report, name, summaries[name], true_value, level)
    return report


def _score(report, name, summary, value, level):
    lo, hi = summary.interval(level)
    report.trials[name] = report.trials.get(name, 0) + 1
    report.covered[name] = report.covered.get(name, 0) + int(lo <= value <= hi)
    report.widths.setdefault(name, []).append(hi - lo)
