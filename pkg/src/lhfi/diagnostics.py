"""Convergence diagnostics, posterior summaries, DIC and site ranking.

Everything here is post-processing of :class:`~lhfi.sampler.ChainOutput`
objects or plain draw arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import model_core as mc
from .errors import DegenerateInputError, InvalidArgumentError

DEFAULT_LEVELS = (0.8, 0.95, 0.99)
BGR_COVERAGE = 0.8


# ---------------------------------------------------------------------------
# Brooks-Gelman-Rubin
# ---------------------------------------------------------------------------


@dataclass
class BGRCurves:
    """Interval widths over growing prefixes, each computed on the prefix's second half.

    ``pooled`` and ``within`` are the widths of the pooled and the mean
    within-chain 80% intervals, ``ratio`` their quotient.
    """

    iterations: np.ndarray
    pooled: np.ndarray
    within: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.pooled / self.within


def _width(x, axis=-1):
    lo, hi = np.quantile(x, [0.5 - BGR_COVERAGE / 2, 0.5 + BGR_COVERAGE / 2], axis=axis, method="inverted_cdf")
    return hi - lo


def _bgr_point(X: np.ndarray) -> tuple[float, float]:
    half = X[:, X.shape[1] // 2 :]
    pooled = float(_width(half.ravel()))
    within = float(_width(half, axis=1).mean())
    return pooled, within


def bgr_statistic(chains, n_points: int = 50) -> tuple[float, BGRCurves]:
    """Interval-based R-hat of Brooks and Gelman for one scalar quantity.

    Parameters
    ----------
    chains : sequence of equal-length 1-D arrays, or a 2-D array (chain x draw)
    n_points : number of prefix lengths in the returned curves

    Returns
    -------
    rhat : float
        Pooled over mean within-chain 80% interval width, using the second
        half of every chain.  Identical chains give exactly 1.
    curves : BGRCurves
    """
    try:
        X = np.asarray(chains, dtype=float)
    except ValueError:
        raise InvalidArgumentError("chains must have equal lengths") from None
    if X.ndim != 2:
        raise InvalidArgumentError("expected a chain x draw array")
    m, n = X.shape
    if m < 2:
        raise InvalidArgumentError("BGR needs at least two chains")
    if n < 10:
        raise InvalidArgumentError("BGR needs at least 10 draws per chain")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("draws must be finite")
    pooled, within = _bgr_point(X)
    if within == 0.0:
        raise DegenerateInputError("within-chain interval width is zero")
    ends = np.unique(np.linspace(10, n, min(n_points, n - 9)).astype(int))
    pts = np.array([_bgr_point(X[:, :e]) for e in ends])
    curves = BGRCurves(ends, pts[:, 0], pts[:, 1])
    return pooled / within, curves


# ---------------------------------------------------------------------------
# Effective sample size
# ---------------------------------------------------------------------------


def _autocorr(x: np.ndarray) -> np.ndarray:
    n = x.size
    x = x - x.mean()
    f = np.fft.rfft(x, 2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n]
    return ac / ac[0]


def ess(chains) -> float:
    """Effective sample size by Geyer's initial monotone sequence, summed over chains."""
    X = np.atleast_2d(np.asarray(chains, dtype=float))
    total = 0.0
    for x in X:
        n = x.size
        if n < 4 or np.ptp(x) == 0:
            total += n
            continue
        rho = _autocorr(x)
        pairs = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
        k = np.argmax(pairs <= 0) if np.any(pairs <= 0) else pairs.size
        gamma = np.minimum.accumulate(pairs[:k]) if k else pairs[:0]
        tau = max(-1.0 + 2.0 * float(gamma.sum()), 1.0 / n)
        total += n / tau
    return total


def mcse(chains) -> float:
    """Monte Carlo standard error of the pooled mean."""
    X = np.asarray(chains, dtype=float)
    return float(X.std(ddof=1) / math.sqrt(max(ess(X), 1.0)))


# ---------------------------------------------------------------------------
# DIC
# ---------------------------------------------------------------------------


class DICResult(NamedTuple):
    dic: float
    p_D: float
    mean_deviance: float


def dic(deviance_draws, deviance_at_mean: float) -> DICResult:
    """DIC = D_bar + p_D with p_D = D_bar - D(theta_bar)."""
    d = np.asarray(deviance_draws, dtype=float).ravel()
    if d.size == 0:
        raise InvalidArgumentError("no deviance draws")
    d_bar = float(d.mean())
    p_D = d_bar - float(deviance_at_mean)
    return DICResult(d_bar + p_D, p_D, d_bar)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def _tail_probs(level: float) -> tuple[float, float]:
    a = 0.5 * (1.0 - level)
    return round(a, 10), round(1.0 - a, 10)


@dataclass
class PosteriorSummary:
    """Pooled posterior summary of one scalar quantity.

    ``quantiles`` maps tail probability to value; ``credible`` maps level to
    whether the equal-tailed interval at that level excludes 0.
    """

    name: str
    mean: float
    median: float
    sd: float
    quantiles: dict[float, float]
    credible: dict[float, bool]
    rhat: float | None = None
    ess: float | None = None
    mcse: float | None = None

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        lo, hi = _tail_probs(level)
        try:
            return self.quantiles[lo], self.quantiles[hi]
        except KeyError:
            raise InvalidArgumentError(f"level {level} was not summarised") from None


def summarize_one(name: str, chains, levels: Sequence[float] = DEFAULT_LEVELS) -> PosteriorSummary:
    """Summarise draws given as a 1-D pooled array or a chain x draw array."""
    X = np.asarray(chains, dtype=float)
    if X.size == 0:
        raise InvalidArgumentError(f"no draws for {name!r}")
    for lv in levels:
        if not 0 < lv < 1:
            raise InvalidArgumentError("levels must lie in (0, 1)")
    pooled = X.ravel()
    probs = sorted({p for lv in levels for p in _tail_probs(lv)} | {0.5})
    q = np.quantile(pooled, probs)
    quantiles = dict(zip(probs, (float(v) for v in q)))
    credible = {}
    for lv in levels:
        lo, hi = _tail_probs(lv)
        credible[lv] = bool(quantiles[lo] > 0 or quantiles[hi] < 0)
    rhat = None
    if X.ndim == 2 and X.shape[0] >= 2 and X.shape[1] >= 10:
        try:
            rhat, _ = bgr_statistic(X)
        except DegenerateInputError:
            rhat = float("nan")
    sd = float(pooled.std(ddof=1)) if pooled.size > 1 else 0.0
    n_eff = ess(X) if pooled.size > 1 else float(pooled.size)
    return PosteriorSummary(
        name=name,
        mean=float(pooled.mean()),
        median=quantiles[0.5],
        sd=sd,
        quantiles=quantiles,
        credible=credible,
        rhat=rhat,
        ess=n_eff,
        mcse=sd / math.sqrt(max(n_eff, 1.0)),
    )


def summarize(draws: Mapping[str, np.ndarray], levels: Sequence[float] = DEFAULT_LEVELS) -> list[PosteriorSummary]:
    """Summaries of every named quantity, in mapping order."""
    if not draws:
        raise InvalidArgumentError("nothing to summarise")
    return [summarize_one(name, x, levels) for name, x in draws.items()]


# ---------------------------------------------------------------------------
# Site ranking
# ---------------------------------------------------------------------------


@dataclass
class RankedSite:
    site_id: int
    rank: int
    mean: float
    lower: float
    upper: float


@dataclass
class SiteRanking:
    """Sites ordered from healthiest (rank 1) to least healthy.

    ``distinguishable`` lists site pairs whose intervals do not overlap.
    """

    sites: list[RankedSite]
    level: float
    distinguishable: list[tuple[int, int]] = field(default_factory=list)

    @property
    def all_overlap(self) -> bool:
        return not self.distinguishable


def rank_sites(summaries: Mapping[int, PosteriorSummary], level: float = 0.95) -> SiteRanking:
    """Rank sites by posterior mean health, ties broken by ascending site id."""
    rows = []
    for site, s in summaries.items():
        lo, hi = s.interval(level)
        rows.append((site, s.mean, lo, hi))
    rows.sort(key=lambda r: (-r[1], r[0]))
    ranked = [RankedSite(site, k + 1, m, lo, hi) for k, (site, m, lo, hi) in enumerate(rows)]
    pairs = []
    for a in range(len(ranked)):
        for b in range(a + 1, len(ranked)):
            x, y = ranked[a], ranked[b]
            if x.upper < y.lower or y.upper < x.lower:
                pairs.append(tuple(sorted((x.site_id, y.site_id))))
    return SiteRanking(ranked, level, sorted(pairs))


# ---------------------------------------------------------------------------
# Fitted-model summaries
# ---------------------------------------------------------------------------


def _stack(chains, key):
    return np.stack([c.draws[key] for c in chains])


def _sigma_entries(variant: str) -> list[tuple[int, int]]:
    """Structurally free entries of Sigma (upper triangle, 0-based)."""
    if variant == mc.DIAGONAL:
        return []
    d = mc.N_METRICS
    if variant == mc.UNSTRUCTURED:
        return [(i, j) for i in range(d) for j in range(i, d)]
    out = []
    for idx in (mc.AMBI.positive_index, mc.AMBI.negative_index):
        idx = [int(v) for v in idx]
        out += [(i, j) for a, i in enumerate(idx) for j in idx[a:]]
    return out


def parameter_draws(chains) -> dict[str, np.ndarray]:
    """Monitored scalar quantities as chain x draw arrays, in reporting order.

    Variances are reported as standard deviations (``sigma_H``,
    ``sigma_beta``, ``sigma_delta``); the variance ratio is evaluated per
    draw.  Site health appears as ``H_<site id>`` and is appended by
    :func:`fit_summary` because the ids live on the data.
    """
    if not chains:
        raise InvalidArgumentError("no chains")
    spec = chains[0].spec
    lengths = {c.n_draws for c in chains}
    if len(lengths) != 1 or 0 in lengths:
        raise InvalidArgumentError("chains must hold the same nonzero number of draws")
    out: dict[str, np.ndarray] = {"alpha0": _stack(chains, "alpha0")}
    alpha = _stack(chains, "alpha")
    for k, name in enumerate(spec.coefficient_names):
        out[f"alpha_{name}"] = alpha[:, :, k]
    if spec.correlated_pair is not None:
        out["rho"] = _stack(chains, "rho")
    variant = spec.covariance.variant
    if variant == mc.DIAGONAL:
        out["sigma_beta"] = np.sqrt(_stack(chains, "sigma_beta2"))
    else:
        Sigma = _stack(chains, "Sigma")
        for i, j in _sigma_entries(variant):
            out[f"Sigma_{i + 1}_{j + 1}"] = Sigma[:, :, i, j]
        if variant == mc.OFFSET:
            out["varsigma"] = _stack(chains, "varsigma")
    if spec.two_level:
        out["sigma_delta"] = np.sqrt(_stack(chains, "sigma_delta2"))
    sigma_H2 = _stack(chains, "sigma_H2")
    out["sigma_H"] = np.sqrt(sigma_H2)
    out["theta2"] = _stack(chains, "theta_minus")
    if spec.two_level:
        a_sal = alpha[:, :, spec.coefficient_names.index(spec.upstream[0])]
        out["variance_ratio"] = mc.variance_ratio(sigma_H2, a_sal, _stack(chains, "sigma_delta2"))
    return out


def health_draws(chains, site_ids: Sequence[int]) -> dict[int, np.ndarray]:
    H = _stack(chains, "H")
    return {s: H[:, :, i] for i, s in enumerate(site_ids)}


def fit_summary(chains, data: mc.LHFIData, levels: Sequence[float] = DEFAULT_LEVELS) -> dict[str, PosteriorSummary]:
    """Summaries of every reported quantity keyed by name, site health last."""
    draws = parameter_draws(chains)
    for s, x in health_draws(chains, data.site_ids).items():
        draws[f"H_{s}"] = x
    return {s.name: s for s in summarize(draws, levels)}


def posterior_mean_state(chains) -> mc.ParameterState:
    """Posterior means of every stored field, pooled over chains."""
    pooled = {k: np.concatenate([c.draws[k] for c in chains]).mean(axis=0) for k in chains[0].draws}
    opt = lambda k: float(pooled[k]) if k in pooled else None  # noqa: E731
    return mc.ParameterState(
        H=pooled["H"],
        alpha0=float(pooled["alpha0"]),
        alpha=pooled["alpha"],
        theta_minus=float(pooled["theta_minus"]),
        beta=pooled["beta"],
        sigma_H2=float(pooled["sigma_H2"]),
        Sigma=pooled["Sigma"],
        sigma_beta2=opt("sigma_beta2"),
        sigma_delta2=opt("sigma_delta2"),
        varsigma=opt("varsigma"),
        rho=opt("rho"),
    )


def fit_dic(chains, data: mc.LHFIData) -> DICResult:
    """DIC pooled over all chains; the plug-in deviance uses the posterior means of H, theta and beta."""
    dev = np.concatenate([c.deviance for c in chains])
    return dic(dev, mc.deviance(posterior_mean_state(chains), data))


def plugin_variance_ratio(summaries: Mapping[str, PosteriorSummary], response: str = "salinity") -> float:
    """The variance ratio evaluated once at the posterior means of sigma_H, alpha and sigma_delta."""
    return mc.variance_ratio(
        summaries["sigma_H"].mean**2,
        summaries[f"alpha_{response}"].mean,
        summaries["sigma_delta"].mean**2,
    )
