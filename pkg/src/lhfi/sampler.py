"""Metropolis-within-Gibbs sampler for the latent health factor model.

Update blocks, in sweep order:

``H``        site-wise Gaussian random-walk Metropolis (vectorised over sites,
             accepted independently because the sites are conditionally
             independent given everything else)
``alpha``    (alpha_0, alpha) jointly: exact conjugate draw under hierarchical
             centring, random-walk block Metropolis on the non-centred scale
             otherwise
``theta``    theta_- : conjugate draw holding the metric locations fixed
             (centred) or random-walk Metropolis holding beta fixed
``beta``     5-vector random-walk block Metropolis
``shift``    joint translation of (H, alpha_0) against (theta_-, beta_+) that
             leaves every linear predictor unchanged; only priors move
``sigma_H2`` / ``sigma_delta2`` / ``Sigma`` conjugate draws (``Sigma`` under
             the offset structure uses Metropolis on a log-Cholesky scale)
``varsigma`` / ``rho``  scalar random-walk Metropolis

Proposal scales adapt by Robbins-Monro on windowed acceptance rates during
burn-in and are frozen afterwards.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from . import model_core as mc
from .errors import InitializationError, InvalidArgumentError, NotApplicableError, SamplerStateError

log = logging.getLogger(__name__)

BLOCKS = ("H", "alpha", "theta", "beta", "shift", "sigma_H2", "sigma_delta2", "Sigma", "varsigma", "rho")

_POS = mc.AMBI.positive_index
_NEG = mc.AMBI.negative_index
_S_NEG = mc.AMBI.negative_indicator
_S_POS = 1.0 - _S_NEG


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 2
    n_iterations: int = 120_000
    burn_in: int = 20_000
    thin: int = 100
    seed: int = 0
    adapt_window: int = 50
    target_accept: float = 0.44
    target_accept_block: float = 0.23
    hierarchical_centring: bool = True
    jitter: float = 0.1
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_chains < 1:
            raise InvalidArgumentError("n_chains must be >= 1")
        if self.thin < 1:
            raise InvalidArgumentError("thin must be >= 1")
        if not 0 <= self.burn_in < self.n_iterations:
            raise InvalidArgumentError("need 0 <= burn_in < n_iterations")
        if self.adapt_window < 1:
            raise InvalidArgumentError("adapt_window must be >= 1")
        for t in (self.target_accept, self.target_accept_block):
            if not 0 < t < 1:
                raise InvalidArgumentError("acceptance targets must lie in (0, 1)")

    @property
    def n_draws(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thin


@dataclass
class ChainOutput:
    """Thinned post-burn-in draws of one chain, stored column-wise."""

    chain_id: int
    spec: mc.ModelSpec
    draws: dict[str, np.ndarray]
    deviance: np.ndarray
    acceptance: dict[str, float]
    scales: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.deviance.size

    def state(self, t: int) -> mc.ParameterState:
        d = self.draws
        opt = lambda k: None if k not in d else float(d[k][t])  # noqa: E731
        return mc.ParameterState(
            H=d["H"][t].copy(),
            alpha0=float(d["alpha0"][t]),
            alpha=d["alpha"][t].copy(),
            theta_minus=float(d["theta_minus"][t]),
            beta=d["beta"][t].copy(),
            sigma_H2=float(d["sigma_H2"][t]),
            Sigma=d["Sigma"][t].copy(),
            sigma_beta2=opt("sigma_beta2"),
            sigma_delta2=opt("sigma_delta2"),
            varsigma=opt("varsigma"),
            rho=opt("rho"),
        )

    def states(self) -> Iterator[mc.ParameterState]:
        for t in range(self.n_draws):
            yield self.state(t)


# ---------------------------------------------------------------------------
# Conjugate draws
# ---------------------------------------------------------------------------


def sample_inv_gamma(shape: float, scale: float, rng: np.random.Generator) -> float:
    return scale / rng.gamma(shape)


def gibbs_update_sigma_H2(H, means, rng: np.random.Generator) -> float:
    """sigma_H^2 | H ~ IG(1 + n/2, 1 + SSR/2) under the IG(1, 1) prior."""
    r = np.asarray(H, dtype=float) - np.asarray(means, dtype=float)
    return sample_inv_gamma(mc.IG_SHAPE + 0.5 * r.size, mc.IG_SCALE + 0.5 * float(r @ r), rng)


def gibbs_update_sigma_delta2(residuals, rng: np.random.Generator) -> float:
    """sigma_delta^2 | delta ~ IG(1 + n/2, 1 + sum(delta^2)/2)."""
    r = np.asarray(residuals, dtype=float)
    return sample_inv_gamma(mc.IG_SHAPE + 0.5 * r.size, mc.IG_SCALE + 0.5 * float(r @ r), rng)


def sample_inverse_wishart(df: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from IW(df, scale) via the Bartlett decomposition of its inverse."""
    d = scale.shape[0]
    C = np.linalg.cholesky(np.linalg.inv(scale))
    A = np.zeros((d, d))
    A[np.diag_indices(d)] = np.sqrt(rng.chisquare(df - np.arange(d)))
    A[np.tril_indices(d, -1)] = rng.standard_normal(d * (d - 1) // 2)
    T_inv = np.linalg.inv(C @ A)
    X = T_inv.T @ T_inv
    return 0.5 * (X + X.T)


def gibbs_update_Sigma_blocks(beta, covariance: mc.CovarianceSpec, rng: np.random.Generator) -> np.ndarray:
    """Conjugate inverse-Wishart update of Sigma given beta.

    Unstructured: IW(6, I + beta beta').  Block: independent IW(3, I + b+ b+')
    and IW(4, I + b- b-'), cross block exactly zero.
    """
    beta = np.asarray(beta, dtype=float)
    if covariance.variant == mc.UNSTRUCTURED:
        return sample_inverse_wishart(mc.N_METRICS + 1, np.eye(mc.N_METRICS) + np.outer(beta, beta), rng)
    if covariance.variant == mc.BLOCK:
        Sigma = np.zeros((mc.N_METRICS, mc.N_METRICS))
        for idx in (_POS, _NEG):
            b = beta[idx]
            d = b.size
            Sigma[np.ix_(idx, idx)] = sample_inverse_wishart(d + 1, np.eye(d) + np.outer(b, b), rng)
        return Sigma
    raise NotApplicableError(f"no conjugate Sigma update for the {covariance.variant!r} structure")


# ---------------------------------------------------------------------------
# Metropolis pieces
# ---------------------------------------------------------------------------


def mh_update_block(current, log_target: Callable[[np.ndarray], float], scale, rng, current_log_target=None):
    """One Gaussian random-walk Metropolis step.

    Returns ``(value, accepted, log_target_value)``.  A proposal with log
    target -inf is always rejected.
    """
    current = np.asarray(current, dtype=float)
    lp_cur = log_target(current) if current_log_target is None else current_log_target
    if not np.isfinite(lp_cur):
        raise SamplerStateError("log target is not finite at the current point")
    proposal = current + np.asarray(scale) * rng.standard_normal(current.shape)
    lp_prop = log_target(proposal)
    if lp_prop == -math.inf:
        return current, False, lp_cur
    if math.log(rng.random()) < lp_prop - lp_cur:
        return proposal, True, lp_prop
    return current, False, lp_cur


def log_cholesky_params(A: np.ndarray) -> np.ndarray:
    """Unconstrained coordinates of an SPD matrix: Cholesky factor with log diagonal."""
    L = np.linalg.cholesky(A)
    d = A.shape[0]
    L[np.diag_indices(d)] = np.log(np.diag(L))
    return L[np.tril_indices(d)]


def from_log_cholesky(u: np.ndarray, d: int) -> tuple[np.ndarray, float]:
    """Inverse of :func:`log_cholesky_params`, with the log-Jacobian |dA/du|."""
    L = np.zeros((d, d))
    L[np.tril_indices(d)] = u
    logdiag = np.diag(L).copy()
    L[np.diag_indices(d)] = np.exp(logdiag)
    # dA/dL contributes 2^d prod L_ii^(d-i+1); exp on the diagonal adds prod L_ii
    log_jac = d * math.log(2.0) + float(((d + 1 - np.arange(d)) * logdiag).sum())
    return L @ L.T, log_jac


# ---------------------------------------------------------------------------
# Hierarchical centring
# ---------------------------------------------------------------------------


@dataclass
class CentredState:
    """Metric-level locations ``b_j = theta_s(j) + beta_j`` replace beta.

    ``eta`` gives the centred linear predictors eta_ij = H_i + b_j.
    """

    base: mc.ParameterState
    b: np.ndarray

    @property
    def eta(self) -> np.ndarray:
        return self.base.H[:, None] + self.b[None, :]


def hierarchical_centring_transform(state, direction: str = "forward"):
    """Map ParameterState <-> CentredState.  theta_+ stays identically 0."""
    if direction == "forward":
        b = state.beta + state.theta_minus * _S_NEG
        return CentredState(state.copy(), b)
    if direction == "inverse":
        out = state.base.copy()
        out.beta = state.b - out.theta_minus * _S_NEG
        return out
    raise InvalidArgumentError("direction must be 'forward' or 'inverse'")


# ---------------------------------------------------------------------------
# Chain
# ---------------------------------------------------------------------------


class _Adapter:
    """Robbins-Monro scaling of random-walk step sizes from windowed acceptance."""

    def __init__(self, scale, target):
        self.log_scale = np.log(np.atleast_1d(np.asarray(scale, dtype=float)))
        self.target = target
        self.window_accepts = np.zeros_like(self.log_scale)
        self.window_tries = 0
        self.n_windows = 0
        self.accepts = np.zeros_like(self.log_scale)
        self.tries = 0

    @property
    def scale(self):
        s = np.exp(self.log_scale)
        return s if s.size > 1 else float(s[0])

    def record(self, accepted):
        self.window_accepts += accepted
        self.window_tries += 1
        self.accepts += accepted
        self.tries += 1

    def adapt(self):
        if self.window_tries == 0:
            return
        self.n_windows += 1
        rate = self.window_accepts / self.window_tries
        self.log_scale += (rate - self.target) * min(1.0, 5.0 / math.sqrt(self.n_windows))
        self.window_accepts[:] = 0
        self.window_tries = 0

    def reset_counts(self):
        self.accepts[:] = 0
        self.tries = 0
        self.window_accepts[:] = 0
        self.window_tries = 0

    def rate(self) -> float:
        return float(self.accepts.mean() / self.tries) if self.tries else float("nan")


def initial_state(data: mc.LHFIData, spec: mc.ModelSpec, rng: np.random.Generator, jitter: float = 0.1) -> mc.ParameterState:
    """Zero locations, unit variances, identity Sigma, each perturbed by +-jitter."""
    n, p = data.n_sites, len(spec.coefficient_names)
    u = lambda size=None: jitter * rng.uniform(-1.0, 1.0, size)  # noqa: E731
    variant = spec.covariance.variant
    state = mc.ParameterState(
        H=u(n),
        alpha0=float(u()),
        alpha=u(p),
        theta_minus=float(u()),
        beta=u(mc.N_METRICS),
        sigma_H2=1.0 + float(u()),
        Sigma=np.eye(mc.N_METRICS),
        sigma_delta2=1.0 + float(u()) if spec.two_level else None,
        rho=float(u()) if spec.correlated_pair is not None else None,
    )
    if variant == mc.DIAGONAL:
        state.sigma_beta2 = 1.0 + float(u())
        state.Sigma = state.sigma_beta2 * np.eye(mc.N_METRICS)
    elif variant == mc.OFFSET:
        state.varsigma = float(u())
        state.Sigma = mc.assemble_offset_sigma(np.eye(2), np.eye(3), state.varsigma)
    return state


class _Chain:
    def __init__(self, data, spec, config, rng, state, fixed=frozenset()):
        self.data, self.spec, self.config, self.rng = data, spec, config, rng
        self.fixed = frozenset(fixed)
        unknown = self.fixed - set(BLOCKS)
        if unknown:
            raise InvalidArgumentError(f"unknown blocks {sorted(unknown)}")
        self.centred = config.hierarchical_centring
        self.variant = spec.covariance.variant
        self.n = data.n_sites
        self.k = spec.n_health_coefficients
        self.Z = np.column_stack([np.ones(self.n), data.design(spec)])
        self.ZtZ = self.Z.T @ self.Z
        if spec.two_level:
            response, driver = spec.upstream
            self.x_sal = data.column(response)
            self.x_dd = data.column(driver)
            self.dd_ss = float(self.x_dd @ self.x_dd)
            self.dd_sal = float(self.x_dd @ self.x_sal)

        s = state.copy()
        self.H = s.H
        self.alpha0 = s.alpha0
        self.alpha = s.alpha
        self.theta = s.theta_minus
        self.beta = s.beta
        self.sigma_H2 = s.sigma_H2
        self.sigma_delta2 = s.sigma_delta2
        self.sigma_beta2 = s.sigma_beta2
        self.varsigma = s.varsigma
        self.rho = s.rho
        self.Sigma = s.Sigma
        if self.variant == mc.OFFSET:
            self.A_pos, self.A_neg = mc.offset_blocks(self.Sigma, self.varsigma)
        self._refresh_sigma()

        lp = mc.joint_log_posterior(self.export(), data, spec)
        if not np.isfinite(lp):
            raise InitializationError("initial state has non-finite log posterior")
        self.ll = data.site_loglik(self._nu(self.H, self.theta, self.beta))

        cfg = config
        self.adapters = {
            "H": _Adapter(np.full(self.n, 0.1), cfg.target_accept),
            "beta": _Adapter(0.05, cfg.target_accept_block),
            "shift": _Adapter(0.5, cfg.target_accept),
        }
        if not self.centred:
            self.adapters["alpha"] = _Adapter(0.05, cfg.target_accept_block)
            self.adapters["theta"] = _Adapter(0.05, cfg.target_accept)
        if self.variant == mc.OFFSET:
            self.adapters["Sigma+"] = _Adapter(0.1, cfg.target_accept_block)
            self.adapters["Sigma-"] = _Adapter(0.1, cfg.target_accept_block)
            self.adapters["varsigma"] = _Adapter(0.1, cfg.target_accept)
        if self.rho is not None:
            self.adapters["rho"] = _Adapter(0.1, cfg.target_accept)

    # -- helpers --------------------------------------------------------------

    @staticmethod
    def _nu(H, theta, beta):
        return H[:, None] + (theta * _S_NEG + beta)[None, :]

    def _refresh_sigma(self):
        if self.variant == mc.DIAGONAL:
            self.Sigma = self.sigma_beta2 * np.eye(mc.N_METRICS)
            self.Sigma_inv = np.eye(mc.N_METRICS) / self.sigma_beta2
            self.Sigma_logdet = mc.N_METRICS * math.log(self.sigma_beta2)
        else:
            L = np.linalg.cholesky(self.Sigma)
            Linv = np.linalg.inv(L)
            self.Sigma_inv = Linv.T @ Linv
            self.Sigma_logdet = 2.0 * float(np.log(np.diag(L)).sum())

    def _beta_logprior(self, beta) -> float:
        return -0.5 * (float(beta @ self.Sigma_inv @ beta) + self.Sigma_logdet)

    def _regression_mean(self):
        return self.Z @ np.concatenate(([self.alpha0], self.alpha[: self.k]))

    def export(self) -> mc.ParameterState:
        return mc.ParameterState(
            H=self.H.copy(),
            alpha0=float(self.alpha0),
            alpha=self.alpha.copy(),
            theta_minus=float(self.theta),
            beta=self.beta.copy(),
            sigma_H2=float(self.sigma_H2),
            Sigma=self.Sigma.copy(),
            sigma_beta2=self.sigma_beta2,
            sigma_delta2=self.sigma_delta2,
            varsigma=self.varsigma,
            rho=self.rho,
        )

    # -- blocks ----------------------------------------------------------------

    def update_H(self):
        ad = self.adapters["H"]
        rng = self.rng
        mean = self._regression_mean()
        prop = self.H + ad.scale * rng.standard_normal(self.n)
        ll_prop = self.data.site_loglik(self._nu(prop, self.theta, self.beta))
        log_ratio = ll_prop - self.ll
        log_ratio -= 0.5 * ((prop - mean) ** 2 - (self.H - mean) ** 2) / self.sigma_H2
        acc = np.log(rng.random(self.n)) < log_ratio
        self.H = np.where(acc, prop, self.H)
        self.ll = np.where(acc, ll_prop, self.ll)
        ad.record(acc)

    def _coefficient_precision(self):
        """Prior precision of (alpha_0, alpha) in coefficient order."""
        p = 1 + self.alpha.size
        P0 = np.eye(p) / mc.PRIOR_VAR
        pair = self.spec.correlated_pair
        if pair is not None:
            i, j = pair[0] + 1, pair[1] + 1
            r = self.rho
            c = 1.0 / (mc.PRIOR_VAR * (1.0 - r * r))
            P0[i, i] = P0[j, j] = c
            P0[i, j] = P0[j, i] = -r * c
        return P0

    def update_alpha_gibbs(self):
        k = self.k
        P = self._coefficient_precision()
        rhs = np.zeros(P.shape[0])
        P[: k + 1, : k + 1] += self.ZtZ / self.sigma_H2
        rhs[: k + 1] = self.Z.T @ self.H / self.sigma_H2
        if self.spec.two_level:
            P[-1, -1] += self.dd_ss / self.sigma_delta2
            rhs[-1] = self.dd_sal / self.sigma_delta2
        V = np.linalg.inv(P)
        draw = V @ rhs + np.linalg.cholesky(V) @ self.rng.standard_normal(P.shape[0])
        self.alpha0 = float(draw[0])
        self.alpha = draw[1:]

    def _alpha_log_target(self, coef):
        """Non-centred target for (alpha_0, alpha) with eps = H - mean held fixed."""
        alpha0, alpha = coef[0], coef[1:]
        eps = self.H - self._regression_mean()
        H = alpha0 + self.Z[:, 1:] @ alpha[: self.k] + eps
        ll = self.data.site_loglik(self._nu(H, self.theta, self.beta))
        lp = float(ll.sum()) - 0.5 * alpha0**2 / mc.PRIOR_VAR
        lp += mc.coefficient_log_prior(alpha, self.spec, self.rho)
        if self.spec.two_level:
            d = self.x_sal - alpha[-1] * self.x_dd
            lp -= 0.5 * float(d @ d) / self.sigma_delta2
        return lp, H, ll

    def update_alpha_rw(self):
        ad = self.adapters["alpha"]
        cur = np.concatenate(([self.alpha0], self.alpha))
        lp_cur, _, _ = self._alpha_log_target(cur)
        prop = cur + ad.scale * self.rng.standard_normal(cur.size)
        lp_prop, H, ll = self._alpha_log_target(prop)
        accepted = math.log(self.rng.random()) < lp_prop - lp_cur
        if accepted:
            self.alpha0, self.alpha, self.H, self.ll = float(prop[0]), prop[1:], H, ll
        ad.record(accepted)

    def update_theta_gibbs(self):
        # metric locations b = beta + theta * s stay fixed; theta | b is Gaussian
        b = self.beta + self.theta * _S_NEG
        Sis = self.Sigma_inv @ _S_NEG
        prec = float(_S_NEG @ Sis) + 1.0 / mc.PRIOR_VAR
        mean = float(Sis @ b) / prec
        self.theta = mean + self.rng.standard_normal() / math.sqrt(prec)
        self.beta = b - self.theta * _S_NEG

    def update_theta_rw(self):
        ad = self.adapters["theta"]
        prop = self.theta + ad.scale * self.rng.standard_normal()
        ll = self.data.site_loglik(self._nu(self.H, prop, self.beta))
        log_ratio = float(ll.sum() - self.ll.sum()) - 0.5 * (prop**2 - self.theta**2) / mc.PRIOR_VAR
        accepted = math.log(self.rng.random()) < log_ratio
        if accepted:
            self.theta, self.ll = prop, ll
        ad.record(accepted)

    def update_beta(self):
        ad = self.adapters["beta"]
        prop = self.beta + ad.scale * self.rng.standard_normal(mc.N_METRICS)
        ll = self.data.site_loglik(self._nu(self.H, self.theta, prop))
        log_ratio = float(ll.sum() - self.ll.sum())
        log_ratio += self._beta_logprior(prop) - self._beta_logprior(self.beta)
        accepted = math.log(self.rng.random()) < log_ratio
        if accepted:
            self.beta, self.ll = prop, ll
        ad.record(accepted)

    def update_shift(self):
        # (H + c, alpha_0 + c, theta - c, beta_+ - c) leaves nu and the H regression unchanged
        ad = self.adapters["shift"]
        c = ad.scale * self.rng.standard_normal()
        beta = self.beta - c * _S_POS
        a0, th = self.alpha0 + c, self.theta - c
        log_ratio = self._beta_logprior(beta) - self._beta_logprior(self.beta)
        log_ratio -= 0.5 * (a0**2 - self.alpha0**2 + th**2 - self.theta**2) / mc.PRIOR_VAR
        accepted = math.log(self.rng.random()) < log_ratio
        if accepted:
            self.H = self.H + c
            self.alpha0, self.theta, self.beta = a0, th, beta
        ad.record(accepted)

    def update_sigma_H2(self):
        self.sigma_H2 = gibbs_update_sigma_H2(self.H, self._regression_mean(), self.rng)

    def update_sigma_delta2(self):
        self.sigma_delta2 = gibbs_update_sigma_delta2(self.x_sal - self.alpha[-1] * self.x_dd, self.rng)

    def update_Sigma(self):
        if self.variant == mc.DIAGONAL:
            b = self.beta
            self.sigma_beta2 = sample_inv_gamma(
                mc.IG_SHAPE + 0.5 * mc.N_METRICS, mc.IG_SCALE + 0.5 * float(b @ b), self.rng
            )
        elif self.variant in (mc.UNSTRUCTURED, mc.BLOCK):
            self.Sigma = gibbs_update_Sigma_blocks(self.beta, self.spec.covariance, self.rng)
        else:
            self._update_offset_block("Sigma+", 2)
            self._update_offset_block("Sigma-", 3)
            return
        self._refresh_sigma()

    def _offset_beta_logpdf(self, A_pos, A_neg, varsigma):
        return mc.mvn_logpdf(self.beta, mc.assemble_offset_sigma(A_pos, A_neg, varsigma))

    def _update_offset_block(self, name, d):
        ad = self.adapters[name]
        A_cur = self.A_pos if d == 2 else self.A_neg

        def target(u):
            A, log_jac = from_log_cholesky(u, d)
            pair = (A, self.A_neg) if d == 2 else (self.A_pos, A)
            lp = self._offset_beta_logpdf(*pair, self.varsigma)
            if lp == -math.inf:
                return lp
            return lp + mc.inv_wishart_logpdf(A, d) + log_jac

        u, accepted, _ = mh_update_block(log_cholesky_params(A_cur), target, ad.scale, self.rng)
        if accepted:
            A, _ = from_log_cholesky(u, d)
            if d == 2:
                self.A_pos = A
            else:
                self.A_neg = A
            self.Sigma = mc.assemble_offset_sigma(self.A_pos, self.A_neg, self.varsigma)
            self._refresh_sigma()
        ad.record(accepted)

    def update_varsigma(self):
        ad = self.adapters["varsigma"]

        def target(v):
            lp = self._offset_beta_logpdf(self.A_pos, self.A_neg, float(v[0]))
            return lp + float(mc.normal_logpdf(v[0], 0.0, mc.PRIOR_VAR))

        v, accepted, _ = mh_update_block(np.array([self.varsigma]), target, ad.scale, self.rng)
        if accepted:
            self.varsigma = float(v[0])
            self.Sigma = mc.assemble_offset_sigma(self.A_pos, self.A_neg, self.varsigma)
            self._refresh_sigma()
        ad.record(accepted)

    def update_rho(self):
        ad = self.adapters["rho"]

        def target(r):
            r = float(r[0])
            if not -1.0 < r < 1.0:
                return -math.inf
            return mc.coefficient_log_prior(self.alpha, self.spec, r)

        r, accepted, _ = mh_update_block(np.array([self.rho]), target, ad.scale, self.rng)
        self.rho = float(r[0])
        ad.record(accepted)

    def sweep(self):
        fixed = self.fixed
        if "H" not in fixed:
            self.update_H()
        if "alpha" not in fixed:
            if self.centred:
                self.update_alpha_gibbs()
            else:
                self.update_alpha_rw()
        if "theta" not in fixed:
            if self.centred:
                self.update_theta_gibbs()
            else:
                self.update_theta_rw()
        if "beta" not in fixed:
            self.update_beta()
        if "shift" not in fixed:
            self.update_shift()
        if "sigma_H2" not in fixed:
            self.update_sigma_H2()
        if self.spec.two_level and "sigma_delta2" not in fixed:
            self.update_sigma_delta2()
        if "Sigma" not in fixed:
            self.update_Sigma()
        if self.variant == mc.OFFSET and "varsigma" not in fixed:
            self.update_varsigma()
        if self.rho is not None and "rho" not in fixed:
            self.update_rho()


def _draw_store(spec, n_sites, m):
    p = len(spec.coefficient_names)
    store = {
        "H": np.empty((m, n_sites)),
        "alpha0": np.empty(m),
        "alpha": np.empty((m, p)),
        "theta_minus": np.empty(m),
        "beta": np.empty((m, mc.N_METRICS)),
        "sigma_H2": np.empty(m),
        "Sigma": np.empty((m, mc.N_METRICS, mc.N_METRICS)),
    }
    variant = spec.covariance.variant
    if variant == mc.DIAGONAL:
        store["sigma_beta2"] = np.empty(m)
    if variant == mc.OFFSET:
        store["varsigma"] = np.empty(m)
    if spec.two_level:
        store["sigma_delta2"] = np.empty(m)
    if spec.correlated_pair is not None:
        store["rho"] = np.empty(m)
    return store


def run_chain(
    data: mc.LHFIData,
    spec: mc.ModelSpec,
    config: SamplerConfig,
    chain_id: int = 0,
    *,
    stream: int | None = None,
    init: mc.ParameterState | None = None,
    fixed: Iterable[str] = (),
    progress: Callable[[dict], None] | None = None,
    progress_every: int = 1000,
) -> ChainOutput:
    """Run one chain.

    The random stream is derived from ``(config.seed, stream)`` where
    ``stream`` defaults to ``chain_id``.  Blocks named in ``fixed`` are not
    updated, which makes single conditionals testable in isolation.
    """
    stream = chain_id if stream is None else stream
    rng = np.random.default_rng(np.random.SeedSequence([config.seed % 2**64, stream]))
    state = init.copy() if init is not None else initial_state(data, spec, rng, config.jitter)
    chain = _Chain(data, spec, config, rng, state, fixed)
    store = _draw_store(spec, data.n_sites, config.n_draws)
    dev = np.empty(config.n_draws)
    t = 0
    for it in range(1, config.n_iterations + 1):
        chain.sweep()
        if it <= config.burn_in:
            if it % config.adapt_window == 0:
                for ad in chain.adapters.values():
                    ad.adapt()
            if it == config.burn_in:
                for ad in chain.adapters.values():
                    ad.reset_counts()
        elif (it - config.burn_in) % config.thin == 0 and t < config.n_draws:
            _record(chain, store, t)
            dev[t] = -2.0 * float(chain.ll.sum())
            t += 1
        if progress is not None and it % progress_every == 0:
            progress(
                {
                    "chain": chain_id,
                    "iteration": it,
                    "acceptance": {k: a.rate() for k, a in chain.adapters.items()},
                }
            )
    if not np.all(np.isfinite(dev)):
        raise SamplerStateError(f"chain {chain_id} produced non-finite deviance")
    return ChainOutput(
        chain_id=chain_id,
        spec=spec,
        draws=store,
        deviance=dev,
        acceptance={k: a.rate() for k, a in chain.adapters.items()},
        scales={k: np.atleast_1d(a.scale).copy() for k, a in chain.adapters.items()},
    )


def _record(chain: _Chain, store, t):
    store["H"][t] = chain.H
    store["alpha0"][t] = chain.alpha0
    store["alpha"][t] = chain.alpha
    store["theta_minus"][t] = chain.theta
    store["beta"][t] = chain.beta
    store["sigma_H2"][t] = chain.sigma_H2
    store["Sigma"][t] = chain.Sigma
    for name in ("sigma_beta2", "varsigma", "sigma_delta2", "rho"):
        if name in store:
            store[name][t] = getattr(chain, name)


def _run_chain_job(args):
    data, spec, config, chain_id, stream = args
    return run_chain(data, spec, config, chain_id, stream=stream)


def run_chains(
    data: mc.LHFIData,
    spec: mc.ModelSpec,
    config: SamplerConfig,
    *,
    streams: Iterable[int] | None = None,
    progress: Callable[[dict], None] | None = None,
) -> list[ChainOutput]:
    """Run ``config.n_chains`` independent chains; results ordered by chain id."""
    streams = list(range(config.n_chains)) if streams is None else list(streams)
    if len(streams) != config.n_chains:
        raise InvalidArgumentError("need one stream per chain")
    jobs = [(data, spec, config, c, s) for c, s in enumerate(streams)]
    if config.n_jobs > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            return list(pool.map(_run_chain_job, jobs))
    return [run_chain(data, spec, config, c, stream=s, progress=progress) for _, _, _, c, s in jobs]
