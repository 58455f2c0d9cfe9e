"""Parameter-expanded variational Bayes EM for the robust MR model.

One iteration is an E-step (coordinate ascent over q(gamma_j), q(alpha_j),
then q(w)), a closed-form M-step for (beta0, sigma2, sigma0_2, zeta), and a
reduction step folding the expansion parameter ``zeta`` back into
(beta0, sigma2, q(gamma)). The reduction leaves the ELBO unchanged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import digamma, gammaln
from scipy.stats import chi2
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _sweep
from ._validation import check_dataset_ld
from .exceptions import DegenerateError, DomainError, NumericalError
from .model import LOG_2PI, HyperParams, ModelParams, _check_dims, marginal_loglik

logger = logging.getLogger(__name__)


@dataclass
class VariationalState:
    mu_gamma: np.ndarray
    s2_gamma: np.ndarray
    mu_alpha: np.ndarray
    s2_alpha: np.ndarray
    a_w_tilde: float
    b_w_tilde: float

    def __post_init__(self):
        for name in ("mu_gamma", "s2_gamma", "mu_alpha", "s2_alpha"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        if not (np.all(self.s2_gamma > 0) and np.all(self.s2_alpha > 0)):
            raise DomainError("variational variances must be strictly positive")
        if not (self.a_w_tilde > 0 and self.b_w_tilde > 0):
            raise DomainError("q(w) shape and rate must be positive")

    @property
    def expected_w(self) -> float:
        return self.a_w_tilde / self.b_w_tilde

    @property
    def expected_log_w(self) -> float:
        return float(digamma(self.a_w_tilde) - np.log(self.b_w_tilde))

    def copy(self) -> "VariationalState":
        return VariationalState(
            self.mu_gamma.copy(), self.s2_gamma.copy(), self.mu_alpha.copy(),
            self.s2_alpha.copy(), self.a_w_tilde, self.b_w_tilde,
        )


@dataclass(frozen=True)
class FitOptions:
    """Convergence controls.

    ``sigma0_2_fixed`` pins the direct-effect scale instead of estimating it.
    ``lrt`` selects how the likelihood-ratio statistic is formed: ``"marginal"``
    evaluates the exact observed-data likelihood at the two variational
    estimates, ``"elbo"`` uses the ELBO difference.
    """

    max_iter: int = 10000
    elbo_rel_tol: float = 1e-7
    seed: int = 0
    sigma0_2_fixed: float | None = None
    lrt: str = "marginal"

    def __post_init__(self):
        if self.max_iter < 1:
            raise DomainError("max_iter must be at least 1")
        if not self.elbo_rel_tol > 0:
            raise DomainError("elbo_rel_tol must be positive")
        if self.lrt not in ("marginal", "elbo"):
            raise DomainError(f"unknown lrt mode {self.lrt!r}")


@dataclass
class FitResult:
    beta0_hat: float
    se: float
    lrt: float
    pvalue: float
    params: ModelParams
    state: VariationalState
    elbo_trace: list[float]
    converged: bool
    null_elbo: float = float("nan")
    iterations: int = 0
    n_snps: int = 0
    se_infinite: bool = False
    null_params: ModelParams | None = None
    extra: dict = field(default_factory=dict)

    @property
    def elbo(self) -> float:
        return self.elbo_trace[-1]

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        from scipy.stats import norm

        z = norm.ppf(0.5 + level / 2)
        return self.beta0_hat - z * self.se, self.beta0_hat + z * self.se

    def to_dict(self) -> dict:
        lo, hi = self.ci()
        return {
            "method": "rbmr",
            "estimate": self.beta0_hat,
            "se": self.se,
            "ci_lower": lo,
            "ci_upper": hi,
            "lrt": self.lrt,
            "pvalue": self.pvalue,
            "n_snps": self.n_snps,
            "iterations": self.iterations,
            "converged": self.converged,
            "se_infinite": self.se_infinite,
            "elbo": self.elbo,
            "null_elbo": self.null_elbo,
            "params": {
                "beta0": self.params.beta0,
                "sigma2": self.params.sigma2,
                "sigma0_2": self.params.sigma0_2,
                "zeta": self.params.zeta,
            },
            "elbo_trace": list(self.elbo_trace),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    def tsv_row(self) -> dict:
        d = self.to_dict()
        return {k: d[k] for k in ("method", "estimate", "se", "ci_lower", "ci_upper", "pvalue", "lrt", "n_snps", "converged")}


class _Problem:
    """Per-dataset constants shared by the E-step, M-step and ELBO."""

    def __init__(self, data, ld):
        _check_dims(data, ld)
        self.data, self.ld = data, ld
        self.J = data.n_snps
        iy, ix = 1.0 / data.sigma_y, 1.0 / data.sigma_x
        a_blocks, b_blocks = [], []
        for sl, theta in zip(ld.slices(), ld.blocks):
            a_blocks.append(iy[sl, None] * theta * iy[None, sl])
            b_blocks.append(ix[sl, None] * theta * ix[None, sl])
        self.A = np.concatenate([b.ravel() for b in a_blocks])
        self.B = np.concatenate([b.ravel() for b in b_blocks])
        self.size = ld.sizes.astype(np.int64)
        self.off = ld.offsets.astype(np.int64)
        self.poff = np.concatenate([[0], np.cumsum(self.size**2)[:-1]]).astype(np.int64)
        self.blk = np.repeat(np.arange(ld.n_blocks, dtype=np.int64), self.size)
        theta_jj = ld.diagonal()
        self.Ajj = theta_jj * iy**2
        self.Bjj = theta_jj * ix**2
        self.gy = data.Gamma_hat * iy**2
        self.gx = data.gamma_hat * ix**2
        yhat, xhat = data.Gamma_hat * iy, data.gamma_hat * ix
        # terms of the Gaussian log-likelihoods that do not involve q or theta
        common = -0.5 * self.J * LOG_2PI - 0.5 * ld.logdet()
        self.const_y = common - np.log(data.sigma_y).sum() - 0.5 * yhat @ ld.solve(yhat)
        self.const_x = common - np.log(data.sigma_x).sum() - 0.5 * xhat @ ld.solve(xhat)
        self._buf = np.empty((3, self.J))

    def A_mv(self, v):
        out = np.empty(self.J)
        _sweep.block_matvec(self.A, self.poff, self.off, self.size, np.ascontiguousarray(v, dtype=float), out)
        return out

    def B_mv(self, v):
        out = np.empty(self.J)
        _sweep.block_matvec(self.B, self.poff, self.off, self.size, np.ascontiguousarray(v, dtype=float), out)
        return out


def _problem(data, ld, cache=None):
    if isinstance(cache, _Problem):
        return cache
    return _Problem(data, ld)


def e_step(state: VariationalState, params: ModelParams, data, ld, hyper: HyperParams, _prob=None) -> VariationalState:
    """Update q(gamma_j) for every SNP, then q(alpha_j), then q(w).

    Each coordinate uses the most recent values of the others. Returns a new
    state; the input is not modified.
    """
    prob = _problem(data, ld, _prob)
    new = state.copy()
    bad = _sweep.sweep(
        prob.A, prob.B, prob.poff, prob.off, prob.size, prob.blk,
        prob.gy, prob.gx, prob.Ajj, prob.Bjj,
        new.mu_gamma, new.s2_gamma, new.mu_alpha, new.s2_alpha,
        float(params.beta0), float(params.zeta), float(params.sigma2),
        float(state.expected_w), float(params.sigma0_2),
        prob._buf[0], prob._buf[1], prob._buf[2],
    )
    if bad >= 0:
        raise NumericalError("non-finite coordinate update in E-step", snp_index=int(bad))
    new.a_w_tilde = hyper.alpha_w + 0.5 * prob.J
    e_a2 = new.mu_alpha @ new.mu_alpha + new.s2_alpha.sum()
    new.b_w_tilde = hyper.beta_w + e_a2 / (2.0 * params.sigma0_2)
    if not np.isfinite(new.b_w_tilde):
        raise NumericalError("non-finite q(w) rate in E-step")
    return new


def m_step(
    state: VariationalState, data, ld, hyper: HyperParams, *, null: bool = False,
    sigma0_2_fixed: float | None = None, _prob=None,
) -> ModelParams:
    """Closed-form maximizers of the ELBO in (beta0, sigma2, sigma0_2, zeta).

    With ``null=True`` beta0 is held at zero.
    """
    prob = _problem(data, ld, _prob)
    mg, sg, ma, sa = state.mu_gamma, state.s2_gamma, state.mu_alpha, state.s2_alpha
    J = prob.J
    Amg = prob.A_mv(mg)
    den_b = mg @ Amg + prob.Ajj @ sg
    den_z = mg @ prob.B_mv(mg) + prob.Bjj @ sg
    if not (den_b > 0 and den_z > 0):
        raise DegenerateError("variational posterior of gamma is degenerate (zero mean and variance)")
    beta0 = 0.0 if null else float((prob.gy @ mg - ma @ Amg) / den_b)
    zeta = float(prob.gx @ mg / den_z)
    sigma2 = float((mg @ mg + sg.sum()) / J)
    if sigma0_2_fixed is not None:
        sigma0_2 = float(sigma0_2_fixed)
    else:
        sigma0_2 = float(state.a_w_tilde * (ma @ ma + sa.sum()) / (J * state.b_w_tilde))
    if not all(np.isfinite([beta0, zeta, sigma2, sigma0_2])) or sigma2 <= 0 or sigma0_2 <= 0:
        raise NumericalError("M-step produced invalid parameters")
    return ModelParams(beta0=beta0, sigma2=sigma2, sigma0_2=sigma0_2, zeta=zeta)


def reduction_step(state: VariationalState, params: ModelParams) -> tuple[VariationalState, ModelParams]:
    """Fold ``zeta`` into the exposure effects and reset it to one.

    gamma -> zeta * gamma, sigma2 -> zeta**2 * sigma2, beta0 -> beta0 / zeta.
    """
    z = params.zeta
    if not np.isfinite(z) or z == 0:
        raise DegenerateError(f"cannot reduce with zeta = {z}")
    new = state.copy()
    new.mu_gamma = z * state.mu_gamma
    new.s2_gamma = z * z * state.s2_gamma
    return new, ModelParams(beta0=params.beta0 / z, sigma2=z * z * params.sigma2, sigma0_2=params.sigma0_2, zeta=1.0)


def elbo(state: VariationalState, params: ModelParams, data, ld, hyper: HyperParams, _prob=None) -> float:
    """Evidence lower bound E_q[log p(data, gamma, alpha, w)] - E_q[log q]."""
    prob = _problem(data, ld, _prob)
    J = prob.J
    mg, sg, ma, sa = state.mu_gamma, state.s2_gamma, state.mu_alpha, state.s2_alpha
    b0, z = params.beta0, params.zeta
    Ew, Elogw = state.expected_w, state.expected_log_w

    mb = b0 * mg + ma
    vb = b0 * b0 * sg + sa
    out_y = prob.const_y - 0.5 * (-2.0 * prob.gy @ mb + mb @ prob.A_mv(mb) + prob.Ajj @ vb)
    out_x = prob.const_x - 0.5 * (-2.0 * z * prob.gx @ mg + z * z * (mg @ prob.B_mv(mg) + prob.Bjj @ sg))
    e_g2 = mg @ mg + sg.sum()
    e_a2 = ma @ ma + sa.sum()
    prior_g = -0.5 * J * (LOG_2PI + np.log(params.sigma2)) - 0.5 * e_g2 / params.sigma2
    prior_a = -0.5 * J * (LOG_2PI + np.log(params.sigma0_2)) + 0.5 * J * Elogw - 0.5 * Ew * e_a2 / params.sigma0_2
    aw, bw = hyper.alpha_w, hyper.beta_w
    prior_w = aw * np.log(bw) - gammaln(aw) + (aw - 1.0) * Elogw - bw * Ew
    at, bt = state.a_w_tilde, state.b_w_tilde
    entropy = (
        0.5 * (np.log(sg).sum() + np.log(sa).sum()) + J * (LOG_2PI + 1.0)
        + at - np.log(bt) + gammaln(at) + (1.0 - at) * digamma(at)
    )
    total = out_y + out_x + prior_g + prior_a + prior_w + entropy
    if not np.isfinite(total):
        raise NumericalError("ELBO is not finite")
    return float(total)


def initialize(data, ld, hyper: HyperParams, opts: FitOptions | None = None, null: bool = False):
    """Deterministic data-driven starting point.

    Means of gamma start at the observed exposure effects, alpha at zero, all
    variational variances at one; beta0 starts from the LD-free weighted
    regression of outcome on exposure effects.
    """
    J = data.n_snps
    g = data.gamma_hat
    w = 1.0 / data.sigma_y**2
    sigma2 = float(np.var(g)) if J > 1 else 0.0
    if not sigma2 > 0:
        sigma2 = float(np.mean(g**2) + np.mean(data.sigma_x**2))
    beta0 = 0.0 if null else float((w * data.Gamma_hat * g).sum() / (w * g * g).sum())
    sigma0_2 = 1e-2
    if opts is not None and opts.sigma0_2_fixed is not None:
        sigma0_2 = float(opts.sigma0_2_fixed)
    params = ModelParams(beta0=beta0, sigma2=sigma2, sigma0_2=sigma0_2, zeta=1.0)
    a_t = hyper.alpha_w + 0.5 * J
    state = VariationalState(
        mu_gamma=g.copy(),
        s2_gamma=np.ones(J),
        mu_alpha=np.zeros(J),
        s2_alpha=np.ones(J),
        a_w_tilde=a_t,
        b_w_tilde=hyper.beta_w + J / (2.0 * sigma0_2),
    )
    return state, params


def fit(data, ld, hyper: HyperParams | None = None, opts: FitOptions | None = None, constrain_null: bool = False) -> FitResult:
    """Run PX-VBEM to convergence for one hypothesis.

    Returns a :class:`FitResult` whose inference fields (se, lrt, pvalue) are
    NaN; :func:`fit_with_inference` fills them in.
    """
    hyper = hyper or HyperParams()
    opts = opts or FitOptions()
    prob = _Problem(data, ld)
    state, params = initialize(data, ld, hyper, opts, null=constrain_null)
    trace = [elbo(state, params, data, ld, hyper, prob)]
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        state = e_step(state, params, data, ld, hyper, prob)
        params = m_step(state, data, ld, hyper, null=constrain_null, sigma0_2_fixed=opts.sigma0_2_fixed, _prob=prob)
        state, params = reduction_step(state, params)
        trace.append(elbo(state, params, data, ld, hyper, prob))
        if abs(trace[-1] - trace[-2]) < opts.elbo_rel_tol * abs(trace[-2]):
            converged = True
            break
    if not converged:
        logger.warning("PX-VBEM did not converge in %d iterations", opts.max_iter)
    nan = float("nan")
    return FitResult(
        beta0_hat=params.beta0, se=nan, lrt=nan, pvalue=nan, params=params, state=state,
        elbo_trace=trace, converged=converged, iterations=it, n_snps=data.n_snps,
    )


def lrt_standard_error(beta0_hat: float, lrt: float) -> float:
    """Standard error implied by a one-degree-of-freedom likelihood-ratio statistic."""
    if not lrt > 0:
        raise DomainError(f"LRT statistic must be positive, got {lrt}")
    return float(abs(beta0_hat) / np.sqrt(lrt))


def fit_with_inference(data, ld, hyper: HyperParams | None = None, opts: FitOptions | None = None) -> FitResult:
    """Fit the alternative and the null (beta0 = 0) and calibrate the LRT.

    The statistic is twice the log-likelihood difference between the two
    fits, clipped at zero; the standard error is ``|beta0| / sqrt(lrt)`` and
    the p-value is the chi-square(1) upper tail.
    """
    hyper = hyper or HyperParams()
    opts = opts or FitOptions()
    alt = fit(data, ld, hyper, opts)
    null = fit(data, ld, hyper, opts, constrain_null=True)
    if opts.lrt == "marginal":
        ll_alt = marginal_loglik(data, ld, alt.params, hyper)
        ll_null = marginal_loglik(data, ld, null.params, hyper)
        alt.extra.update(marginal_loglik=ll_alt, null_marginal_loglik=ll_null)
    else:
        ll_alt, ll_null = alt.elbo, null.elbo
    stat = max(2.0 * (ll_alt - ll_null), 0.0)
    alt.lrt = float(stat)
    alt.pvalue = float(chi2.sf(stat, 1))
    alt.null_elbo = null.elbo
    alt.null_params = null.params
    alt.converged = alt.converged and null.converged
    if stat > 0:
        alt.se = lrt_standard_error(alt.beta0_hat, stat)
    else:
        alt.se = float("inf") if alt.beta0_hat != 0 else float("nan")
        alt.se_infinite = alt.beta0_hat != 0
    return alt


class RBMREstimator(BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_with_inference`.

    ``fit`` takes a harmonized dataset and its LD operator rather than a
    design matrix; ``predict`` maps exposure effects to implied outcome
    effects through the fitted causal effect.

    Parameters
    ----------
    alpha_w, beta_w : float
        Gamma shape and rate of the direct-effect scale mixture.
    tol : float
        Relative ELBO change that stops the iterations.
    max_iter : int
    lrt : {"marginal", "elbo"}
    sigma0_2_fixed : float, optional
    """

    def __init__(self, alpha_w=2.0, beta_w=2.0, tol=1e-7, max_iter=10000, lrt="marginal", sigma0_2_fixed=None):
        self.alpha_w = alpha_w
        self.beta_w = beta_w
        self.tol = tol
        self.max_iter = max_iter
        self.lrt = lrt
        self.sigma0_2_fixed = sigma0_2_fixed

    def fit(self, X, ld, y=None):
        check_dataset_ld(X, ld)
        hyper = HyperParams(self.alpha_w, self.beta_w)
        opts = FitOptions(max_iter=self.max_iter, elbo_rel_tol=self.tol, sigma0_2_fixed=self.sigma0_2_fixed, lrt=self.lrt)
        self.result_ = fit_with_inference(X, ld, hyper, opts)
        self.coef_ = self.result_.beta0_hat
        self.se_ = self.result_.se
        self.pvalue_ = self.result_.pvalue
        self.n_features_in_ = X.n_snps
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        gx = getattr(X, "gamma_hat", X)
        return self.coef_ * np.asarray(gx, dtype=float)
