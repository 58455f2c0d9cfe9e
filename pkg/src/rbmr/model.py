"""Probabilistic model: generalized-t direct effects, LD-aware likelihoods.

The direct effects follow a multivariate generalized t with scale matrix
``sigma0_2 * I``, written as a Gaussian scale mixture whose precision weight
``w`` is Gamma(alpha_w, beta_w) distributed (shape/rate).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate, linalg, optimize
from scipy.special import gammaln, logsumexp

from .exceptions import DomainError, NumericalError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ModelParams:
    beta0: float
    sigma2: float
    sigma0_2: float
    zeta: float = 1.0

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise DomainError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.sigma0_2 > 0:
            raise DomainError(f"sigma0_2 must be positive, got {self.sigma0_2}")

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class HyperParams:
    """Gamma shape ``alpha_w`` and rate ``beta_w`` of the mixing weight.

    ``alpha_w == beta_w == nu / 2`` gives a multivariate t with ``nu`` degrees
    of freedom; the defaults correspond to ``nu = 4``.
    """

    alpha_w: float = 2.0
    beta_w: float = 2.0

    def __post_init__(self):
        if not (self.alpha_w > 0 and self.beta_w > 0):
            raise DomainError("alpha_w and beta_w must be positive")

    @classmethod
    def student_t(cls, nu: float) -> "HyperParams":
        return cls(nu / 2.0, nu / 2.0)


@dataclass(frozen=True)
class LatentState:
    gamma: np.ndarray
    alpha: np.ndarray
    w: float

    def __post_init__(self):
        if not self.w > 0:
            raise DomainError("latent weight w must be positive")


def generalized_t_logpdf(alpha_vec, sigma0_2: float, hyper: HyperParams) -> float:
    """Log density of the generalized t with scale matrix ``sigma0_2 * I``.

    Evaluated in closed form with log-Gamma, so large dimensions do not
    overflow.
    """
    if not sigma0_2 > 0:
        raise DomainError(f"sigma0_2 must be positive, got {sigma0_2}")
    a = np.atleast_1d(np.asarray(alpha_vec, dtype=float))
    J = a.size
    aw, bw = hyper.alpha_w, hyper.beta_w
    maha = a @ a / sigma0_2
    return float(
        gammaln(aw + J / 2)
        - gammaln(aw)
        - 0.5 * J * np.log(sigma0_2)
        - 0.5 * J * np.log(2 * np.pi * bw)
        - (aw + J / 2) * np.log1p(maha / (2 * bw))
    )


def gamma_logpdf(w: float, hyper: HyperParams) -> float:
    """Log density of Gamma(shape=alpha_w, rate=beta_w) at ``w``."""
    if not w > 0:
        raise DomainError(f"w must be positive, got {w}")
    aw, bw = hyper.alpha_w, hyper.beta_w
    return float(aw * np.log(bw) - gammaln(aw) + (aw - 1) * np.log(w) - bw * w)


def _check_dims(data, ld):
    if ld.n_snps != data.n_snps:
        raise ValueError(f"LD matrix covers {ld.n_snps} SNPs but dataset has {data.n_snps}")
    if not np.array_equal(ld.sizes, data.block_sizes()):
        raise ValueError("LD block sizes do not match the dataset block structure")


def _gaussian_sandwich_loglik(obs, mean_scaled, se, ld) -> float:
    """log N(obs | se * Theta * mean_scaled, se * Theta * se) for diagonal ``se``.

    ``mean_scaled`` is ``se^{-1} * latent``; the covariance determinant and
    quadratic form come from the cached LD Cholesky factors.
    """
    J = obs.size
    resid = obs / se - ld.matvec(mean_scaled)
    quad = resid @ ld.solve(resid)
    return float(-0.5 * J * LOG_2PI - np.log(se).sum() - 0.5 * ld.logdet() - 0.5 * quad)


def complete_data_loglik(data, ld, latent: LatentState, params: ModelParams, hyper: HyperParams) -> float:
    """Joint log density of summary statistics and latent variables.

    Sum of the outcome likelihood, the (expanded) exposure likelihood, the
    Gaussian prior on the exposure effects, the scale-mixture prior on the
    direct effects given ``w`` and the Gamma density of ``w``.
    """
    _check_dims(data, ld)
    g = np.asarray(latent.gamma, dtype=float)
    a = np.asarray(latent.alpha, dtype=float)
    J = data.n_snps
    b = params.beta0 * g + a
    out = _gaussian_sandwich_loglik(data.Gamma_hat, b / data.sigma_y, data.sigma_y, ld)
    out += _gaussian_sandwich_loglik(data.gamma_hat, params.zeta * g / data.sigma_x, data.sigma_x, ld)
    out += -0.5 * J * (LOG_2PI + np.log(params.sigma2)) - 0.5 * (g @ g) / params.sigma2
    s2a = params.sigma0_2 / latent.w
    out += -0.5 * J * (LOG_2PI + np.log(s2a)) - 0.5 * (a @ a) / s2a
    out += gamma_logpdf(latent.w, hyper)
    if not np.isfinite(out):
        raise NumericalError("complete-data log-likelihood is not finite")
    return float(out)


class _MarginalSpectrum:
    """Spectral form of the observed-data covariance as a function of ``w``.

    Conditional on ``w`` the stacked vector (gamma_hat, Gamma_hat) is Gaussian
    with covariance ``P + (sigma0_2 / w) K``. A generalized eigendecomposition
    of ``(K, P)`` per block turns every log-density evaluation into O(J) work.
    """

    def __init__(self, data, ld, params: ModelParams):
        _check_dims(data, ld)
        logdet, lams, coefs = 0.0, [], []
        b0, s2, z = params.beta0, params.sigma2, params.zeta
        for sl, theta in zip(ld.slices(), ld.blocks):
            sx, sy = data.sigma_x[sl], data.sigma_y[sl]
            Mx = sx[:, None] * theta / sx[None, :]
            My = sy[:, None] * theta / sy[None, :]
            Cx = sx[:, None] * theta * sx[None, :]
            Cy = sy[:, None] * theta * sy[None, :]
            MyMy = My @ My.T
            P = np.block(
                [
                    [z * z * s2 * (Mx @ Mx.T) + Cx, z * b0 * s2 * (Mx @ My.T)],
                    [z * b0 * s2 * (My @ Mx.T), b0 * b0 * s2 * MyMy + Cy],
                ]
            )
            P = 0.5 * (P + P.T)
            m = theta.shape[0]
            K = np.zeros_like(P)
            K[m:, m:] = 0.5 * (MyMy + MyMy.T)
            try:
                lam, V = linalg.eigh(K, P)
                logdet += 2.0 * np.log(np.diag(linalg.cholesky(P, lower=True))).sum()
            except linalg.LinAlgError:
                raise NumericalError("observed-data covariance is not positive definite") from None
            obs = np.concatenate([data.gamma_hat[sl], data.Gamma_hat[sl]])
            lams.append(np.clip(lam, 0.0, None))
            coefs.append(V.T @ obs)
        self.logdet_P = logdet
        self.lam = np.concatenate(lams)
        self.c2 = np.concatenate(coefs) ** 2
        self.dim = self.lam.size
        self.sigma0_2 = params.sigma0_2

    def log_density(self, w):
        """log N(observed | 0, C(w)) for an array of weights."""
        w = np.atleast_1d(np.asarray(w, dtype=float))
        s = self.sigma0_2 / w
        d = 1.0 + s[:, None] * self.lam[None, :]
        return -0.5 * (self.dim * LOG_2PI + self.logdet_P + np.log(d).sum(axis=1) + (self.c2 / d).sum(axis=1))


def marginal_loglik(data, ld, params: ModelParams, hyper: HyperParams) -> float:
    """Observed-data log-likelihood with gamma, alpha and w integrated out.

    The Gaussian latents are integrated analytically; the remaining
    one-dimensional integral over ``log w`` is done by adaptive quadrature
    around its mode.
    """
    spec = _MarginalSpectrum(data, ld, params)
    aw, bw = hyper.alpha_w, hyper.beta_w
    log_gamma_norm = aw * np.log(bw) - gammaln(aw)

    def g(u):
        # integrand on log scale: density(w) * Gamma(w) * |dw/du|
        u = np.atleast_1d(u)
        w = np.exp(u)
        return spec.log_density(w) + log_gamma_norm + aw * u - bw * w

    # Bracket the mode on a coarse grid, then refine.
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        grid = np.linspace(-40.0, 15.0, 1101) + np.log(aw / bw)
        vals = g(grid)
        i = int(np.nanargmax(vals))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        res = optimize.minimize_scalar(lambda u: -g(u)[0], bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        u_star = float(res.x)
        g_star = float(g(u_star)[0])
        if not np.isfinite(g_star):
            raise NumericalError("marginal likelihood integrand is not finite")

        # finite limits where the integrand has dropped below exp(-60)
        def edge(sign):
            step = 1.0
            u = u_star + sign * step
            while g(u)[0] - g_star > -60.0 and step < 1e4:
                step *= 2.0
                u = u_star + sign * step
            return u

        lower, upper = edge(-1.0), edge(1.0)

        def f(u):
            return float(np.exp(g(u)[0] - g_star))

        left, _ = integrate.quad(f, lower, u_star, epsabs=0.0, epsrel=1e-12, limit=400)
        right, _ = integrate.quad(f, u_star, upper, epsabs=0.0, epsrel=1e-12, limit=400)
    total = left + right
    if not total > 0:
        # quadrature failed to see any mass; fall back to the grid sum
        return float(logsumexp(vals[np.isfinite(vals)]) + np.log(grid[1] - grid[0]))
    return float(g_star + np.log(total))
