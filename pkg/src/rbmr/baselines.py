"""Inverse-variance weighted and MR-Egger estimators on pruned instruments."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_summary_arrays
from .exceptions import DegenerateError, EmptyInputError


@dataclass
class BaselineResult:
    method: str
    beta_hat: float
    se: float
    pvalue: float
    n_snps: int
    intercept: float = float("nan")
    intercept_se: float = float("nan")

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        z = norm.ppf(0.5 + level / 2)
        return self.beta_hat - z * self.se, self.beta_hat + z * self.se

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimate"] = d.pop("beta_hat")
        d["ci_lower"], d["ci_upper"] = self.ci()
        return d


def _wald_p(est, se):
    return float(2.0 * norm.sf(abs(est / se)))


def ivw(pruned) -> BaselineResult:
    """First-order IVW: weighted mean of per-SNP Wald ratios.

    Weights are ``gamma_hat**2 / sigma_y**2``; the standard error is
    ``sum(weights) ** -0.5``.
    """
    gx, _, gy, sy = check_summary_arrays(pruned)
    zero = np.flatnonzero(gx == 0)
    if zero.size:
        raise DegenerateError(f"exposure effect is zero for SNP {pruned.snp_ids[zero[0]]}")
    ratio = gy / gx
    w = gx**2 / sy**2
    est = float((w * ratio).sum() / w.sum())
    se = float(w.sum() ** -0.5)
    return BaselineResult("ivw", est, se, _wald_p(est, se), gx.size)


def mr_egger(pruned) -> BaselineResult:
    """Weighted regression of outcome on exposure effects with an intercept.

    Weights are ``1 / sigma_y**2``; standard errors come from the unscaled
    inverse of the weighted normal-equation matrix.
    """
    gx, _, gy, sy = check_summary_arrays(pruned)
    if gx.size < 3:
        raise EmptyInputError(f"MR-Egger needs at least 3 SNPs, got {gx.size}")
    w = 1.0 / sy**2
    X = np.column_stack([np.ones_like(gx), gx])
    XtWX = X.T @ (w[:, None] * X)
    if np.ptp(gx) == 0 or np.linalg.cond(XtWX) > 1e14:
        raise DegenerateError("MR-Egger design is singular (exposure effects all equal)")
    cov = np.linalg.inv(XtWX)
    coef = cov @ (X.T @ (w * gy))
    se = np.sqrt(np.diag(cov))
    return BaselineResult(
        "egger", float(coef[1]), float(se[1]), _wald_p(coef[1], se[1]), gx.size,
        intercept=float(coef[0]), intercept_se=float(se[0]),
    )


class _SummaryRegressor(RegressorMixin, BaseEstimator):
    _method = None

    def fit(self, X, y=None):
        """Fit on a HarmonizedDataset (``y`` is ignored)."""
        self.result_ = type(self)._method(X)
        self.coef_ = self.result_.beta_hat
        self.se_ = self.result_.se
        self.pvalue_ = self.result_.pvalue
        return self

    def predict(self, X):
        """Predicted outcome effects for exposure effects ``X``."""
        check_is_fitted(self, "result_")
        gx = getattr(X, "gamma_hat", X)
        return self.intercept_ + self.coef_ * np.asarray(gx, dtype=float)


class IVWRegressor(_SummaryRegressor):
    """IVW estimator with a scikit-learn interface."""

    _method = staticmethod(ivw)
    intercept_ = 0.0


class MREggerRegressor(_SummaryRegressor):
    """MR-Egger estimator with a scikit-learn interface."""

    _method = staticmethod(mr_egger)

    def fit(self, X, y=None):
        super().fit(X, y)
        self.intercept_ = self.result_.intercept
        return self
