"""Likelihood-ratio tests for nested ordered logit fits."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

_EPS = 1e-16
_FPMIN = 1e-300
_MAX_TERMS = 100_000


def _log_prefactor(a, x):
    return -x + a * math.log(x) - math.lgamma(a)


def _lower_series(a, x):
    """Regularized lower incomplete gamma ``P(a, x)`` by its power series."""
    term = total = 1.0 / a
    ap = a
    for _ in range(_MAX_TERMS):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(_log_prefactor(a, x))


def _upper_continued_fraction(a, x):
    """Regularized upper incomplete gamma ``Q(a, x)`` by modified Lentz."""
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_TERMS):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(_log_prefactor(a, x)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function ``Q(a, x)``."""
    if a <= 0:
        raise ValueError(f"shape must be positive, got {a}")
    if x < 0:
        raise ValueError(f"x must be non-negative, got {x}")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _lower_series(a, x)
    return _upper_continued_fraction(a, x)


def chi_square_sf(x: float, df: int) -> float:
    """Upper tail ``P(chi2_df > x)``."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if x < 0:
        raise ValueError(f"x must be non-negative, got {x}")
    return gamma_q(df / 2.0, x / 2.0)


def lr_statistic(ll_restricted: float, ll_full: float) -> float:
    """``-2 (ll_restricted - ll_full)``; negative values are returned as-is
    with a warning, since they mean the models are not nested or a fit did
    not converge."""
    if not (math.isfinite(ll_restricted) and math.isfinite(ll_full)):
        raise ValueError("log-likelihoods must be finite")
    lr = -2.0 * (ll_restricted - ll_full)
    if lr < 0:
        warnings.warn(f"negative LR statistic {lr:.6g}: check nesting and convergence",
                      RuntimeWarning, stacklevel=2)
    return lr


@dataclass(frozen=True)
class LrTestResult:
    lr: float
    df: int
    p_value: float
    alpha: float | None = 0.05
    reject: bool = False
    ll_restricted: float = math.nan
    ll_full: float = math.nan
    warning: str | None = None

    @property
    def reject_at(self) -> float | None:
        return self.alpha if self.reject else None

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "df": self.df,
            "p_value": self.p_value,
            "alpha": self.alpha,
            "reject": self.reject,
            "ll_restricted": self.ll_restricted,
            "ll_full": self.ll_full,
            "warning": self.warning,
        }


def likelihood_ratio(ll_restricted: float, ll_full: float, df: int,
                     alpha: float | None = 0.05) -> LrTestResult:
    """LR test from raw log-likelihoods and a parameter-count difference."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        lr = lr_statistic(ll_restricted, ll_full)
    note = None
    if lr < 0:
        note = str(caught[0].message) if caught else "negative LR statistic"
        warnings.warn(note, RuntimeWarning, stacklevel=2)
        p = 1.0
    else:
        p = chi_square_sf(lr, df)
    reject = bool(alpha is not None and lr >= 0 and p < alpha)
    return LrTestResult(lr=lr, df=int(df), p_value=p, alpha=alpha, reject=reject,
                        ll_restricted=ll_restricted, ll_full=ll_full, warning=note)


def lr_test(restricted, full, alpha: float | None = 0.05) -> LrTestResult:
    """Compare two fitted models (``OrderedLogitFit`` instances).

    The restricted model's covariates must be a proper subset of the full
    model's, both fits must use the same observations and outcome levels,
    and ``df`` is the difference in parameter counts.
    """
    if restricted.n != full.n:
        raise ValueError(f"models fitted on different samples (n={restricted.n} vs n={full.n})")
    if restricted.K != full.K:
        raise ValueError(f"models have different outcome levels (K={restricted.K} vs K={full.K})")
    r_names, f_names = set(restricted.feature_names), set(full.feature_names)
    if not r_names < f_names:
        extra = sorted(r_names - f_names)
        raise ValueError(
            "restricted model is not nested in the full model"
            + (f" (covariates {extra} absent from full model)" if extra else " (same covariates)")
        )
    df = full.n_params - restricted.n_params
    return likelihood_ratio(restricted.ll_model, full.ll_model, df, alpha)
