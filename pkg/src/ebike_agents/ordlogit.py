"""Proportional-odds ordered logit model fitted by damped Newton iteration.

The model is ``logit P(Y <= j | x) = theta_j - x @ beta`` for categories
``j = 1..K``. Parameter vectors are laid out as ``[theta_1..theta_{K-1},
beta_1..beta_p]`` everywhere in this module.

Newton steps are taken on an unconstrained parameterization
``phi = (theta_1, log(theta_2 - theta_1), ..., beta)`` so the thresholds
stay strictly increasing at every iterate; results and the covariance are
mapped back to the threshold scale with the delta method.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import IdentifiabilityError

# separation heuristic: a large coefficient whose standard error dwarfs it
SEPARATION_ESTIMATE = 10.0
SEPARATION_SE_RATIO = 5.0
# eigenvalues of the information below this fraction of the largest are
# treated as zero when inverting
SINGULAR_RTOL = 1e-12
MAX_STEP = 10.0


def _log_cdf(x):
    return -np.logaddexp(0.0, -x)


def _log_sf(x):
    return -np.logaddexp(0.0, x)


def _expit(x):
    return np.exp(_log_cdf(x))


def _pdf(x):
    return np.exp(_log_cdf(x) + _log_sf(x))


def _check_thresholds(theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size < 1:
        raise ValueError("theta must be a non-empty 1-d array")
    if not np.all(np.isfinite(theta)) or np.any(np.diff(theta) <= 0):
        raise ValueError(f"thresholds must be finite and strictly increasing, got {theta}")
    return theta


def cumulative_probs(theta, beta, x_row):
    """Category probabilities ``P(Y = j)`` for ``j = 1..K``.

    ``x_row`` may be a single row (returns shape ``(K,)``) or a matrix of
    rows (returns ``(n, K)``).
    """
    theta = _check_thresholds(theta)
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    x = np.asarray(x_row, dtype=np.float64)
    single = x.ndim <= 1
    if single:
        x = x.reshape(1, -1)
    if x.shape[1] != beta.size:
        raise ValueError(f"x has {x.shape[1]} columns but beta has {beta.size} entries")
    eta = x @ beta
    a = theta[None, :] - eta[:, None]  # (n, K-1)
    probs = np.empty((x.shape[0], theta.size + 1))
    probs[:, 0] = _expit(a[:, 0])
    probs[:, -1] = _expit(-a[:, -1])
    if theta.size > 1:
        upper, lower = a[:, 1:], a[:, :-1]
        probs[:, 1:-1] = np.exp(_log_cdf(upper) + _log_sf(lower) + np.log(-np.expm1(lower - upper)))
    return probs[0] if single else probs


@dataclass(frozen=True)
class ModelData:
    """Design matrix ``x`` (n, p) and ordinal outcomes ``y`` in ``1..K``."""

    x: np.ndarray
    y: np.ndarray
    K: int
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else np.zeros((0, 0))
        y = np.asarray(self.y)
        if y.ndim != 1:
            raise ValueError("y must be 1-d")
        if x.shape[0] != y.shape[0]:
            if x.size == 0:
                x = np.zeros((y.shape[0], 0))
            else:
                raise ValueError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("x contains missing or infinite entries")
        if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("y must hold integer category indices")
        y = y.astype(np.int64)
        K = int(self.K)
        if K < 2:
            raise IdentifiabilityError(f"need at least 2 outcome categories, got K={K}")
        if y.size and (y.min() < 1 or y.max() > K):
            raise ValueError(f"y values must lie in 1..{K}")
        counts = np.bincount(y, minlength=K + 1)[1:]
        empty = [j + 1 for j in range(K) if counts[j] == 0]
        if empty:
            raise IdentifiabilityError(
                f"categories {empty} have no observations; thresholds are not identifiable"
            )
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise ValueError(f"{len(names)} feature names for {x.shape[1]} columns")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_params(self) -> int:
        return self.p + self.K - 1

    def counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.K + 1)[1:]


def _split(params, data: ModelData):
    if isinstance(params, tuple) and len(params) == 2:
        theta = np.asarray(params[0], dtype=np.float64).ravel()
        beta = np.asarray(params[1], dtype=np.float64).ravel()
    else:
        flat = np.asarray(params, dtype=np.float64).ravel()
        theta, beta = flat[: data.K - 1], flat[data.K - 1 :]
    if theta.size != data.K - 1 or beta.size != data.p:
        raise ValueError(
            f"expected {data.K - 1} thresholds and {data.p} coefficients, "
            f"got {theta.size} and {beta.size}"
        )
    return theta, beta


def _terms(theta, beta, data: ModelData, order: int):
    """Per-observation log-probabilities and derivatives w.r.t. the two
    linear predictors ``a = theta_y - x@beta`` and ``b = theta_{y-1} - x@beta``.
    """
    K = data.K
    y0 = data.y - 1
    eta = data.x @ beta
    has_a = y0 < K - 1
    has_b = y0 > 0
    ia = np.minimum(y0, K - 2)
    ib = np.maximum(y0 - 1, 0)
    a = theta[ia] - eta
    b = theta[ib] - eta

    n = data.n
    logp = np.empty(n)
    da = np.zeros(n)
    db = np.zeros(n)
    haa = np.zeros(n)
    hbb = np.zeros(n)
    hab = np.zeros(n)

    lo = has_a & ~has_b
    hi = has_b & ~has_a
    mid = has_a & has_b
    logp[lo] = _log_cdf(a[lo])
    logp[hi] = _log_sf(b[hi])
    with np.errstate(divide="ignore", invalid="ignore"):
        d = a[mid] - b[mid]
        e = np.exp(-d)
        om = -np.expm1(-d)
        logp[mid] = _log_cdf(a[mid]) + _log_sf(b[mid]) + np.log(om)
    if order >= 1:
        da[lo] = _expit(-a[lo])
        db[hi] = -_expit(b[hi])
        with np.errstate(divide="ignore", invalid="ignore"):
            r = e / om
            da[mid] = _expit(-a[mid]) + r
            db[mid] = -_expit(b[mid]) - r
    if order >= 2:
        haa[lo] = -_pdf(a[lo])
        hbb[hi] = -_pdf(b[hi])
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = -e / om**2
            haa[mid] = -_pdf(a[mid]) + gp
            hbb[mid] = -_pdf(b[mid]) + gp
            hab[mid] = -gp
    return dict(logp=logp, da=da, db=db, haa=haa, hbb=hbb, hab=hab,
                ia=ia, ib=ib, has_a=has_a, has_b=has_b)


def neg_log_likelihood(params, data: ModelData) -> float:
    """``-sum_i log P(Y = y_i | x_i)``; ``+inf`` when a probability vanishes."""
    theta, beta = _split(params, data)
    if not np.all(np.isfinite(theta)) or np.any(np.diff(theta) <= 0):
        return math.inf
    t = _terms(theta, beta, data, order=0)
    total = -float(np.sum(t["logp"]))
    return total if math.isfinite(total) else math.inf


def gradient(params, data: ModelData) -> np.ndarray:
    """Analytic gradient of :func:`neg_log_likelihood` (thresholds first)."""
    theta, beta = _split(params, data)
    t = _terms(theta, beta, data, order=1)
    m = data.K - 1
    g_theta = -(
        np.bincount(t["ia"][t["has_a"]], weights=t["da"][t["has_a"]], minlength=m)
        + np.bincount(t["ib"][t["has_b"]], weights=t["db"][t["has_b"]], minlength=m)
    )
    g_beta = data.x.T @ (t["da"] + t["db"])
    return np.concatenate([g_theta, g_beta])


def hessian(params, data: ModelData) -> np.ndarray:
    """Analytic Hessian of :func:`neg_log_likelihood` (observed information)."""
    theta, beta = _split(params, data)
    t = _terms(theta, beta, data, order=2)
    n, m = data.n, data.K - 1
    A = np.zeros((n, m))
    B = np.zeros((n, m))
    rows = np.arange(n)
    A[rows[t["has_a"]], t["ia"][t["has_a"]]] = 1.0
    B[rows[t["has_b"]], t["ib"][t["has_b"]]] = 1.0
    haa, hbb, hab = t["haa"], t["hbb"], t["hab"]
    X = data.x
    h_tt = (A.T * haa) @ A + (B.T * hbb) @ B + (A.T * hab) @ B + (B.T * hab) @ A
    h_tb = -((A.T * (haa + hab)) @ X) - ((B.T * (hbb + hab)) @ X)
    h_bb = (X.T * (haa + hbb + 2.0 * hab)) @ X
    H = np.block([[h_tt, h_tb], [h_tb.T, h_bb]])
    return -H


def null_thresholds(counts) -> np.ndarray:
    """Closed-form thresholds of the thresholds-only model."""
    counts = np.asarray(counts, dtype=np.float64)
    cum = np.cumsum(counts)[:-1] / counts.sum()
    return np.log(cum) - np.log1p(-cum)


def null_log_likelihood(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    nz = counts[counts > 0]
    return float(np.sum(nz * np.log(nz / n)))


# -- reparameterization -----------------------------------------------------

def _to_phi(theta, beta):
    return np.concatenate([theta[:1], np.log(np.diff(theta)), beta])


def _from_phi(phi, m):
    head = phi[:m]
    theta = np.cumsum(np.concatenate([head[:1], np.exp(head[1:])]))
    return theta, phi[m:]


def _theta_jacobian(phi, m):
    J = np.zeros((m, m))
    J[:, 0] = 1.0
    for k in range(1, m):
        J[k:, k] = math.exp(phi[k])
    return J


def _phi_derivatives(phi, data: ModelData):
    m = data.K - 1
    theta, beta = _from_phi(phi, m)
    g = gradient((theta, beta), data)
    H = hessian((theta, beta), data)
    J = _theta_jacobian(phi, m)
    g_theta = g[:m]
    g_phi = np.concatenate([J.T @ g_theta, g[m:]])
    H_phi = H.copy()
    H_phi[:m, :m] = J.T @ H[:m, :m] @ J
    H_phi[:m, m:] = J.T @ H[:m, m:]
    H_phi[m:, :m] = H_phi[:m, m:].T
    # curvature of theta_j = theta_1 + sum_k exp(phi_k)
    for k in range(1, m):
        H_phi[k, k] += math.exp(phi[k]) * g_theta[k:].sum()
    return g, g_phi, H_phi, J


def _newton_direction(H, g):
    w, V = np.linalg.eigh(H)
    scale = np.abs(w).max() if w.size else 0.0
    if scale == 0.0:
        return -g
    keep = np.abs(w) > SINGULAR_RTOL * scale
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / np.abs(w[keep])
    step = -(V @ (inv * (V.T @ g)))
    biggest = np.abs(step).max()
    if biggest > MAX_STEP:
        step *= MAX_STEP / biggest
    return step


# -- results -----------------------------------------------------------------

def wald_p_value(estimate: float, se: float) -> float:
    """Two-sided normal tail probability of ``estimate / se``."""
    if not (se > 0 and math.isfinite(se)):
        return math.nan
    return math.erfc(abs(estimate / se) / math.sqrt(2.0))


def pseudo_r2(ll_null: float, ll_model: float) -> float:
    """McFadden's ``1 - ll_model / ll_null``."""
    if ll_null == 0:
        raise ValueError("ll_null is zero; pseudo R^2 undefined")
    return 1.0 - ll_model / ll_null


def information_criteria(k: int, n: int, ll: float) -> tuple[float, float]:
    """``(AIC, BIC)`` for ``k`` parameters and ``n`` observations."""
    if k < 0 or n < 1:
        raise ValueError(f"need k >= 0 and n >= 1, got k={k}, n={n}")
    return 2.0 * k - 2.0 * ll, k * math.log(n) - 2.0 * ll


@dataclass
class OrderedLogitFit:
    theta: np.ndarray
    beta: np.ndarray
    ll_model: float
    ll_null: float
    cov: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p_values: np.ndarray
    converged: bool
    iterations: int
    n: int
    K: int
    feature_names: tuple[str, ...]
    se_reliable: np.ndarray
    gradient_norm: float
    separation: tuple[str, ...] = ()
    warnings: list[str] = field(default_factory=list)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.theta, self.beta])

    @property
    def param_names(self) -> list[str]:
        return [f"cut{j}" for j in range(1, self.K)] + list(self.feature_names)

    @property
    def n_params(self) -> int:
        return self.theta.size + self.beta.size

    @property
    def pseudo_r2(self) -> float:
        return pseudo_r2(self.ll_null, self.ll_model)

    @property
    def aic(self) -> float:
        return information_criteria(self.n_params, self.n, self.ll_model)[0]

    @property
    def bic(self) -> float:
        return information_criteria(self.n_params, self.n, self.ll_model)[1]

    def coef_table(self) -> list[dict]:
        rows = []
        for i, name in enumerate(self.param_names):
            rows.append({
                "name": name,
                "kind": "threshold" if i < self.K - 1 else "coefficient",
                "estimate": float(self.params[i]),
                "se": float(self.se[i]),
                "z": float(self.z[i]),
                "p_value": float(self.p_values[i]),
                "reliable": bool(self.se_reliable[i]),
            })
        return rows


def wald_p_values(fit: OrderedLogitFit) -> np.ndarray:
    """Two-sided Wald p-values for every parameter (thresholds first).

    Entries whose standard errors are flagged unreliable are still returned
    but trigger a ``RuntimeWarning``; entries without a usable se are NaN.
    """
    est = fit.params
    out = np.array([wald_p_value(e, s) for e, s in zip(est, fit.se)])
    bad = [fit.param_names[i] for i in np.flatnonzero(~fit.se_reliable)]
    if bad:
        warnings.warn(f"p-values for {bad} rest on unreliable standard errors", RuntimeWarning,
                      stacklevel=2)
    return out


def _covariance(H_phi, J, data: ModelData):
    m = data.K - 1
    w, V = np.linalg.eigh(H_phi)
    scale = w.max() if w.size and w.max() > 0 else 1.0
    keep = w > SINGULAR_RTOL * scale
    cov_phi = (V[:, keep] / w[keep]) @ V[:, keep].T
    Jfull = np.eye(H_phi.shape[0])
    Jfull[:m, :m] = J
    cov = Jfull @ cov_phi @ Jfull.T
    null_dirs = V[:, ~keep]
    in_null = np.zeros(H_phi.shape[0], dtype=bool)
    if null_dirs.size:
        in_null = np.any(np.abs(Jfull @ null_dirs) > 1e-8, axis=1)
    return cov, in_null


def fit_ordered_logit(data: ModelData, tol: float = 1e-8, max_iter: int = 100,
                      start=None) -> OrderedLogitFit:
    """Maximum-likelihood fit.

    Convergence is declared when the max-norm of the gradient (threshold
    scale) falls to ``tol``. Steps are halved until the objective does not
    increase beyond rounding noise. ``start`` optionally gives
    ``(theta, beta)`` initial values; the default starts from the
    closed-form null thresholds and zero slopes.
    """
    if data.n <= data.n_params:
        raise IdentifiabilityError(
            f"n={data.n} observations cannot identify {data.n_params} parameters"
        )
    m = data.K - 1
    counts = data.counts()
    if start is None:
        theta0, beta0 = null_thresholds(counts), np.zeros(data.p)
    else:
        theta0, beta0 = _split(start, data)
        theta0 = _check_thresholds(theta0)
    phi = _to_phi(theta0, beta0)
    f = neg_log_likelihood(_from_phi(phi, m), data)
    if not math.isfinite(f):
        raise ValueError("objective is not finite at the starting values")

    notes: list[str] = []
    converged = False
    iterations = 0
    while True:
        g, g_phi, H_phi, J = _phi_derivatives(phi, data)
        gnorm = float(np.abs(g).max()) if g.size else 0.0
        if gnorm <= tol:
            converged = True
            break
        if iterations >= max_iter:
            break
        step = _newton_direction(H_phi, g_phi)
        # increases at rounding level are noise near the optimum, not ascent
        slack = 64 * np.finfo(float).eps * max(1.0, abs(f))
        t = 1.0
        for _ in range(60):
            cand = phi + t * step
            fc = neg_log_likelihood(_from_phi(cand, m), data)
            if fc <= f + slack:
                break
            t *= 0.5
        else:
            notes.append(f"line search stalled at iteration {iterations}")
            break
        phi, f = cand, fc
        iterations += 1

    theta, beta = _from_phi(phi, m)
    if not converged:
        msg = f"ordered logit did not converge (gradient max-norm {gnorm:.3g} > {tol:g})"
        notes.append(msg)
        warnings.warn(msg, ConvergenceWarning, stacklevel=2)

    cov, in_null = _covariance(H_phi, J, data)
    with np.errstate(invalid="ignore"):
        se = np.sqrt(np.where(np.diag(cov) > 0, np.diag(cov), np.nan))
    se[in_null] = np.nan
    reliable = np.isfinite(se) & (se > 0)

    params = np.concatenate([theta, beta])
    zero_cols = np.all(data.x == 0, axis=0)
    expected_null = np.concatenate([np.zeros(m, dtype=bool), zero_cols])
    if np.any(in_null & ~expected_null):
        names = [n for n, bad in zip(
            [f"cut{j}" for j in range(1, data.K)] + list(data.feature_names),
            in_null & ~expected_null) if bad]
        msg = f"information matrix is singular; standard errors unreliable for {names}"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    separation = []
    for i in range(m, params.size):
        est = params[i]
        if abs(est) > SEPARATION_ESTIMATE and np.isfinite(se[i]) and se[i] / abs(est) > SEPARATION_SE_RATIO:
            name = data.feature_names[i - m]
            separation.append(name)
            reliable[i] = False
    if separation:
        msg = f"possible quasi-separation on {separation}"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    with np.errstate(divide="ignore", invalid="ignore"):
        z = params / se
    p_values = np.array([wald_p_value(e, s) for e, s in zip(params, se)])
    return OrderedLogitFit(
        theta=theta,
        beta=beta,
        ll_model=-f,
        ll_null=null_log_likelihood(counts),
        cov=cov,
        se=se,
        z=z,
        p_values=p_values,
        converged=converged,
        iterations=iterations,
        n=data.n,
        K=data.K,
        feature_names=data.feature_names,
        se_reliable=reliable,
        gradient_norm=gnorm,
        separation=tuple(separation),
        warnings=notes,
    )


def sample_ordered_logit(theta, beta, X, rng) -> np.ndarray:
    """Draw outcomes in ``1..K`` from the model by inverting the CDF."""
    probs = cumulative_probs(theta, beta, np.atleast_2d(np.asarray(X, dtype=np.float64)))
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(cdf.shape[0])
    return 1 + np.sum(u[:, None] > cdf[:, :-1], axis=1)


class OrderedLogit(ClassifierMixin, BaseEstimator):
    """Ordered logit classifier with a scikit-learn interface.

    Class labels are ordered by sorting; the lowest label is category 1.

    Parameters
    ----------
    tol : float, default 1e-8
        Gradient max-norm at which Newton iteration stops.
    max_iter : int, default 100
        Maximum number of Newton steps.
    """

    def __init__(self, tol=1e-8, max_iter=100):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, feature_names=None):
        names = feature_names
        if names is None and hasattr(X, "columns"):
            names = [str(c) for c in X.columns]
        X, y = check_X_y(X, y, dtype=np.float64, ensure_min_features=0, y_numeric=False)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise IdentifiabilityError(
                f"all observations share one outcome ({self.classes_[0]!r}); nothing to order"
            )
        data = ModelData(X, y_idx + 1, self.classes_.size, tuple(names or ()))
        self.result_ = fit_ordered_logit(data, tol=self.tol, max_iter=self.max_iter)
        self.thresholds_ = self.result_.theta
        self.coef_ = self.result_.beta
        self.n_features_in_ = X.shape[1]
        if names is not None:
            self.feature_names_in_ = np.asarray(names, dtype=object)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=np.float64, ensure_min_features=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return cumulative_probs(self.thresholds_, self.coef_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def log_likelihood(self, X, y):
        check_is_fitted(self, "result_")
        X, y = check_X_y(X, y, dtype=np.float64, ensure_min_features=0, y_numeric=False)
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= self.classes_.size) or np.any(self.classes_[np.minimum(idx, self.classes_.size - 1)] != y):
            raise ValueError("y contains labels unseen during fit")
        probs = self.predict_proba(X)
        return float(np.sum(np.log(probs[np.arange(len(y)), idx])))
