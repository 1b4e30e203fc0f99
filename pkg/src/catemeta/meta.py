"""Random-effects pooling of per-study CATE estimates and prediction intervals.

Stage 2 of the two-stage pipeline.  For each covariate profile, the K
per-study estimates (tau_hat_s, se2_s) are combined under the random-effects
model

    tau_s ~ N(tau, theta2),    tau_hat_s ~ N(tau_s, se2_s),

with the between-study variance theta2 estimated by restricted maximum
likelihood (REML).  The DerSimonian-Laird moment estimator is provided as a
cross-check.  Prediction intervals for the effect in a new setting use a
t critical value with K-2 degrees of freedom, reflecting that both the
pooled mean and theta2 are estimated from the data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaincinv

from .errors import EstimationError, InsufficientStudiesError
from .model import PooledCate, PredictionInterval, StudyCateEstimate

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_REML_XATOL = 1e-10
_COARSE_GRID = 257
_COARSE_GRID_BATCH = 65


@dataclass(frozen=True)
class MetaInput:
    """Per-study estimates for one covariate profile, ready for pooling."""

    profile_id: int
    estimates: tuple[StudyCateEstimate, ...]

    def __post_init__(self):
        if len(self.estimates) < 2:
            raise InsufficientStudiesError("pooling requires at least 2 studies")
        for est in self.estimates:
            if est.profile_id != self.profile_id:
                raise ValueError(
                    f"estimate for profile {est.profile_id} mixed into "
                    f"input for profile {self.profile_id}"
                )
        object.__setattr__(self, "estimates", tuple(self.estimates))

    @property
    def k_studies(self) -> int:
        return len(self.estimates)

    @property
    def tau(self) -> np.ndarray:
        return np.array([e.tau_hat for e in self.estimates])

    @property
    def v(self) -> np.ndarray:
        return np.array([e.se2 for e in self.estimates])


def _profile_log_likelihood(theta2, tau, v):
    """Vectorized restricted log likelihood over an array of theta2 values.

    Constant terms that do not involve theta2 are dropped.
    """
    t2 = np.atleast_1d(np.asarray(theta2, dtype=np.float64))
    total = v[:, None] + t2[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = 1.0 / total
        sw = w.sum(axis=0)
        mu = (w * tau[:, None]).sum(axis=0) / sw
        out = -0.5 * (
            np.log(total).sum(axis=0)
            + np.log(sw)
            + (((tau[:, None] - mu[None, :]) ** 2) * w).sum(axis=0)
        )
    return np.where(np.isfinite(out), out, -np.inf)


def restricted_log_likelihood(theta2: float, meta: MetaInput) -> float:
    """REML objective at a given between-study variance (up to a constant).

    Returns -1/2 sum(log(v_s + theta2)) - 1/2 log(sum(1/(v_s + theta2)))
    - 1/2 sum((tau_s - mu(theta2))^2 / (v_s + theta2)), where mu(theta2) is
    the weighted mean at that theta2.
    """
    if theta2 < 0.0:
        raise ValueError("theta2 must be >= 0")
    return float(_profile_log_likelihood(theta2, meta.tau, meta.v)[0])


def _golden_section_max(f, lo: float, hi: float, xatol: float):
    """Maximize a scalar function on [lo, hi] by golden-section search."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > xatol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    x = c if fc >= fd else d
    return x, max(fc, fd)


def reml_theta2(meta: MetaInput) -> float:
    """REML estimate of the between-study variance for one profile.

    The objective is scanned on a coarse grid over [0, theta2_max] with
    theta2_max = 10 * var(tau_hat) + max(se2), then refined around the best
    grid point by golden-section search to absolute tolerance 1e-10.  The
    boundary value 0 is always compared explicitly.  If the maximizer lands
    on the upper bound, the bound is doubled and the search repeated once.
    """
    tau, v = meta.tau, meta.v
    if np.ptp(tau) == 0.0:
        return 0.0
    bound = 10.0 * float(np.var(tau, ddof=1)) + float(v.max())

    def solve(upper):
        grid = np.linspace(0.0, upper, _COARSE_GRID)
        vals = _profile_log_likelihood(grid, tau, v)
        best = int(np.argmax(vals))
        lo = grid[max(best - 1, 0)]
        hi = grid[min(best + 1, _COARSE_GRID - 1)]
        x, fx = _golden_section_max(
            lambda t: float(_profile_log_likelihood(t, tau, v)[0]), lo, hi, _REML_XATOL
        )
        f0 = float(vals[0])
        if f0 >= fx:
            return 0.0, f0
        return x, fx

    x, _ = solve(bound)
    if bound - x <= 1e-6 * bound:
        bound *= 2.0
        x, _ = solve(bound)
        if bound - x <= 1e-6 * bound:
            raise EstimationError(
                "REML maximizer exceeded its search bound after one retry"
            )
    return max(float(x), 0.0)


def _batch_ll(theta2, tau, v):
    """Restricted log likelihood at one theta2 per profile; all (K, P)."""
    total = v + theta2[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = 1.0 / total
        sw = w.sum(axis=0)
        mu = (w * tau).sum(axis=0) / sw
        r = tau - mu[None, :]
        out = -0.5 * (np.log(total).sum(axis=0) + np.log(sw) + (r * r * w).sum(axis=0))
    return np.where(np.isfinite(out), out, -np.inf)


def _golden_batch(tau, v, lo, hi, xatol):
    """Element-wise golden-section maximization over [lo, hi] per profile."""
    a, b = lo.copy(), hi.copy()
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc = _batch_ll(c, tau, v)
    fd = _batch_ll(d, tau, v)
    while float((b - a).max()) > xatol:
        take_left = fc >= fd
        b = np.where(take_left, d, b)
        a = np.where(take_left, a, c)
        c = b - _GOLDEN * (b - a)
        d = a + _GOLDEN * (b - a)
        fc = _batch_ll(c, tau, v)
        fd = _batch_ll(d, tau, v)
    x = np.where(fc >= fd, c, d)
    return x, np.maximum(fc, fd)


def _solve_batch(tau, v, bound):
    grid_frac = np.linspace(0.0, 1.0, _COARSE_GRID_BATCH)
    vals = np.stack([_batch_ll(frac * bound, tau, v) for frac in grid_frac])
    best = np.argmax(vals, axis=0)
    lo = grid_frac[np.maximum(best - 1, 0)] * bound
    hi = grid_frac[np.minimum(best + 1, _COARSE_GRID_BATCH - 1)] * bound
    x, fx = _golden_batch(tau, v, lo, hi, _REML_XATOL)
    f0 = vals[0]
    return np.where(f0 >= fx, 0.0, x)


def reml_theta2_batch(tau: np.ndarray, v: np.ndarray) -> np.ndarray:
    """REML between-study variance for many profiles at once.

    ``tau`` and ``v`` have shape (K, n_profiles); returns one theta2 per
    profile.  Same estimator as :func:`reml_theta2` (within the search
    tolerance), vectorized for the simulation harness where hundreds of
    profiles pool per replication.
    """
    tau = np.asarray(tau, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if tau.shape != v.shape or tau.ndim != 2 or tau.shape[0] < 2:
        raise ValueError("tau and v must both be (K, n_profiles) with K >= 2")
    n_prof = tau.shape[1]
    out = np.zeros(n_prof)
    active = np.ptp(tau, axis=0) > 0.0
    if not active.any():
        return out
    t_act, v_act = tau[:, active], v[:, active]
    bound = 10.0 * np.var(t_act, axis=0, ddof=1) + v_act.max(axis=0)
    x = _solve_batch(t_act, v_act, bound)
    hit = bound - x <= 1e-6 * bound
    if hit.any():
        bound2 = 2.0 * bound[hit]
        x2 = _solve_batch(t_act[:, hit], v_act[:, hit], bound2)
        if np.any(bound2 - x2 <= 1e-6 * bound2):
            raise EstimationError(
                "REML maximizer exceeded its search bound after one retry"
            )
        x[hit] = x2
    out[active] = np.maximum(x, 0.0)
    return out


def dl_theta2(meta: MetaInput) -> float:
    """DerSimonian-Laird moment estimate of the between-study variance.

    With fixed-effect weights w_s = 1/v_s, computes
    max(0, (Q - (K-1)) / (sum(w) - sum(w^2)/sum(w))) where Q is the usual
    heterogeneity statistic.  Requires all v_s > 0 (weights must be finite).
    """
    tau, v = meta.tau, meta.v
    if np.any(v == 0.0):
        raise EstimationError("DerSimonian-Laird requires all se2 > 0")
    w = 1.0 / v
    sw = w.sum()
    mu = float((w * tau).sum() / sw)
    q = float((w * (tau - mu) ** 2).sum())
    denom = float(sw - (w**2).sum() / sw)
    k = meta.k_studies
    return max(0.0, (q - (k - 1)) / denom)


def pool_cate(meta: MetaInput, theta2: float) -> PooledCate:
    """Inverse-variance weighted pooling at a given between-study variance.

    Weights are w_s = 1/(se2_s + theta2); the pooled variance is 1/sum(w).
    """
    if theta2 < 0.0:
        raise ValueError("theta2 must be >= 0")
    tau, v = meta.tau, meta.v
    total = v + theta2
    if np.any(total == 0.0):
        if np.all(total == 0.0) and np.ptp(tau) == 0.0:
            # True weights are infinite; record nominal equal weights.
            k = meta.k_studies
            return PooledCate(
                profile_id=meta.profile_id,
                tau_pooled=float(tau[0]),
                var_pooled=0.0,
                theta2=theta2,
                k_studies=k,
                weights=tuple([1.0 / k] * k),
            )
        raise EstimationError(
            "degenerate variance: some se2 + theta2 are exactly zero"
        )
    w = 1.0 / total
    sw = float(w.sum())
    return PooledCate(
        profile_id=meta.profile_id,
        tau_pooled=float((w * tau).sum() / sw),
        var_pooled=1.0 / sw,
        theta2=float(theta2),
        k_studies=meta.k_studies,
        weights=tuple(float(wi) for wi in w),
    )


def t_quantile(df: int, p: float) -> float:
    """Student-t inverse CDF via the inverse regularized incomplete beta.

    For p > 1/2 the quantile solves I_x(df/2, 1/2) = 2(1-p) with
    x = df/(df + t^2); values below 1/2 follow by symmetry.
    """
    if df < 1:
        raise ValueError("df must be >= 1")
    if not (0.0 < p < 1.0):
        raise ValueError("p must be in (0, 1)")
    if p == 0.5:
        return 0.0
    tail = min(p, 1.0 - p)
    x = float(betaincinv(0.5 * df, 0.5, 2.0 * tail))
    t = math.sqrt(df * (1.0 - x) / x)
    return t if p > 0.5 else -t


def prediction_interval(
    pooled: PooledCate, alpha: float, k_studies: int
) -> PredictionInterval:
    """Interval for the treatment effect in a new setting at level 1 - alpha.

    Half-width is t_{K-2, 1-alpha/2} * sqrt(var_pooled + theta2); K - 2
    degrees of freedom account for estimating both the pooled mean and the
    between-study variance, so at least 3 studies are required.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must be in (0, 1)")
    if k_studies != pooled.k_studies:
        raise ValueError("k_studies does not match the pooled estimate")
    if k_studies < 3:
        raise InsufficientStudiesError(
            f"prediction intervals need K >= 3 studies, got {k_studies}"
        )
    df = k_studies - 2
    half = t_quantile(df, 1.0 - alpha / 2.0) * math.sqrt(pooled.var_pooled + pooled.theta2)
    return PredictionInterval(
        profile_id=pooled.profile_id,
        center=pooled.tau_pooled,
        lower=pooled.tau_pooled - half,
        upper=pooled.tau_pooled + half,
        level=1.0 - alpha,
        df=df,
    )
