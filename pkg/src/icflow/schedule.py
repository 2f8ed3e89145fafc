"""Rectified-flow forward process, log-SNR and logit-normal timestep shifting.

All quantities are computed in float64 regardless of model precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


class ShapeMismatchError(ValueError):
    def __init__(self, a_shape, b_shape, what="x and eps"):
        super().__init__(f"shape mismatch between {what}: {tuple(a_shape)} vs {tuple(b_shape)}")
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)


class RFSchedule:
    """Coefficients of z_t = a(t) x + b(t) eps with a(t) = 1 - t, b(t) = t."""

    @staticmethod
    def a(t):
        return 1.0 - t

    @staticmethod
    def b(t):
        return t

    @staticmethod
    def da(t):
        return -1.0 + 0.0 * t

    @staticmethod
    def db(t):
        return 1.0 + 0.0 * t

    def log_snr(self, t):
        return log_snr(t)

    def dlog_snr(self, t):
        """Analytic derivative of 2 log((1 - t) / t): -2 / (t (1 - t))."""
        t = np.asarray(t, dtype=np.float64)
        return -2.0 / (t * (1.0 - t))


@dataclass(frozen=True)
class TimestepDistribution:
    """Logit-normal p(t): logit(t) ~ N(mu, sigma^2).

    If ``alpha`` is given, mu is forced to log(alpha) and sigma to 1.
    """

    mu: float = 0.0
    sigma: float = 1.0
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.alpha is not None:
            if not self.alpha > 0:
                raise ValueError(f"alpha must be > 0, got {self.alpha}")
            object.__setattr__(self, "mu", mu_from_alpha(self.alpha))
            object.__setattr__(self, "sigma", 1.0)
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not math.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu}")

    @classmethod
    def from_alpha(cls, alpha: float) -> "TimestepDistribution":
        return cls(alpha=alpha)

    def pdf(self, t):
        t = np.asarray(t, dtype=np.float64)
        y = np.log(t) - np.log1p(-t)
        return np.exp(-0.5 * ((y - self.mu) / self.sigma) ** 2) / (
            self.sigma * math.sqrt(2 * math.pi) * (1.0 - t) * t
        )

    def cdf(self, t):
        from scipy.special import ndtr

        t = np.asarray(t, dtype=np.float64)
        with np.errstate(divide="ignore"):
            y = np.log(t) - np.log1p(-t)
        return ndtr((y - self.mu) / self.sigma)


@dataclass
class FlowState:
    z_t: np.ndarray
    t: float
    eps: np.ndarray


def interpolate(x, eps, t: float) -> FlowState:
    """Forward process z_t = (1 - t) x + t eps. Works on numpy arrays and torch tensors."""
    if tuple(x.shape) != tuple(eps.shape):
        raise ShapeMismatchError(x.shape, eps.shape)
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return FlowState(z_t=(1.0 - t) * x + t * eps, t=float(t), eps=eps)


def log_snr(t):
    """lambda_t = log(a_t^2 / b_t^2) = 2 log((1 - t) / t).

    Endpoints are not an error: t=0 gives +inf and t=1 gives -inf.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError("t must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        out = 2.0 * (np.log1p(-t_arr) - np.log(t_arr))
    return float(out) if out.ndim == 0 else out


def logit(t):
    t = np.asarray(t, dtype=np.float64)
    return np.log(t) - np.log1p(-t)


def sample_t(dist: TimestepDistribution, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` timesteps with logit(t) ~ N(mu, sigma)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    y = rng.normal(dist.mu, dist.sigma, size=n)
    # clip keeps t strictly inside (0, 1) in float64 for |y| > ~36
    return np.clip(1.0 / (1.0 + np.exp(-y)), np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)


def shift_timestep(t, dist: TimestepDistribution):
    """Redistribute t via t' = e^mu / (e^mu + (1/t - 1)^sigma).

    Endpoints are fixed points. For sigma=1 and mu=log(alpha) this is
    alpha t / (1 + (alpha - 1) t).
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError("t must lie in [0, 1]")
    interior = (t_arr > 0) & (t_arr < 1)
    safe = np.where(interior, t_arr, 0.5)
    # evaluated as a logistic in log space for accuracy near the endpoints
    y = dist.sigma * (np.log(safe) - np.log1p(-safe)) + dist.mu
    shifted = np.where(y >= 0, 1.0 / (1.0 + np.exp(-np.abs(y))), np.exp(-np.abs(y)) / (1.0 + np.exp(-np.abs(y))))
    out = np.where(interior, shifted, t_arr)
    return float(out) if out.ndim == 0 else out


def mu_from_alpha(alpha: float) -> float:
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    return math.log(alpha)


def shifted_log_snr(t, dist: TimestepDistribution):
    """sigma * lambda_t - 2 mu."""
    lam = np.asarray(log_snr(t))
    out = dist.sigma * lam - 2.0 * dist.mu
    return float(out) if out.ndim == 0 else out


# token count -> mu; entries override the default rule in resolution_mu
RESOLUTION_MU_TABLE: dict[int, float] = {}


def resolution_mu(num_tokens: int, table: Optional[dict] = None) -> float:
    """Mode of the training timestep distribution for a given latent token count.

    Looks up ``table`` (falling back to RESOLUTION_MU_TABLE) and otherwise
    uses log(sqrt(num_tokens / 256)).
    """
    table = RESOLUTION_MU_TABLE if table is None else table
    if num_tokens in table:
        return float(table[num_tokens])
    if num_tokens < 1:
        raise ValueError("num_tokens must be >= 1")
    return 0.5 * math.log(num_tokens / 256.0)


def schedule_table(dist: TimestepDistribution, n: int = 101):
    """Rows (t, lambda, t_shifted) on a uniform grid, endpoints included."""
    ts = np.linspace(0.0, 1.0, n)
    lam = log_snr(ts)
    shifted = shift_timestep(ts, dist)
    return [(float(a), float(b), float(c)) for a, b, c in zip(ts, lam, shifted)]


def verify_identities(grid_points: int = 1001):
    """Check every schedule identity numerically.

    Returns a list of (name, passed, max_error, tolerance) rows.
    """
    rows = []
    ts = np.linspace(0.0, 1.0, grid_points)
    inner = ts[1:-1]

    err = abs(mu_from_alpha(3.0) - 1.0986)
    rows.append(("mu_from_alpha(3) == 1.0986", err <= 1e-4, err, 1e-4))

    worst = 0.0
    for alpha in (0.5, 1.0, 2.0, 3.0, 6.0):
        d = TimestepDistribution.from_alpha(alpha)
        ref = alpha * ts / (1 + (alpha - 1) * ts)
        worst = max(worst, float(np.max(np.abs(shift_timestep(ts, d) - ref))))
    rows.append(("shift_timestep == alpha t / (1 + (alpha-1) t)", worst <= 1e-12, worst, 1e-12))

    # float64 carries ~eps / min(t', 1 - t') absolute error in log_snr(t'),
    # so the grid keeps t' at least ~1e-5 away from both endpoints
    worst = 0.0
    for mu in (-1.5, 0.0, math.log(3.0), 2.0):
        for sigma in (0.5, 1.0, 1.4):
            d = TimestepDistribution(mu, sigma)
            a = log_snr(shift_timestep(inner, d))
            b = shifted_log_snr(inner, d)
            worst = max(worst, float(np.max(np.abs(a - b))))
    rows.append(("log_snr(shift_timestep(t)) == shifted_log_snr(t)", worst <= 1e-10, worst, 1e-10))

    worst = -math.inf
    for mu in (-1.0, 0.0, 1.0986):
        for sigma in (0.5, 1.0, 2.0):
            diffs = np.diff(shift_timestep(ts, TimestepDistribution(mu, sigma)))
            worst = max(worst, float(-np.min(diffs)))
    rows.append(("shift_timestep strictly increasing", worst < 0, worst, 0.0))

    err = float(np.max(np.abs(log_snr(inner) + log_snr(1 - inner))))
    rows.append(("log_snr(t) == -log_snr(1 - t)", err <= 1e-10, err, 1e-10))

    rng = np.random.default_rng(0)
    x = rng.normal(size=(2000, 4))
    eps = rng.normal(size=(2000, 4))
    t = rng.uniform(1e-3, 1 - 1e-3, size=(2000, 1))
    from .flow import cfm_target_general

    z = (1 - t) * x + t * eps
    err = float(np.max(np.abs(cfm_target_general(z, eps, t) - (eps - x))))
    rows.append(("general CFM target == eps - x", err <= 1e-9, err, 1e-9))
    return rows
