"""Closed-form log-normal arithmetic used for Lipschitz bound propagation.

A log-normal variable ``X = exp(Y)`` with ``Y ~ N(mu, var)`` is carried as a
:class:`LogNormalParams`. Products of independent log-normals are exact;
sums are approximated by Fenton-Wilkinson moment matching. ``ZERO_BOUND``
stands for the point mass at 0, which cannot be written in log space.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "LogNormalParams",
    "ZERO_BOUND",
    "is_zero_bound",
    "ln_scale",
    "ln_product",
    "fw_sum",
    "normal_cdf",
    "normal_quantile",
    "ln_mean",
    "ln_variance",
    "ln_quantile",
    "ln_cdf",
    "ks_sampling_error",
    "MCStats",
    "mc_oracle",
]


@dataclass(frozen=True)
class LogNormalParams:
    """Log-space mean and variance of a univariate log-normal."""

    mu: float
    var: float = 0.0

    def __post_init__(self):
        if not (self.var >= 0.0):
            raise ValueError(f"log-space variance must be >= 0, got {self.var}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.var)

    @property
    def implied_mean(self) -> float:
        return math.exp(self.mu + 0.5 * self.var)

    @property
    def implied_variance(self) -> float:
        return math.exp(2.0 * self.mu + self.var) * math.expm1(self.var)


# Point mass at zero. mu = -inf keeps implied_mean == 0 and ln_cdf well defined.
ZERO_BOUND = LogNormalParams(-math.inf, 0.0)


def is_zero_bound(p: LogNormalParams) -> bool:
    return p.mu == -math.inf


def ln_scale(p: LogNormalParams, c: float) -> LogNormalParams:
    """Distribution of ``c * X`` for a positive constant ``c``."""
    if not c > 0:
        raise ValueError(f"scale must be positive, got {c}")
    return LogNormalParams(p.mu + math.log(c), p.var)


def ln_product(a: LogNormalParams, b: LogNormalParams) -> LogNormalParams:
    """Exact product of two independent log-normals."""
    if is_zero_bound(a) or is_zero_bound(b):
        return ZERO_BOUND
    return LogNormalParams(a.mu + b.mu, a.var + b.var)


def fw_sum(terms: Sequence[LogNormalParams]) -> LogNormalParams:
    """Fenton-Wilkinson approximation of a sum of independent log-normals.

    The result matches the first two moments of the sum exactly. Zero-bound
    terms contribute nothing; if every term is zero the zero bound is returned.

    Raises:
        ValueError: if ``terms`` is empty.
    """
    if len(terms) == 0:
        raise ValueError("fw_sum needs at least one term")
    live = [t for t in terms if not is_zero_bound(t)]
    if not live:
        return ZERO_BOUND
    if len(live) == 1:
        return live[0]
    mu = np.array([t.mu for t in live], dtype=np.float64)
    var = np.array([t.var for t in live], dtype=np.float64)
    # factor out the largest log-mean so the exponentials stay in range
    shift = float(np.max(mu + 0.5 * var))
    m = float(np.sum(np.exp(mu + 0.5 * var - shift)))
    v = float(np.sum(np.exp(2.0 * (mu - shift) + var) * np.expm1(var)))
    s = math.log1p(v / (m * m))
    return LogNormalParams(math.log(m) + shift - 0.5 * s, s)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(z: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-z / _SQRT2)


# Acklam's rational approximation, used only as the Newton starting point.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _quantile_guess(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log1p(-p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF, refined with two Newton steps."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    x = _quantile_guess(p)
    for _ in range(2):
        # work on the smaller tail to avoid cancellation in cdf - p
        if x > 0:
            err = -(0.5 * math.erfc(x / _SQRT2) - (1.0 - p))
        else:
            err = normal_cdf(x) - p
        pdf = _INV_SQRT_2PI * math.exp(-0.5 * x * x)
        x -= err / pdf
    return x


def ln_mean(p: LogNormalParams) -> float:
    return 0.0 if is_zero_bound(p) else p.implied_mean


def ln_variance(p: LogNormalParams) -> float:
    return 0.0 if is_zero_bound(p) else p.implied_variance


def ln_quantile(p: LogNormalParams, q: float) -> float:
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    if is_zero_bound(p):
        return 0.0
    return math.exp(p.mu + p.sigma * normal_quantile(q))


def ln_cdf(p: LogNormalParams, x: float) -> float:
    """``Pr[X <= x]``; a zero-variance input behaves as a step at ``e^mu``."""
    if x <= 0:
        return 0.0
    if is_zero_bound(p):
        return 1.0
    if p.var == 0.0:
        return 1.0 if math.log(x) >= p.mu else 0.0
    return normal_cdf((math.log(x) - p.mu) / p.sigma)


def ks_sampling_error(n: int) -> float:
    """Expected one-sample KS distance under the null for ``n`` samples.

    Uses the mean of the Kolmogorov distribution, sqrt(pi/2) * ln 2.
    """
    return math.sqrt(math.pi / 2.0) * math.log(2.0) / math.sqrt(n)


@dataclass(frozen=True)
class MCStats:
    n: int
    mean: float
    variance: float
    mean_se: float
    variance_se: float
    log_mean: float
    log_variance: float
    log_mean_se: float
    ks: float | None


def _ks_normal(sorted_x: np.ndarray, mu: float, var: float) -> float:
    n = sorted_x.size
    if var == 0.0:
        # step reference: the distance is the mass away from mu
        off = np.count_nonzero(np.abs(sorted_x - mu) > 1e-12 * max(1.0, abs(mu)))
        return off / n
    cdf = ndtr((sorted_x - mu) / math.sqrt(var))
    upper = np.arange(1, n + 1) / n
    lower = np.arange(0, n) / n
    return float(max(np.max(upper - cdf), np.max(cdf - lower)))


def _stream(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(tag.encode())])


def mc_oracle(
    terms: Iterable[LogNormalParams],
    combine: str = "sum",
    n: int = 1_000_000,
    seed: int = 0,
    reference: LogNormalParams | None = None,
    tag: str = "",
) -> MCStats:
    """Monte Carlo statistics of a sum or product of independent log-normals.

    Sampling draws ``exp(N(mu, var))`` directly and never touches the
    closed-form code paths, so the result can be used to check them.
    The stream depends on ``(seed, tag)`` only.
    """
    terms = list(terms)
    if n < 10_000:
        raise ValueError("mc_oracle needs n >= 10^4")
    if combine not in ("sum", "product"):
        raise ValueError(f"unknown combine {combine!r}")
    rng = _stream(seed, f"{combine}:{tag}")
    if combine == "sum":
        acc = np.zeros(n)
        for t in terms:
            if is_zero_bound(t):
                continue
            acc += np.exp(t.mu + math.sqrt(t.var) * rng.standard_normal(n))
        logs = np.log(acc) if np.all(acc > 0) else None
    else:
        logs = np.zeros(n)
        for t in terms:
            logs += t.mu + math.sqrt(t.var) * rng.standard_normal(n)
        acc = np.exp(logs)
    mean = float(acc.mean())
    centred = acc - mean
    variance = float(np.mean(centred**2)) * n / (n - 1)
    m4 = float(np.mean(centred**4))
    var_se = math.sqrt(max(m4 - variance**2, 0.0) / n)
    if logs is None:
        log_mean, log_var, log_se, ks = -math.inf, 0.0, 0.0, None
    else:
        log_mean = float(logs.mean())
        log_var = float(logs.var(ddof=1))
        log_se = math.sqrt(log_var / n)
        ks = None
        if reference is not None:
            ks = _ks_normal(np.sort(logs), reference.mu, reference.var)
    return MCStats(
        n=n,
        mean=mean,
        variance=variance,
        mean_se=math.sqrt(variance / n),
        variance_se=var_se,
        log_mean=log_mean,
        log_variance=log_var,
        log_mean_se=log_se,
        ks=ks,
    )
