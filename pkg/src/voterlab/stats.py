"""Estimation infrastructure: streaming moments, intervals, KS distance, RNG streams.

Everything here is deliberately boring: mergeable Welford summaries, Wilson
score intervals, a sup-norm empirical-CDF distance, an OLS line fit, and
counter-based random streams keyed by (master_seed, stream_index).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

DEFAULT_CI_LEVEL = 0.95

# Recorded in run manifests so outputs can name the exact generator family.
RNG_ALGORITHM = "numpy.random.Philox (counter-based, key = [master_seed, stream_index])"


@dataclass(frozen=True)
class RandomStream:
    """A reproducible random stream identified by (master_seed, stream_index).

    Distinct stream indices give statistically independent Philox streams; the
    same pair always reproduces the same sequence, independent of how many
    other streams exist or in which order they are consumed.
    """

    master_seed: int
    stream_index: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array(
            [np.uint64(self.master_seed & 0xFFFFFFFFFFFFFFFF),
             np.uint64(self.stream_index & 0xFFFFFFFFFFFFFFFF)],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key))

    def substream(self, offset: int) -> "RandomStream":
        return RandomStream(self.master_seed, self.stream_index + offset)

    @property
    def fingerprint(self) -> str:
        raw = f"philox:{self.master_seed}:{self.stream_index}".encode()
        return hashlib.sha256(raw).hexdigest()[:16]


@dataclass
class EstimateSummary:
    """Mergeable streaming summary of a scalar sample (Welford / Chan form).

    ``m2`` is the sum of squared deviations from the mean, so the sample
    variance is m2/(n-1). ``merge`` is associative and commutative up to
    floating-point roundoff, which makes replica aggregation order-free.
    """

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0
    ci_level: float = DEFAULT_CI_LEVEL
    seed_fingerprint: str = ""
    # For Bernoulli data we keep the hit count so Wilson intervals stay exact.
    bernoulli_hits: int | None = None

    def add(self, x: float) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    @classmethod
    def from_samples(cls, xs, ci_level: float = DEFAULT_CI_LEVEL,
                     seed_fingerprint: str = "") -> "EstimateSummary":
        arr = np.asarray(xs, dtype=float)
        s = cls(ci_level=ci_level, seed_fingerprint=seed_fingerprint)
        if arr.size:
            s.n = int(arr.size)
            s.mean = float(arr.mean())
            s.m2 = float(((arr - arr.mean()) ** 2).sum())
        return s

    @classmethod
    def from_bernoulli(cls, hits: int, n: int, ci_level: float = DEFAULT_CI_LEVEL,
                       seed_fingerprint: str = "") -> "EstimateSummary":
        if not 0 <= hits <= n:
            raise ValueError(f"need 0 <= hits <= n, got hits={hits}, n={n}")
        p = hits / n if n else 0.0
        s = cls(n=n, mean=p, m2=hits * (1.0 - p) ** 2 + (n - hits) * p ** 2,
                ci_level=ci_level, seed_fingerprint=seed_fingerprint,
                bernoulli_hits=hits)
        return s

    def merge(self, other: "EstimateSummary") -> "EstimateSummary":
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        hits = None
        if self.bernoulli_hits is not None and other.bernoulli_hits is not None:
            hits = self.bernoulli_hits + other.bernoulli_hits
        fp = self.seed_fingerprint
        if other.seed_fingerprint and other.seed_fingerprint != fp:
            fp = hashlib.sha256(
                (self.seed_fingerprint + other.seed_fingerprint).encode()
            ).hexdigest()[:16]
        return EstimateSummary(n=n, mean=mean, m2=m2, ci_level=self.ci_level,
                               seed_fingerprint=fp, bernoulli_hits=hits)

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else float("nan")

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.n) if self.n > 1 else float("nan")

    @property
    def ci(self) -> tuple[float, float]:
        """(lo, hi): Wilson for Bernoulli summaries, normal-theory otherwise."""
        if self.bernoulli_hits is not None:
            return wilson_interval(self.bernoulli_hits, self.n, self.ci_level)
        if self.n < 2:
            return (self.mean, self.mean)
        z = sps.norm.ppf(0.5 + self.ci_level / 2.0)
        half = z * self.std_error
        return (self.mean - half, self.mean + half)

    @property
    def ci_lo(self) -> float:
        return self.ci[0]

    @property
    def ci_hi(self) -> float:
        return self.ci[1]

    def as_dict(self) -> dict:
        lo, hi = self.ci if self.n else (float("nan"), float("nan"))
        return {
            "n": self.n,
            "mean": self.mean,
            "m2": self.m2,
            "std_error": self.std_error if self.n > 1 else None,
            "ci_level": self.ci_level,
            "ci_lo": lo,
            "ci_hi": hi,
            "seed_fingerprint": self.seed_fingerprint,
            "hits": self.bernoulli_hits,
        }


def wilson_interval(hits: int, n: int, level: float = DEFAULT_CI_LEVEL) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion.

    Never leaves [0, 1]; at hits=0 the lower bound is exactly 0 and at hits=n
    the upper bound is exactly 1.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= hits <= n:
        raise ValueError(f"need 0 <= hits <= n, got hits={hits}, n={n}")
    z = float(sps.norm.ppf(0.5 + level / 2.0))
    phat = hits / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = phat + z2 / (2.0 * n)
    rad = z * math.sqrt(phat * (1.0 - phat) / n + z2 / (4.0 * n * n))
    lo = max(0.0, (center - rad) / denom)
    hi = min(1.0, (center + rad) / denom)
    if hits == 0:
        lo = 0.0
    if hits == n:
        hi = 1.0
    return (lo, hi)


def ks_distance(samples, cdf) -> float:
    """Sup-norm distance between the empirical CDF of ``samples`` and ``cdf``."""
    xs = np.sort(np.asarray(samples, dtype=float))
    n = xs.size
    if n == 0:
        raise ValueError("samples must be nonempty")
    f = np.asarray(cdf(xs), dtype=float)
    upper = np.arange(1, n + 1) / n
    lower = np.arange(0, n) / n
    return float(max(np.max(upper - f), np.max(f - lower)))


@dataclass
class LineFit:
    slope: float
    intercept: float
    slope_ci: tuple[float, float]
    n_used: int
    n_censored: int = 0


def fit_log_linear(points, ci_level: float = DEFAULT_CI_LEVEL) -> LineFit:
    """OLS fit of (x, log-frequency) pairs with a normal-theory CI on the slope.

    Points whose ordinate is not finite (censored cells with zero observed
    frequency give -inf) are excluded and counted in ``n_censored``.
    """
    pts = [(float(x), float(y)) for x, y in points]
    usable = [(x, y) for x, y in pts if math.isfinite(y) and math.isfinite(x)]
    n_cens = len(pts) - len(usable)
    if len(usable) < 3:
        raise ValueError(f"need >= 3 finite points, got {len(usable)}")
    x = np.array([p[0] for p in usable])
    y = np.array([p[1] for p in usable])
    n = x.size
    xbar, ybar = x.mean(), y.mean()
    sxx = float(((x - xbar) ** 2).sum())
    if sxx == 0.0:
        raise ValueError("degenerate fit: all x identical")
    slope = float(((x - xbar) * (y - ybar)).sum() / sxx)
    intercept = float(ybar - slope * xbar)
    resid = y - (intercept + slope * x)
    dof = n - 2
    if dof > 0:
        s2 = float((resid ** 2).sum() / dof)
        se = math.sqrt(s2 / sxx)
        tq = float(sps.t.ppf(0.5 + ci_level / 2.0, dof))
        ci = (slope - tq * se, slope + tq * se)
    else:
        ci = (slope, slope)
    return LineFit(slope=slope, intercept=intercept, slope_ci=ci,
                   n_used=n, n_censored=n_cens)
