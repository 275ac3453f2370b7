"""Exact lattice computations for the rate-1 continuous-time walk.

Provides the transition kernel q_t on a truncated box, the Gaussian comparison
sup-gap, lattice Green functions by time quadrature, the escape-probability
constant beta_d, the exponential transition-kernel envelope, and the scale
functions psi_d / phi_d.

All mass accounting is one-sided: dropped probability (series truncation, box
leakage, crops) is never redistributed, so every stored q value is a lower
bound and ``lost_mass = 1 - sum(values)`` bounds the pointwise error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal
from scipy import special as sc
from scipy import stats as sps

from .kernels import JumpKernel

# Above this time the Poisson series is replaced by Chapman-Kolmogorov
# doubling of half-time tables (the series needs O(t) convolutions).
SERIES_T_MAX = 50.0


@dataclass(frozen=True)
class GaussianDensity:
    """Transition density of d-dimensional Brownian motion with variance sigma2 per unit time."""

    sigma2: float
    d: int

    def __call__(self, x, t: float = 1.0):
        x = np.asarray(x, dtype=float)
        sq = np.sum(x * x, axis=-1) if x.ndim > 1 else float(np.dot(x, x))
        norm = (2.0 * math.pi * self.sigma2 * t) ** (-self.d / 2.0)
        return norm * np.exp(-sq / (2.0 * self.sigma2 * t))


@dataclass
class KernelTable:
    """q_t values on the box |y|_inf <= box_radius, plus unaccounted mass."""

    t: float
    box_radius: int
    values: np.ndarray
    lost_mass: float

    def value(self, y) -> float:
        y = np.asarray(y, dtype=np.int64)
        if np.any(np.abs(y) > self.box_radius):
            return 0.0
        idx = tuple(int(c) + self.box_radius for c in y)
        return float(self.values[idx])

    def offsets_grid(self) -> list[np.ndarray]:
        """Per-axis offset coordinates (-R..R) matching ``values`` axes."""
        r = self.box_radius
        return [np.arange(-r, r + 1)] * self.values.ndim


def is_nearest_neighbor(kernel: JumpKernel) -> bool:
    """True when the support is exactly the 2d unit vectors with uniform weight."""
    offs = kernel.offsets
    if offs.shape[0] != 2 * kernel.dimension:
        return False
    if not np.all(np.sum(np.abs(offs), axis=1) == 1):
        return False
    return bool(np.allclose(kernel.probs, 1.0 / (2 * kernel.dimension)))


def _qt_nn_axis(t: float, d: int, radius: int) -> np.ndarray:
    """One-coordinate marginal of the rate-1 NN walk: exp(-t/d) I_k(t/d).

    In continuous time the d coordinates of the nearest-neighbor walk are
    independent rate-1/d one-dimensional walks, so q_t factorizes exactly.
    """
    u = t / d
    ks = np.arange(-radius, radius + 1)
    return sc.ive(np.abs(ks), u)  # ive(k, u) = exp(-u) I_k(u) for u >= 0


def nn_kernel_table(kernel: JumpKernel, t: float, box_radius: int) -> KernelTable:
    """Exact q_t table for a nearest-neighbor kernel via coordinate factorization."""
    if not is_nearest_neighbor(kernel):
        raise ValueError("factorized tables require a nearest-neighbor kernel")
    d = kernel.dimension
    axis = _qt_nn_axis(t, d, box_radius)
    vals = axis
    for _ in range(d - 1):
        vals = np.multiply.outer(vals, axis)
    return KernelTable(t=t, box_radius=box_radius, values=vals,
                       lost_mass=max(0.0, 1.0 - float(vals.sum())))


def qt_nn_point(kernel: JumpKernel, t, y) -> np.ndarray:
    """Exact q_t(y) for a nearest-neighbor kernel; ``t`` may be an array."""
    d = kernel.dimension
    u = np.asarray(t, dtype=float) / d
    out = np.ones_like(u)
    for c in np.asarray(y, dtype=np.int64):
        out = out * sc.ive(abs(int(c)), u)
    return out


def _convolve_step(cur: np.ndarray, kernel: JumpKernel) -> np.ndarray:
    """One discrete convolution with the jump kernel, zero-filled at the box edge."""
    new = np.zeros_like(cur)
    shape = cur.shape
    for off, p in zip(kernel.offsets, kernel.probs):
        src = []
        dst = []
        ok = True
        for length, o in zip(shape, off):
            o = int(o)
            if abs(o) >= length:
                ok = False
                break
            if o >= 0:
                dst.append(slice(o, length))
                src.append(slice(0, length - o))
            else:
                dst.append(slice(0, length + o))
                src.append(slice(-o, length))
        if ok:
            new[tuple(dst)] += p * cur[tuple(src)]
    return new


def _series_table(kernel: JumpKernel, t: float, box_radius: int, tol: float) -> KernelTable:
    """Poissonized series sum_n e^{-t} t^n / n! p^{*n} truncated at tail < tol."""
    d = kernel.dimension
    shape = (2 * box_radius + 1,) * d
    cur = np.zeros(shape)
    cur[(box_radius,) * d] = 1.0
    acc = np.zeros(shape)
    if t == 0.0:
        acc[(box_radius,) * d] = 1.0
        return KernelTable(t=t, box_radius=box_radius, values=acc, lost_mass=0.0)
    n_max = int(sps.poisson.isf(tol / 2.0, t)) + 1
    w = math.exp(-t)
    for n in range(n_max + 1):
        if w > 0.0:
            acc += w * cur
        cur = _convolve_step(cur, kernel)
        w *= t / (n + 1)
    lost = max(0.0, 1.0 - float(acc.sum()))
    return KernelTable(t=t, box_radius=box_radius, values=acc, lost_mass=lost)


def _natural_radius(kernel: JumpKernel, t: float) -> int:
    """Box radius at which the out-of-box mass is below ~1e-10."""
    return int(math.ceil(8.0 * math.sqrt(kernel.sigma2 * max(t, 1.0)))) + kernel.support_radius + 2


def evolve_kernel(kernel: JumpKernel, t: float, box_radius: int,
                  tol: float = 1e-12, method: str = "auto") -> KernelTable:
    """q_t on the box |y|_inf <= box_radius.

    method:
      "series"     Poissonized convolution series (any kernel).
      "factorized" exact Bessel-product evaluation (nearest-neighbor only).
      "auto"       factorized when available, otherwise the series; times above
                   SERIES_T_MAX are built by convolving two half-time tables,
                   which keeps the accounting one-sided.

    Raises when more than 1% of the mass leaks out of the requested box.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if box_radius < kernel.support_radius:
        raise ValueError("box_radius must cover the kernel support")

    if method == "auto":
        method = "factorized" if is_nearest_neighbor(kernel) else "series"
    if method == "factorized":
        table = nn_kernel_table(kernel, t, box_radius)
    elif method == "series":
        table = _series_doubling(kernel, t, box_radius, tol)
    else:
        raise ValueError(f"unknown method {method!r}")

    if table.lost_mass > 0.01:
        raise ValueError(
            f"box_radius={box_radius} too small at t={t}: lost mass "
            f"{table.lost_mass:.3g} > 0.01; increase the box")
    return table


def _series_doubling(kernel: JumpKernel, t: float, box_radius: int, tol: float) -> KernelTable:
    if t <= SERIES_T_MAX:
        return _series_table(kernel, t, box_radius, tol)
    half = _series_doubling(kernel, t / 2.0,
                            min(_natural_radius(kernel, t / 2.0), box_radius), tol)
    full = signal.fftconvolve(half.values, half.values, mode="full")
    np.clip(full, 0.0, None, out=full)
    r_full = 2 * half.box_radius
    if r_full > box_radius:
        sl = slice(r_full - box_radius, r_full + box_radius + 1)
        full = full[(sl,) * kernel.dimension]
    elif r_full < box_radius:
        pad = box_radius - r_full
        full = np.pad(full, pad)
    return KernelTable(t=t, box_radius=box_radius, values=full,
                       lost_mass=max(0.0, 1.0 - float(full.sum())))


def _box_norm_sq(box_radius: int, d: int) -> np.ndarray:
    """|y|^2 over the box, built by broadcasting (one full-size allocation)."""
    ax = np.arange(-box_radius, box_radius + 1, dtype=float) ** 2
    sq = ax
    for i in range(1, d):
        sq = sq[..., None] + ax
    return sq


def local_limit_gap(kernel: JumpKernel, t: float, box_radius: int | None = None) -> float:
    """sup over y of |t^{d/2} q_t(y) - p_1(y / sqrt(t))|.

    The box is sized so both terms are below 1e-9 outside it, making the
    truncated supremum exact at that resolution.
    """
    if t < 1.0:
        raise ValueError("t must be >= 1")
    d = kernel.dimension
    r = box_radius if box_radius is not None else _natural_radius(kernel, t)
    _guard_box(r, d)
    table = evolve_kernel(kernel, t, r)
    sq = _box_norm_sq(r, d)
    gauss = ((2.0 * math.pi * kernel.sigma2) ** (-d / 2.0)
             * np.exp(-sq / (2.0 * kernel.sigma2 * t)))
    gap = np.abs(t ** (d / 2.0) * table.values - gauss)
    return float(gap.max())


def _guard_box(box_radius: int, d: int, limit: float = 1.6e8) -> None:
    cells = float(2 * box_radius + 1) ** d
    if cells > limit:
        raise ValueError(
            f"dense box with radius {box_radius} in d={d} needs {cells:.2g} cells; "
            "reduce the radius or dimension")


@dataclass
class GreenResult:
    value: float
    error_bound: float
    t_max: float
    tail_estimate: float

    def __float__(self):
        return self.value


def gaussian_green_tail(sigma2: float, d: int, y, t_from: float) -> float:
    """Closed-form integral of the Brownian density over s > t_from (d >= 3).

    With u = |y|^2/(2 sigma2 s) the integral becomes
    |y|^{2-d} / (2 sigma2 pi^{d/2}) * gamma_lower(d/2 - 1, |y|^2/(2 sigma2 t_from)).
    """
    y = np.asarray(y, dtype=float)
    y_sq = float(np.dot(y, y))
    a = d / 2.0 - 1.0
    if a <= 0:
        raise ValueError("only converges for d >= 3")
    if y_sq == 0.0:
        return (2.0 * math.pi * sigma2) ** (-d / 2.0) * t_from ** (-a) / a
    u0 = y_sq / (2.0 * sigma2 * t_from)
    return (y_sq ** (1.0 - d / 2.0) / (2.0 * sigma2 * math.pi ** (d / 2.0))
            * sc.gamma(a) * sc.gammainc(a, u0))


def gaussian_green(sigma2: float, d: int, y) -> float:
    """Brownian Green function: integral of the Gaussian density over all s > 0."""
    y = np.asarray(y, dtype=float)
    y_sq = float(np.dot(y, y))
    if y_sq == 0.0 or d < 3:
        raise ValueError("needs d >= 3 and y != 0")
    return y_sq ** (1.0 - d / 2.0) * sc.gamma(d / 2.0 - 1.0) / (2.0 * sigma2 * math.pi ** (d / 2.0))


def _simpson_on_nodes(f_vals_a, f_vals_m, f_vals_b, widths) -> float:
    return float(np.sum(widths / 6.0 * (f_vals_a + 4.0 * f_vals_m + f_vals_b)))


def green_function(kernel: JumpKernel, y, t_max: float | None = None,
                   rel_tol: float = 1e-6) -> GreenResult:
    """Lattice Green function: integral over s of q_s(y), for d >= 3.

    The mass up to ``t_max`` is integrated with a local Simpson rule on a
    geometric time grid, refined by node doubling until two successive passes
    agree to ``rel_tol`` relative. Beyond ``t_max`` the integrand is replaced
    by its Gaussian limit in closed form; the reported ``error_bound`` covers
    the quadrature delta plus an exponential-envelope bound on the tail swap.
    """
    d = kernel.dimension
    if d < 3:
        raise ValueError("the Green function diverges for d = 2")
    y = np.asarray(y, dtype=np.int64)
    if t_max is None:
        t_max = max(4.0e3, 40.0 * float(np.dot(y, y)) / kernel.sigma2 + 100.0)

    nn = is_nearest_neighbor(kernel)
    if nn:
        def integrand(ts):
            return qt_nn_point(kernel, ts, y)
    else:
        if d >= 4:
            raise ValueError("general-kernel quadrature uses dense boxes; "
                             "d >= 4 is supported for nearest-neighbor kernels only")
        radius = int(np.max(np.abs(y))) + kernel.support_radius + 2

        def integrand(ts):
            out = np.empty(len(ts))
            for i, s in enumerate(ts):
                r = max(radius, _natural_radius(kernel, s))
                out[i] = evolve_kernel(kernel, s, r).value(y)
            return out

    t_lo = 0.25
    n_lin, n_geo = 8, 32
    prev = None
    val = 0.0
    for _ in range(12):
        lin = np.linspace(0.0, t_lo, n_lin + 1)
        geo = np.geomspace(t_lo, t_max, n_geo + 1)
        nodes = np.concatenate([lin[:-1], geo])
        mids = 0.5 * (nodes[:-1] + nodes[1:])
        fa = integrand(nodes[:-1])
        fm = integrand(mids)
        fb = integrand(nodes[1:])
        val = _simpson_on_nodes(fa, fm, fb, np.diff(nodes))
        if prev is not None and abs(val - prev) <= rel_tol * max(abs(val), 1e-300):
            break
        prev = val
        n_lin *= 2
        n_geo *= 2

    quad_delta = abs(val - prev) if prev is not None else float("inf")
    y_float = y.astype(float)
    tail = gaussian_green_tail(kernel.sigma2, d, y_float, t_max)

    # Envelope bound on what the tail swap can hide. The flat (kappa2 = 0)
    # envelope constant is sup_t t^{d/2} q_t(0), since q_t peaks at the origin.
    kappa1 = _sup_scaled_q0(kernel, t_max)
    env_tail = kappa1 * t_max ** (1.0 - d / 2.0) / (d / 2.0 - 1.0)
    err = quad_delta + abs(env_tail - tail)
    return GreenResult(value=val + tail, error_bound=err, t_max=t_max, tail_estimate=tail)


def _sup_scaled_q0(kernel: JumpKernel, t_max: float) -> float:
    """max over a coarse grid of t^{d/2} q_t(0) (times a 5% safety factor)."""
    d = kernel.dimension
    ts = np.geomspace(0.5, max(t_max, 1.0), 40)
    if is_nearest_neighbor(kernel):
        vals = qt_nn_point(kernel, ts, np.zeros(d, dtype=int))
    else:
        vals = np.array([
            evolve_kernel(kernel, float(s), _natural_radius(kernel, float(s))).value(
                np.zeros(d, dtype=int))
            for s in ts
        ])
    return 1.05 * float(np.max(ts ** (d / 2.0) * vals))


def beta_d(kernel: JumpKernel) -> float:
    """Escape-probability constant of the rate-1 walk.

    d >= 3: the probability of never returning to the start, computed as
    1 / (expected total occupation of the origin) = 1 / G(0).

    d = 2: the walk is recurrent and the constant is the diffusive scale
    2*pi*sigma^2 that normalizes the d=2 survival and hitting asymptotics
    (it reduces to the bare 2*pi convention when sigma^2 = 1).
    """
    if kernel.dimension == 2:
        return 2.0 * math.pi * kernel.sigma2
    return 1.0 / green_function(kernel, np.zeros(kernel.dimension, dtype=int)).value


@dataclass
class BoundFit:
    """Certified exponential envelope q_t(y) <= kappa1 t^{-d/2} exp(-kappa2 |y| / sqrt(t))."""

    kappa1: float
    kappa2: float
    max_violation: float
    t_grid: tuple
    box_radius: int
    d: int

    def envelope(self, t, y_norm):
        t = np.asarray(t, dtype=float)
        return self.kappa1 * t ** (-self.d / 2.0) * np.exp(-self.kappa2 * y_norm / np.sqrt(t))


def fit_exponential_bound(kernel: JumpKernel, t_grid, box_radius: int) -> BoundFit:
    """Tightest lexicographic (kappa1, kappa2) envelope over the (t, y) grid.

    kappa1 is the smallest constant feasible for any decay rate, which pins
    it at max_t,y t^{d/2} q_t(y); kappa2 is then the largest decay rate that
    keeps every grid constraint satisfied. max_violation is recomputed and
    must be <= 0; a positive value signals a numerics bug.
    """
    t_grid = sorted(float(t) for t in t_grid)
    if not t_grid or t_grid[0] < 0.5:
        raise ValueError("envelope fitting requires t >= 1/2")
    d = kernel.dimension
    _guard_box(box_radius, d)
    norm = np.sqrt(_box_norm_sq(box_radius, d))
    kappa1 = 0.0
    kappa2 = float("inf")
    tables = []
    for t in t_grid:
        table = evolve_kernel(kernel, t, box_radius)
        tables.append(table)
        kappa1 = max(kappa1, t ** (d / 2.0) * float(table.values.max()))
    for t, table in zip(t_grid, tables):
        scaled = t ** (d / 2.0) * table.values
        # entries below ~1e-290 would overflow the ratio and never bind anyway
        mask = (norm > 0) & (scaled > 1e-290)
        ratio = np.log(kappa1 / scaled[mask]) * math.sqrt(t) / norm[mask]
        kappa2 = min(kappa2, float(ratio.min()))
    if not (kappa2 > 0.0) or not math.isfinite(kappa2):
        raise ValueError("no feasible exponential envelope on this grid")
    max_violation = -float("inf")
    for t, table in zip(t_grid, tables):
        env = kappa1 * t ** (-d / 2.0) * np.exp(-kappa2 * norm / math.sqrt(t))
        max_violation = max(max_violation, float((table.values - env).max()))
    return BoundFit(kappa1=kappa1, kappa2=kappa2, max_violation=max_violation,
                    t_grid=tuple(t_grid), box_radius=box_radius, d=d)


def psi_d(d: int, r: float) -> float:
    """Scale function: 2 ln(r v e) in d=2, r^{d-2} for d >= 3."""
    if r <= 0:
        raise ValueError("r must be positive")
    if d == 2:
        return 2.0 * math.log(max(r, math.e))
    if d >= 3:
        return r ** (d - 2)
    raise ValueError("d must be >= 2")


def phi_d(d: int, c: float) -> float:
    """Normalizing scale of the distant-point hitting probability.

    c^2 / (2 ln c) in d=2, c^2 in d=3, c^2 ln c in d=4, c^{d-2} for d >= 5.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    if d in (2, 4) and c <= 1.0:
        raise ValueError(f"phi_{d} needs c > 1 (log factor), got c={c}")
    if c <= 0:
        raise ValueError("c must be positive")
    if d == 2:
        return c * c / (2.0 * math.log(c))
    if d == 3:
        return c * c
    if d == 4:
        return c * c * math.log(c)
    return c ** (d - 2)
