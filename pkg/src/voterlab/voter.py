"""Forward simulation of the two-type voter model from a single 1 at the origin.

Dynamics follow the exact Gillespie scheme: events arrive at rate 2|xi|, an
occupied site u is picked uniformly, a neighbor v ~ p(u, .) is proposed, and a
fair coin decides whether v adopts u's opinion or u adopts v's. Every ordered
pair (x, y) then flips at rate p(x, y) exactly, so the scheme is statistically
identical to the Poisson-arrow construction it replaces.

Heavy batches run in the numba engine; ``step``/``VoterState`` expose the same
dynamics one event at a time for inspection and rate-matching tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _engine as eng
from .kernels import JumpKernel, round_to_lattice
from .numerics import beta_d, phi_d
from .stats import EstimateSummary, LineFit, RandomStream, fit_log_linear, ks_distance, wilson_interval


@dataclass
class VoterState:
    """Finite set of opinion-1 sites plus the simulation clock.

    ``ones`` holds coordinate tuples. Once empty the state is absorbing:
    ``step`` requires a nonempty state.
    """

    ones: set
    time: float = 0.0
    event_count: int = 0
    proposal_count: int = 0

    @classmethod
    def single_origin(cls, d: int) -> "VoterState":
        return cls(ones={(0,) * d})


def step(state: VoterState, kernel: JumpKernel, rng: np.random.Generator) -> VoterState:
    """One Gillespie proposal: advances time, may flip one site in place."""
    k = len(state.ones)
    if k == 0:
        raise ValueError("step requires a nonempty state (extinction is absorbing)")
    state.time += rng.exponential() / (2.0 * k)
    state.proposal_count += 1
    ones_list = list(state.ones)
    u = ones_list[int(rng.random() * k)]
    off = kernel.offsets[_sample_offset_index(kernel, rng)]
    v = tuple(int(a) + int(b) for a, b in zip(u, off))
    if rng.random() < 0.5:
        # v adopts u's opinion (1)
        if v not in state.ones:
            state.ones.add(v)
            state.event_count += 1
    else:
        # u adopts v's opinion
        if v not in state.ones:
            state.ones.remove(u)
            state.event_count += 1
    return state


def _sample_offset_index(kernel: JumpKernel, rng: np.random.Generator) -> int:
    accept, alias = eng.build_alias(kernel.probs)
    f = rng.random() * len(accept)
    j = int(f)
    if f - j >= accept[j]:
        j = int(alias[j])
    return j


class _Prepared:
    """Packed jump tables for the engine, built once per kernel+dimension."""

    def __init__(self, kernel: JumpKernel):
        self.kernel = kernel
        self.d = kernel.dimension
        self.bits, self.off = eng.packing_for(self.d)
        self.deltas = eng.pack_deltas(kernel.offsets, self.bits)
        self.accept, self.alias = eng.build_alias(kernel.probs)
        self.zero_key = eng.pack_point((0,) * self.d, self.bits, self.off)

    def key(self, coords) -> np.int64:
        return eng.pack_point(coords, self.bits, self.off)

    def guard(self, t_cap: float, start_radius: float = 0.0) -> None:
        eng.check_displacement_budget(self.d, self.kernel.sigma2, t_cap,
                                      start_radius, self.kernel.support_radius)


_PREP_CACHE: dict = {}


def prepare(kernel: JumpKernel) -> _Prepared:
    key = (kernel.dimension, kernel.offsets.tobytes(), kernel.probs.tobytes())
    if key not in _PREP_CACHE:
        _PREP_CACHE[key] = _Prepared(kernel)
    return _PREP_CACHE[key]


@dataclass
class TrajectoryRecord:
    extinction_time: float | None  # None when censored at the cap
    censored: bool
    max_radius: float
    hit_target: bool
    first_hit_time: float | None
    occupation_target: float
    mass_samples: list  # (t, |xi_t|) pairs at requested probe times
    events: int


def run_to_extinction(kernel: JumpKernel, target=None, probes=(), time_cap: float = 1e4,
                      rng: RandomStream | None = None, stop_on_hit: bool = False,
                      initial=None) -> TrajectoryRecord:
    """Simulate one trajectory until extinction or ``time_cap``.

    Censored runs are flagged, never silently merged into hit statistics.
    ``initial`` defaults to a single 1 at the origin.
    """
    if time_cap <= 0:
        raise ValueError("time_cap must be positive")
    prep = prepare(kernel)
    init = [(0,) * prep.d] if initial is None else list(initial)
    start_radius = max((math.dist(p, (0,) * prep.d) for p in init), default=0.0)
    prep.guard(time_cap, start_radius)
    init_keys = np.array([prep.key(p) for p in init], dtype=np.int64)
    target_key = np.int64(-2) if target is None else prep.key(np.asarray(target, dtype=np.int64))
    probes_arr = np.asarray(sorted(probes), dtype=np.float64)
    gen = (rng or RandomStream(0)).generator()
    scratch = eng.make_scratch()
    probe_mass = np.zeros(len(probes_arr), dtype=np.int64)
    t, alive, hit, first_hit, occ, max_r2, events, overflow = eng.voter_single_run(
        gen, prep.deltas, prep.accept, prep.alias, init_keys,
        target_key, probes_arr, time_cap, stop_on_hit,
        prep.d, prep.bits, prep.off, True, *scratch, probe_mass)
    if overflow:
        raise RuntimeError("site table overflow; raise the scratch size")
    return TrajectoryRecord(
        extinction_time=None if alive else t,
        censored=bool(alive),
        max_radius=math.sqrt(max_r2),
        hit_target=bool(hit),
        first_hit_time=first_hit if hit else None,
        occupation_target=occ,
        mass_samples=list(zip(probes_arr.tolist(), probe_mass.tolist())),
        events=int(events),
    )


def _batched(n: int, batch: int):
    done = 0
    while done < n:
        cur = min(batch, n - done)
        yield done, cur
        done += cur


def estimate_survival(kernel: JumpKernel, t_grid, n: int, rng: RandomStream,
                      with_mass: bool = False):
    """Survival probability (and optionally mass moments) at each grid time.

    One pass of n independent runs shared across all grid times. Returns a
    list of (t, EstimateSummary) for alive indicators; with ``with_mass`` a
    second list with summaries of |xi_t| (extinct runs count as mass 0).
    """
    if n < 1000:
        raise ValueError("survival estimation needs n >= 1000")
    prep = prepare(kernel)
    probes = np.asarray(sorted(float(t) for t in t_grid), dtype=np.float64)
    prep.guard(probes[-1])
    scratch = eng.make_scratch()
    alive = np.zeros(len(probes), dtype=np.int64)
    mass_sum = np.zeros(len(probes))
    mass_sq = np.zeros(len(probes))
    for b, (start, cur) in enumerate(_batched(n, 1 << 20)):
        gen = rng.substream(b).generator()
        a, ms, mq, ovf = eng.survival_batch(
            gen, prep.deltas, prep.accept, prep.alias, prep.zero_key, probes, cur, *scratch)
        if ovf:
            raise RuntimeError("site table overflow during survival batch")
        alive += a
        mass_sum += ms
        mass_sq += mq
    out = [(float(t), EstimateSummary.from_bernoulli(int(a), n, seed_fingerprint=rng.fingerprint))
           for t, a in zip(probes, alive)]
    if not with_mass:
        return out
    mass_out = []
    for i, t in enumerate(probes):
        mean = mass_sum[i] / n
        m2 = mass_sq[i] - n * mean * mean
        s = EstimateSummary(n=n, mean=float(mean), m2=float(max(m2, 0.0)),
                            seed_fingerprint=rng.fingerprint)
        mass_out.append((float(t), s))
    return out, mass_out


def occupancy_probabilities(kernel: JumpKernel, probes, box_radius: int, n: int,
                            rng: RandomStream):
    """P(y in xi_t) for every |y|_inf <= box_radius and every probe time.

    Returns (probes, counts, alive_counts): counts has shape
    (n_probes,) + (2R+1,)*d and counts occupancy events over n runs.
    """
    prep = prepare(kernel)
    probes_arr = np.asarray(sorted(float(t) for t in probes), dtype=np.float64)
    prep.guard(probes_arr[-1])
    d = prep.d
    side = 2 * box_radius + 1
    counts = np.zeros((len(probes_arr), side ** d), dtype=np.int64)
    alive = np.zeros(len(probes_arr), dtype=np.int64)
    scratch = eng.make_scratch()
    for b, (start, cur) in enumerate(_batched(n, 1 << 20)):
        gen = rng.substream(b).generator()
        cts, al = eng.duality_batch(
            gen, prep.deltas, prep.accept, prep.alias, prep.zero_key, probes_arr,
            cur, box_radius, d, prep.bits, prep.off, *scratch)
        counts += cts
        alive += al
    return probes_arr, counts.reshape((len(probes_arr),) + (side,) * d), alive


@dataclass
class HittingReport:
    """Distant-point hitting estimate with its scaling-limit comparison."""

    target: tuple
    c: float
    n: int
    hits: int
    censored_alive: int  # alive & unhit at the cap: possible late hits
    p_hat: float
    ci: tuple
    scaled: float                 # phi_d(c) * p_hat
    scaled_ci: tuple
    theory_constant: float | None  # (2 sigma^2 / beta_d)(2 - d/2)|x|^{-2}, d in {2,3}
    time_cap: float
    mean_first_hit: float | None


def estimate_hitting(kernel: JumpKernel, x, c: float, n: int, rng: RandomStream,
                     time_cap_factor: float = 64.0) -> HittingReport:
    """P(target ever flips to 1) for target = c[x]_c, with Wilson CI.

    Runs stop at extinction, first hit, or the safety cap time_cap_factor*c^2.
    Replicas alive and unhit at the cap are counted separately: they bound the
    possible late-hit undercount and are never folded into the hit count.
    """
    if c < 1:
        raise ValueError("c must be >= 1")
    prep = prepare(kernel)
    x = np.asarray(x, dtype=float)
    target = round_to_lattice(x, c)
    t_cap = time_cap_factor * c * c
    prep.guard(t_cap)
    target_key = prep.key(target)

    if np.all(target == 0):
        # target is the origin: occupied at time zero with certainty
        return HittingReport(target=tuple(target.tolist()), c=c, n=n, hits=n,
                             censored_alive=0, p_hat=1.0, ci=(1.0, 1.0),
                             scaled=float("nan"), scaled_ci=(float("nan"),) * 2,
                             theory_constant=None, time_cap=t_cap, mean_first_hit=0.0)

    hits = 0
    censored = 0
    sum_fh = 0.0
    scratch = eng.make_scratch()
    for b, (start, cur) in enumerate(_batched(n, 1 << 20)):
        gen = rng.substream(b).generator()
        h, cen, sfh, _ev = eng.hitting_batch(
            gen, prep.deltas, prep.accept, prep.alias, prep.zero_key, target_key,
            t_cap, cur, *scratch)
        hits += h
        censored += cen
        sum_fh += sfh
    p_hat = hits / n
    ci = wilson_interval(hits, n)
    d = prep.d
    phi = phi_d(d, c)
    theory = None
    if d in (2, 3):
        theory = (2.0 * kernel.sigma2 / beta_d(kernel)) * (2.0 - d / 2.0) / float(x @ x)
    return HittingReport(
        target=tuple(int(v) for v in target), c=c, n=n, hits=hits,
        censored_alive=censored, p_hat=p_hat, ci=ci,
        scaled=phi * p_hat, scaled_ci=(phi * ci[0], phi * ci[1]),
        theory_constant=theory, time_cap=t_cap,
        mean_first_hit=(sum_fh / hits) if hits else None)


@dataclass
class KSReport:
    t: float
    n_surviving: int
    attempts: int
    p_hat: float
    ks_distance: float
    mean_scaled_mass: float  # mean of p_hat * |xi_t| over survivors (Exp(1) -> 1)


def conditioned_mass_law(kernel: JumpKernel, t: float, n_surviving: int,
                         rng: RandomStream, attempt_cap: int | None = None) -> KSReport:
    """KS distance between the law of p_t*|xi_t| among survivors and Exp(1).

    Straight rejection: batches run until ``n_surviving`` survivors are
    collected or the attempt cap trips. p_t is estimated from the same runs.
    """
    prep = prepare(kernel)
    prep.guard(t)
    if attempt_cap is None:
        attempt_cap = max(1_000_000, 2000 * n_surviving)
    scratch = eng.make_scratch()
    masses: list[int] = []
    attempts = 0
    survivors = 0
    batch_size = max(4 * n_surviving, 20_000)
    b = 0
    while survivors < n_surviving and attempts < attempt_cap:
        cur = min(batch_size, attempt_cap - attempts)
        gen = rng.substream(b).generator()
        out = eng.mass_at_time_batch(
            gen, prep.deltas, prep.accept, prep.alias, prep.zero_key, t, cur, *scratch)
        attempts += cur
        alive = out[out > 0]
        survivors += alive.size
        masses.extend(alive.tolist())
        b += 1
    if survivors < n_surviving:
        raise RuntimeError(
            f"attempt cap {attempt_cap} reached with only {survivors} survivors")
    p_hat = survivors / attempts
    if p_hat >= 0.5:
        raise ValueError(f"t={t} too small: survival {p_hat:.2f} >= 0.5, the "
                         "conditioned law is far from its limit")
    samples = p_hat * np.array(masses[:n_surviving], dtype=float)
    dist = ks_distance(samples, lambda x: 1.0 - np.exp(-x))
    return KSReport(t=t, n_surviving=n_surviving, attempts=attempts, p_hat=p_hat,
                    ks_distance=dist, mean_scaled_mass=float(samples.mean()))


@dataclass
class TailReport:
    alpha: float
    a_grid: tuple
    n_conditioned: int
    attempts: int
    cond_freq: tuple           # P*_alpha(sup radius > A sqrt(alpha)) per A
    uncond_freq: tuple         # same event without conditioning
    slope_fit: LineFit | None  # OLS of log cond_freq against A
    censored_cells: tuple      # A values with zero conditioned exceedances


def escape_tail(kernel: JumpKernel, alpha: float, A_grid, n: int,
                rng: RandomStream, attempt_cap: int | None = None) -> TailReport:
    """Conditioned escape frequencies P*_alpha(sup_{t<=2a} sup_{x in xi} |x| > A sqrt(a)).

    Collects n survivors-at-alpha by rejection; the exceedance radius sweep is
    shared across the A grid. The log-frequency slope over A is fitted by OLS
    with censored (zero-count) cells excluded.
    """
    if alpha <= 1:
        raise ValueError("alpha must exceed 1")
    prep = prepare(kernel)
    prep.guard(2.0 * alpha)
    a_grid = sorted(float(a) for a in A_grid)
    radii_sq = np.array([(a * math.sqrt(alpha)) ** 2 for a in a_grid])
    if attempt_cap is None:
        attempt_cap = max(2_000_000, 400 * n)
    scratch = eng.make_scratch()
    gen = rng.generator()
    cond, uncond, n_cond, attempts = eng.escape_radius_batch(
        gen, prep.deltas, prep.accept, prep.alias, prep.zero_key, alpha,
        radii_sq, n, attempt_cap, prep.d, prep.bits, prep.off, *scratch)
    if n_cond < n:
        raise RuntimeError(f"attempt cap reached with {n_cond}/{n} conditioned samples")
    cond_freq = cond / n_cond
    uncond_freq = uncond / attempts
    pts = [(a, math.log(f) if f > 0 else -math.inf) for a, f in zip(a_grid, cond_freq)]
    censored = tuple(a for a, f in zip(a_grid, cond_freq) if f == 0)
    try:
        fit = fit_log_linear(pts)
    except ValueError:
        fit = None
    return TailReport(alpha=alpha, a_grid=tuple(a_grid), n_conditioned=int(n_cond),
                      attempts=int(attempts), cond_freq=tuple(cond_freq),
                      uncond_freq=tuple(uncond_freq), slope_fit=fit,
                      censored_cells=censored)


def annulus_sites(d: int, u: float, count: int) -> np.ndarray:
    """First ``count`` lattice points of the open annulus u/4 < |y| < 2u.

    Deterministic inside-out fill: sorted by |y|^2, ties lexicographic.
    Raises when the annulus holds fewer than ``count`` points.
    """
    r_out = 2.0 * u
    lim = int(math.floor(r_out)) + 1
    axes = [np.arange(-lim, lim + 1)] * d
    grid = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grid], axis=1)
    norm_sq = (pts.astype(float) ** 2).sum(axis=1)
    inner, outer = (u / 4.0) ** 2, (2.0 * u) ** 2
    keep = (norm_sq > inner) & (norm_sq < outer)
    pts, norm_sq = pts[keep], norm_sq[keep]
    if pts.shape[0] < count:
        raise ValueError(
            f"annulus u/4 < |y| < 2u at u={u} holds {pts.shape[0]} sites < {count}")
    order = np.lexsort(tuple(pts[:, i] for i in reversed(range(d))) + (norm_sq,))
    return pts[order[:count]]


def annulus_hitting(kernel: JumpKernel, u: float, M: float, rng: RandomStream,
                    n: int, time_cap: float | None = None) -> EstimateSummary:
    """Frequency that 0 is ever held by opinion 1, starting from an annulus set.

    The initial set is ceil(M * phi_d(u)) sites placed deterministically in
    Z^d intersected with the open annulus u/4 < |y| < 2u.
    """
    d = kernel.dimension
    if d not in (2, 3):
        raise ValueError("annulus experiment is defined for d in {2, 3}")
    if u < 8:
        raise ValueError("u must be at least 8")
    count = math.ceil(M * phi_d(d, u))
    prep = prepare(kernel)
    if count == 0:
        return EstimateSummary.from_bernoulli(0, n, seed_fingerprint=rng.fingerprint)
    sites = annulus_sites(d, u, count)
    if time_cap is None:
        time_cap = 64.0 * u * u + 16.0 * count
    prep.guard(time_cap, start_radius=2.0 * u)
    init_keys = np.array([prep.key(p) for p in sites], dtype=np.int64)
    table_bits = 20
    while (1 << (table_bits - 1)) < 64 * count:
        table_bits += 1
    scratch = eng.make_scratch(table_bits)
    gen = rng.generator()
    hits, censored = eng.annulus_batch(
        gen, prep.deltas, prep.accept, prep.alias, init_keys, prep.zero_key,
        time_cap, n, *scratch)
    summary = EstimateSummary.from_bernoulli(int(hits), n, seed_fingerprint=rng.fingerprint)
    return summary
