"""Jump kernels on Z^d and lattice-geometry helpers.

A kernel is a finite, symmetric, centered, isotropic step distribution with
p(0)=0. Long-range families are truncated to a finite ball and renormalized so
that every downstream computation can enumerate the support exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ISOTROPY_TOL = 1e-10
TRUNCATION_TOL = 1e-12


@dataclass(frozen=True)
class JumpKernel:
    """Finite symmetric step distribution on Z^d.

    offsets: (m, d) int array of distinct nonzero lattice vectors.
    probs:   (m,) float array, summing to 1 - truncation_mass.
    sigma2:  per-coordinate second moment, sum_y p(y) y_i^2 (same for all i).
    truncation_mass: relative mass dropped when a non-finite family was
        truncated to this support; 0 for intrinsically finite kernels.
    """

    dimension: int
    offsets: np.ndarray
    probs: np.ndarray
    sigma2: float
    truncation_mass: float = 0.0
    exp_moment_rate: float = 1.0
    exp_moment_value: float = field(default=float("nan"))

    def __post_init__(self):
        offs = np.asarray(self.offsets, dtype=np.int64)
        prb = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "offsets", offs)
        object.__setattr__(self, "probs", prb)
        if math.isnan(self.exp_moment_value):
            r = np.linalg.norm(offs, axis=1)
            object.__setattr__(
                self, "exp_moment_value",
                float(np.sum(prb * np.exp(self.exp_moment_rate * r))))
        problems = check_kernel(self)
        if problems:
            raise ValueError("invalid kernel: " + "; ".join(problems))

    @property
    def support_radius(self) -> int:
        return int(np.max(np.abs(self.offsets)))

    def second_moment_matrix(self) -> np.ndarray:
        """sum_y p(y) y_i y_j as a (d, d) matrix (brute-force summation)."""
        y = self.offsets.astype(float)
        return (y[:, :, None] * y[:, None, :] * self.probs[:, None, None]).sum(axis=0)

    def sample_offsets(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.choice(self.offsets.shape[0], size=size, p=self.probs / self.probs.sum())
        return self.offsets[idx]


def check_kernel(k: JumpKernel) -> list[str]:
    """Return a list of violated construction invariants (empty if valid)."""
    problems = []
    offs, prb = k.offsets, k.probs
    if k.dimension < 2:
        problems.append("dimension must be >= 2")
    if offs.ndim != 2 or offs.shape[1] != k.dimension:
        problems.append("offsets must have shape (m, d)")
        return problems
    if np.any(np.all(offs == 0, axis=1)):
        problems.append("zero offset present (p(0,0) must be 0)")
    if np.any(prb <= 0):
        problems.append("all probabilities must be positive")
    if abs(prb.sum() - (1.0 - k.truncation_mass)) > 1e-9:
        problems.append("probabilities must sum to 1 - truncation_mass")
    if k.truncation_mass > TRUNCATION_TOL:
        problems.append(f"truncation_mass {k.truncation_mass:g} exceeds {TRUNCATION_TOL:g}")
    # symmetry: each (y, w) must be matched by (-y, w)
    table = {tuple(o): p for o, p in zip(offs.tolist(), prb)}
    if len(table) != len(prb):
        problems.append("duplicate offsets")
    for o, p in table.items():
        q = table.get(tuple(-c for c in o))
        if q is None or abs(q - p) > 1e-12:
            problems.append("kernel is not symmetric under y -> -y")
            break
    mom = k.second_moment_matrix()
    target = k.sigma2 * np.eye(k.dimension)
    if np.max(np.abs(mom - target)) > ISOTROPY_TOL:
        problems.append("second moments are not isotropic within 1e-10")
    if not (k.sigma2 > 0):
        problems.append("sigma2 must be positive")
    if not math.isfinite(k.exp_moment_value):
        problems.append("exponential moment certificate is not finite")
    return problems


@dataclass
class ValidationReport:
    checks: dict[str, bool]
    details: dict[str, str]

    @property
    def all_passed(self) -> bool:
        return all(self.checks.values())


def validate(kernel: JumpKernel) -> ValidationReport:
    """Check the standing kernel assumptions one by one.

    Unlike construction-time checking this never raises; it reports a pass/fail
    per assumption so malformed hand-built kernels can be inspected.
    """
    checks: dict[str, bool] = {}
    details: dict[str, str] = {}
    offs, prb = kernel.offsets, kernel.probs

    zero_row = bool(np.any(np.all(offs == 0, axis=1)))
    checks["no_self_jump"] = not zero_row
    details["no_self_jump"] = "p(0,0)=0" if not zero_row else "offset 0 has positive mass"

    table = {tuple(o): p for o, p in zip(offs.tolist(), prb)}
    sym = all(
        abs(table.get(tuple(-c for c in o), -1.0) - p) <= 1e-12
        for o, p in table.items()
    )
    checks["symmetry"] = sym
    details["symmetry"] = "p(y) = p(-y) for every offset" if sym else "mismatched +/- pair"

    drift = (offs * prb[:, None]).sum(axis=0)
    centered = bool(np.max(np.abs(drift)) <= 1e-12)
    checks["centered"] = centered
    details["centered"] = f"max |sum y p(y)| = {np.max(np.abs(drift)):.2e}"

    mom = kernel.second_moment_matrix()
    dev = float(np.max(np.abs(mom - kernel.sigma2 * np.eye(kernel.dimension))))
    checks["isotropy"] = dev <= ISOTROPY_TOL
    details["isotropy"] = f"max |moment - sigma2*I| = {dev:.2e}"

    checks["irreducible"] = _support_generates_lattice(kernel)
    details["irreducible"] = "support reaches a full test box around 0"

    finite = math.isfinite(kernel.exp_moment_value)
    checks["exponential_moments"] = finite
    details["exponential_moments"] = (
        f"sum p(y) exp({kernel.exp_moment_rate:g}|y|) = {kernel.exp_moment_value:.6g}"
    )
    return ValidationReport(checks=checks, details=details)


def _support_generates_lattice(kernel: JumpKernel, box_radius: int | None = None) -> bool:
    """BFS reachability of every point of a test box using support steps."""
    d = kernel.dimension
    r = box_radius if box_radius is not None else 2 * kernel.support_radius + 1
    shape = (2 * r + 1,) * d
    seen = np.zeros(shape, dtype=bool)
    origin = (r,) * d
    seen[origin] = True
    frontier = [origin]
    steps = [tuple(o) for o in kernel.offsets.tolist()]
    while frontier:
        nxt = []
        for pt in frontier:
            for st in steps:
                q = tuple(c + s for c, s in zip(pt, st))
                if all(0 <= v <= 2 * r for v in q) and not seen[q]:
                    seen[q] = True
                    nxt.append(q)
        frontier = nxt
    return bool(seen.all())


def make_nearest_neighbor(d: int) -> JumpKernel:
    """Uniform kernel on the 2d unit vectors; sigma2 = 1/d."""
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    offsets = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        offsets[2 * i, i] = 1
        offsets[2 * i + 1, i] = -1
    probs = np.full(2 * d, 1.0 / (2 * d))
    return JumpKernel(dimension=d, offsets=offsets, probs=probs, sigma2=1.0 / d)


def make_geometric(d: int, decay: float, radius_cap: int) -> JumpKernel:
    """Long-range kernel with weights proportional to exp(-decay * |y|).

    Support is 0 < |y| <= radius_cap. The untruncated family must leave
    relative mass below 1e-12 outside the cap, otherwise the cap is too small.
    Weights are averaged over each symmetry orbit (coordinate permutations and
    sign flips) so isotropy holds to machine precision, then renormalized.
    """
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    if decay <= 0:
        raise ValueError(f"decay must be positive, got {decay}")
    if radius_cap < 1:
        raise ValueError("radius_cap must be >= 1")

    grids = np.meshgrid(*([np.arange(-radius_cap, radius_cap + 1)] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
    r = np.linalg.norm(pts, axis=1)
    keep = (r > 0) & (r <= radius_cap)
    pts, r = pts[keep], r[keep]
    w = np.exp(-decay * r)

    # Exact-orbit averaging: offsets sharing the sorted |coordinate| multiset
    # get the mean weight of their orbit, killing float asymmetries.
    orbit_key = np.sort(np.abs(pts), axis=1)
    order = np.lexsort(orbit_key.T[::-1])
    pts, r, w, orbit_key = pts[order], r[order], w[order], orbit_key[order]
    boundaries = np.any(np.diff(orbit_key, axis=0) != 0, axis=1)
    group_id = np.concatenate([[0], np.cumsum(boundaries)])
    sums = np.bincount(group_id, weights=w)
    counts = np.bincount(group_id)
    w = (sums / counts)[group_id]

    # Dropped-mass certificate: exact sum over the next shells plus an
    # integral bound beyond them.
    total_in = w.sum()
    tail = _geometric_tail_mass(d, decay, radius_cap)
    rel_dropped = tail / (total_in + tail)
    if rel_dropped >= TRUNCATION_TOL:
        raise ValueError(
            f"radius_cap={radius_cap} too small: relative dropped mass "
            f"{rel_dropped:.3e} >= {TRUNCATION_TOL:g}")

    probs = w / total_in
    sigma2 = float(np.sum(probs * pts[:, 0].astype(float) ** 2))
    kern = JumpKernel(dimension=d, offsets=pts, probs=probs, sigma2=sigma2,
                      truncation_mass=0.0, exp_moment_rate=decay / 2.0)
    mom = kern.second_moment_matrix()
    dev = float(np.max(np.abs(mom - sigma2 * np.eye(d))))
    if dev > ISOTROPY_TOL:
        raise ValueError(f"residual anisotropy {dev:.2e} above {ISOTROPY_TOL:g}")
    return kern


def _geometric_tail_mass(d: int, decay: float, radius_cap: int) -> float:
    """Upper bound on sum of exp(-decay |y|) over |y| > radius_cap.

    Counts the next 40 integer shells exactly by volume bound and closes with
    a geometric remainder.
    """
    total = 0.0
    surface = 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)
    for k in range(radius_cap, radius_cap + 40):
        # points with k < |y| <= k+1 are at most surface * (k + 1 + sqrt(d))^(d-1) * fudge
        shell = surface * (k + 1 + math.sqrt(d)) ** (d - 1) * (1 + math.sqrt(d))
        total += shell * math.exp(-decay * k)
    k = radius_cap + 40
    shell = surface * (k + 1 + math.sqrt(d)) ** (d - 1) * (1 + math.sqrt(d))
    total += shell * math.exp(-decay * k) / (1 - math.exp(-decay / 2.0))
    return total


def round_to_lattice(x, c: float) -> np.ndarray:
    """The point c*[x]_c of Z^d, where [x]_c is the point of (1/c)Z^d closest to x.

    Distance ties are broken toward the origin; any remaining tie is broken
    lexicographically on coordinates. Deterministic by construction.
    """
    if c <= 0:
        raise ValueError(f"c must be positive, got {c}")
    x = np.asarray(x, dtype=float)
    scaled = c * x  # find the integer point z minimizing |z/c - x| = |z - cx|/c
    lo = np.floor(scaled).astype(np.int64)
    d = x.size
    best = None
    for mask in range(1 << d):
        z = lo + np.array([(mask >> i) & 1 for i in range(d)], dtype=np.int64)
        dist_x = float(np.sum((z - scaled) ** 2))
        dist_0 = float(np.sum(z.astype(float) ** 2))
        key = (round(dist_x, 12), round(dist_0, 12), tuple(z.tolist()))
        if best is None or key < best[0]:
            best = (key, z)
    return best[1]
