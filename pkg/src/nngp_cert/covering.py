"""Euclidean covering numbers of the open unit l^1 ball.

``lattice_cover`` enumerates ``(Z^n / m) ∩ B_1``; rounding every coordinate of
a point of the ball toward zero lands on a lattice point at squared Euclidean
distance at most ``||x||_1 / m < 1/m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.spatial import cKDTree

ENUMERATION_BUDGET = 2_000_000


def log_covering_bound(n: int, eps: float) -> float:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if eps >= 1.0:
        return 0.0
    if eps > 1.0 / math.sqrt(n):
        return math.log(2 * n) / eps**2
    return n * math.log1p(2.0 / eps)


def covering_bound(n: int, eps: float) -> float:
    """Upper bound on the number of radius-``eps`` Euclidean balls covering B_1 in R^n.

    Returns ``inf`` when the bound exceeds the float range; use
    :func:`log_covering_bound` for large ``n``.
    """
    log_val = log_covering_bound(n, eps)
    try:
        return math.exp(log_val)
    except OverflowError:
        return math.inf


def lattice_cardinality(n: int, m: int) -> int:
    return sum(2**k * math.comb(n, k) * math.comb(m - 1, k) for k in range(m))


@dataclass(frozen=True)
class LatticeCover:
    n: int
    m: int
    centers: np.ndarray

    @property
    def radius_bound(self) -> float:
        return math.sqrt(1.0 / self.m)


class EnumerationBudgetExceeded(RuntimeError):
    pass


class CoverCounterexample(AssertionError):
    def __init__(self, point, sq_dist, bound):
        self.point = point
        self.sq_dist = sq_dist
        self.bound = bound
        super().__init__(f"point at squared distance {sq_dist} > {bound} from every center")


def _integer_points(n: int, budget: int):
    """Integer vectors in Z^n with l^1 norm <= budget, lexicographic order."""
    out = []

    def rec(prefix, remaining, left):
        if left == 0:
            out.append(tuple(prefix))
            return
        for v in range(-remaining, remaining + 1):
            prefix.append(v)
            rec(prefix, remaining - abs(v), left - 1)
            prefix.pop()

    rec([], budget, n)
    return out


def lattice_cover(n: int, m: int, max_points: int = ENUMERATION_BUDGET) -> LatticeCover:
    if not 2 <= m <= n:
        raise ValueError(f"lattice_cover needs 2 <= m <= n, got n={n}, m={m}")
    expected = lattice_cardinality(n, m)
    if expected > max_points:
        raise EnumerationBudgetExceeded(
            f"{expected} lattice points for n={n}, m={m} exceed the budget {max_points}"
        )
    pts = np.array(_integer_points(n, m - 1), dtype=float) / m
    return LatticeCover(n, m, pts)


def sample_l1_ball(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in the open unit l^1 ball.

    ``n + 1`` iid exponentials normalized by their sum are uniform on the
    simplex; the first ``n`` coordinates are uniform on the solid simplex
    ``{x >= 0, sum x < 1}``, and independent signs spread them over the ball.
    """
    e = rng.exponential(size=(size, n + 1))
    x = e[:, :n] / e.sum(axis=1, keepdims=True)
    signs = rng.choice([-1.0, 1.0], size=(size, n))
    return x * signs


def verify_cover(cover: LatticeCover, samples: int, seed) -> float:
    """Largest nearest-center squared distance over ``samples`` uniform ball points.

    Raises :class:`CoverCounterexample` if any sample is farther than ``1/m``.
    """
    rng = np.random.default_rng(seed)
    tree = cKDTree(cover.centers)
    bound = 1.0 / cover.m
    worst = 0.0
    chunk = 20_000
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        pts = sample_l1_ball(cover.n, k, rng)
        dist, _ = tree.query(pts)
        sq = dist**2
        i = int(np.argmax(sq))
        if sq[i] > bound * (1.0 + 1e-12):
            raise CoverCounterexample(pts[i], float(sq[i]), bound)
        worst = max(worst, float(sq[i]))
        done += k
    return worst


def nearest_center_sq_distance(cover: LatticeCover, points) -> np.ndarray:
    dist, _ = cKDTree(cover.centers).query(np.atleast_2d(points))
    return dist**2


def dudley_integral(n: int) -> float:
    """``∫_0^1 sqrt(ln N(eps)) d eps`` with ``N`` the piecewise covering bound."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    edge = 1.0 / math.sqrt(n)

    def small(e):
        return math.sqrt(n * math.log1p(2.0 / e))

    def middle(e):
        return math.sqrt(math.log(2 * n)) / e

    # the small-eps integrand diverges like sqrt(log(1/eps)) at 0, which quad handles
    lo, err_lo = integrate.quad(small, 0.0, edge, epsabs=1e-10, epsrel=1e-10, limit=200)
    hi, err_hi = integrate.quad(middle, edge, 1.0, epsabs=1e-10, epsrel=1e-10, limit=200)
    if err_lo > 1e-8 or err_hi > 1e-8:
        raise RuntimeError(f"quadrature did not converge (errors {err_lo}, {err_hi})")
    return lo + hi
