"""Closed-form robustness radii and their inverse failure-probability bounds."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

SQRT_PI = math.sqrt(math.pi)


def dudley_constant(n: int) -> float:
    """``a_n = (3/4) sqrt(ln 4n) + (ln n / 2) sqrt(ln 2n)``, the entropy-integral bound."""
    if int(n) != n or n < 2:
        raise ValueError(f"dudley_constant needs an integer n >= 2, got {n!r}")
    return 0.75 * math.sqrt(math.log(4 * n)) + 0.5 * math.log(n) * math.sqrt(math.log(2 * n))


def ball_denominator(n: int) -> float:
    """``12 sqrt(ln 4n) + 8 ln n sqrt(ln 2n) + 2 sqrt(pi)``."""
    return (12.0 * math.sqrt(math.log(4 * n))
            + 8.0 * math.log(n) * math.sqrt(math.log(2 * n)) + 2.0 * SQRT_PI)


@dataclass(frozen=True)
class RobustnessCertificate:
    n: int
    delta: float
    M: float
    norm2_x0: float
    a_n: float
    r_l1: float
    r_segment: float
    r_lp: dict = field(default_factory=dict)
    tight: bool = False

    def radius(self, p: float) -> float:
        return lp_radius(self.r_l1, self.n, p)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "delta": self.delta,
            "M": self.M,
            "norm2_x0": self.norm2_x0,
            "a_n": self.a_n,
            "r_l1": self.r_l1,
            "r_segment": self.r_segment,
            "r_lp": {_p_key(p): r for p, r in self.r_lp.items()},
            "tight": self.tight,
            "ball_failure_bound": failure_prob(self.r_l1, self.norm2_x0, self.M, self.n, "ball")
            if self.r_l1 > 0 else 0.0,
            "segment_failure_bound": failure_prob(self.r_segment, self.norm2_x0, self.M,
                                                  self.n, "segment")
            if self.r_segment > 0 else 0.0,
        }


def _p_key(p) -> str:
    return "inf" if math.isinf(p) else f"{p:g}"


def lp_radius(r_l1: float, n: int, p: float) -> float:
    """Certified l^p radius from the l^1 one, using ``||v||_1 <= n^((p-1)/p) ||v||_p``."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if math.isinf(p):
        return r_l1 / n
    return r_l1 / n ** ((p - 1.0) / p)


def certify(norm2_x0: float, delta: float, M: float, n: int, p_values=(1.0, 2.0, math.inf),
            tight: bool = False) -> RobustnessCertificate:
    """Certified l^1-ball, segment and l^p radii at failure probability ``delta``.

    With ``tight=True`` the ball radius is ``||x0|| delta / (M ((16/sqrt(pi)) a_n + 1 + delta))``,
    which is the largest radius the ball failure bound admits; the default is
    the rounded-down form with denominator ``12 sqrt(ln 4n) + 8 ln n sqrt(ln 2n) + 2 sqrt(pi)``.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not M > 0:
        raise ValueError(f"M must be > 0, got {M}")
    if not norm2_x0 >= 0 or not math.isfinite(norm2_x0):
        raise ValueError(f"norm2_x0 must be finite and >= 0, got {norm2_x0}")
    a_n = dudley_constant(n)
    if norm2_x0 == 0:
        warnings.warn("x0 = 0: every certified radius degenerates to 0", RuntimeWarning,
                      stacklevel=2)
    if tight:
        r_l1 = norm2_x0 * delta / (M * (16.0 / SQRT_PI * a_n + 1.0 + delta))
    else:
        r_l1 = norm2_x0 * delta * SQRT_PI / (M * ball_denominator(n))
    r_segment = math.pi * norm2_x0 * delta / (2.0 * M + math.pi)
    r_lp = {float(p): lp_radius(r_l1, n, float(p)) for p in p_values}
    return RobustnessCertificate(int(n), float(delta), float(M), float(norm2_x0), a_n,
                                 r_l1, r_segment, r_lp, tight)


def failure_prob(r: float, norm2_x0: float, M: float, n: int, region: str = "ball") -> float:
    """Upper bound on the probability that a boundary crosses the region.

    ``region="ball"``: the l^1 ball of radius ``r``; ``"segment"``: a segment of
    length ``r``.  Vacuous regimes return 1.
    """
    if not r > 0:
        raise ValueError(f"r must be > 0, got {r}")
    if region == "ball":
        ratio = norm2_x0 / (M * r)
        if ratio <= 1.0:
            return 1.0
        return min(1.0, (16.0 / SQRT_PI * dudley_constant(n) + 1.0) / (ratio - 1.0))
    if region == "segment":
        if r >= norm2_x0:
            return 1.0
        return min(1.0, 2.0 * M * r / (math.pi * (norm2_x0 - r)))
    raise ValueError(f"region must be 'ball' or 'segment', got {region!r}")
