"""Minimal-perturbation sign-flip search in the l1, l2 and l-inf norms on [0,1]^n.

The search bisects on a radius ``eps``.  At each radius a few first-order
steps try to flip ``sign(phi)`` inside ``{||d||_p <= eps} ∩ [0,1]^n``:
projected gradient steps for l2 and l-inf, and greedy largest-|gradient|
coordinate moves (a Frank-Wolfe step over the box-clipped l1 ball) for l1.
Every flip found is refined by bisection along the segment from ``x0``;
the reported distance is the smallest refined one, an upper bound on the
true distance to the decision boundary.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

MAX_STEPS = 2000


class DegenerateStart(ValueError):
    pass


@dataclass
class AttackRecord:
    p: float
    x0: np.ndarray
    x_adv: np.ndarray | None
    distance: float
    iterations: int
    converged: bool
    censored: bool
    phi0: float = math.nan
    phi_adv: float = math.nan
    bisection_steps: int = 0
    extra: dict = field(default_factory=dict)


def lp_norm(v, p: float) -> float:
    return float(np.linalg.norm(np.ravel(v), ord=p))


def dual_exponent(p: float) -> float:
    if p == 1:
        return math.inf
    if math.isinf(p):
        return 1.0
    return p / (p - 1.0)


def _check_p(p) -> float:
    p = float(p)
    if p not in (1.0, 2.0, math.inf):
        raise ValueError(f"norm must be 1, 2 or inf, got {p}")
    return p


def _project(d, eps, p, lo, hi):
    """A feasible point of ``{||d||_p <= eps} ∩ [lo, hi]`` near ``d``.

    For l-inf this is the exact projection.  For l2 the box clip is followed
    by a radial shrink, which stays in the box because the box contains 0.
    """
    if math.isinf(p):
        return np.clip(d, np.maximum(lo, -eps), np.minimum(hi, eps))
    d = np.clip(d, lo, hi)
    norm = np.linalg.norm(d)
    return d * (eps / norm) if norm > eps else d


def _ascent_direction(g, p):
    """Unit-``p``-norm direction maximizing ``<g, d>``."""
    if math.isinf(p):
        return np.sign(g)
    norm = np.linalg.norm(g)
    return g / norm if norm > 0 else g


def _l1_vertex(g, eps, lo, hi):
    """Maximize ``<g, d>`` over ``||d||_1 <= eps``, ``lo <= d <= hi``.

    Greedy in decreasing ``|g_i|``: each coordinate moves to its box limit in
    the direction of ``sign(g_i)`` until the l1 budget is spent.
    """
    d = np.zeros_like(g)
    room = np.where(g > 0, hi, -lo)
    order = np.argsort(-np.abs(g), kind="stable")
    budget = eps
    for i in order:
        if budget <= 0 or g[i] == 0:
            break
        step = min(room[i], budget)
        d[i] = math.copysign(step, g[i])
        budget -= step
    return d


class _Counter:
    def __init__(self, model, limit):
        self.model = model
        self.limit = limit
        self.grads = 0

    def value_and_grad(self, x):
        self.grads += 1
        return self.model.value_and_grad(x)

    @property
    def exhausted(self) -> bool:
        return self.grads >= self.limit


def _flip_at_radius(f, x0, g0, s, eps, p, lo, hi, steps):
    """Try to flip the sign within radius ``eps``; return the flipped point or None."""
    d = np.zeros_like(x0)
    g = g0
    for t in range(steps):
        if f.exhausted:
            return None
        ascent = -s * g
        if p == 1:
            vertex = _l1_vertex(ascent, eps, lo, hi)
            d = vertex if t == 0 else d + (2.0 / (t + 2)) * (vertex - d)
        else:
            step = eps if t == 0 else eps / (t + 1)
            d = _project(d + step * _ascent_direction(ascent, p), eps, p, lo, hi)
        x = x0 + d
        phi, g = f.value_and_grad(x)
        if s * phi < 0:
            return x
    return None


def _refine(model, x0, x_flip, s, tol, p):
    """Bisect ``t`` on ``x0 + t (x_flip - x0)``; returns (point, distance, steps)."""
    span = lp_norm(x_flip - x0, p)
    lo_t, hi_t = 0.0, 1.0
    steps = 0
    while (hi_t - lo_t) * span > tol:
        mid = 0.5 * (lo_t + hi_t)
        if s * model.value(x0 + mid * (x_flip - x0)) < 0:
            hi_t = mid
        else:
            lo_t = mid
        steps += 1
    x = x0 + hi_t * (x_flip - x0)
    return x, hi_t * span, steps


def boundary_search(model, x0, p, tolerance: float | None = None, rtol: float = 1e-3,
                    steps_per_radius: int = 8, max_steps: int = MAX_STEPS) -> AttackRecord:
    """Smallest-``||x - x0||_p`` sign flip of ``model`` found inside ``[0,1]^n``.

    ``model`` exposes ``value(x)`` and ``value_and_grad(x)``.  ``tolerance`` is
    the absolute stopping width of the radius and segment bisections; when
    omitted it is ``rtol`` times the first radius at which a flip was found.
    """
    p = _check_p(p)
    x0 = np.asarray(x0, dtype=float).ravel()
    if np.any(x0 < 0) or np.any(x0 > 1):
        raise ValueError("x0 must lie in [0,1]^n")
    lo_box, hi_box = -x0, 1.0 - x0
    f = _Counter(model, max_steps)
    phi0, g0 = f.value_and_grad(x0)
    if phi0 == 0:
        raise DegenerateStart("phi(x0) = 0: the start point lies on the boundary")
    s = 1.0 if phi0 > 0 else -1.0
    max_radius = lp_norm(np.maximum(x0, 1.0 - x0), p)
    dual = lp_norm(g0, dual_exponent(p))
    eps = min(abs(phi0) / dual, max_radius) if dual > 0 else max_radius

    best = None
    bisect_steps = 0

    def consider(x_flip, tol):
        nonlocal best, bisect_steps
        x, dist, k = _refine(model, x0, x_flip, s, tol, p)
        bisect_steps += k
        if best is None or dist < best[1]:
            best = (x, dist)

    flipped = []
    lo_r, hi_r = 0.0, None
    while hi_r is None and not f.exhausted:
        x_flip = _flip_at_radius(f, x0, g0, s, eps, p, lo_box, hi_box, steps_per_radius)
        if x_flip is not None:
            hi_r = eps
            flipped.append(x_flip)
        elif eps >= max_radius:
            break
        else:
            lo_r = eps
            eps = min(2.0 * eps, max_radius)

    if hi_r is None:
        return AttackRecord(p, x0, None, math.nan, f.grads, False, True, phi0)

    tol = tolerance if tolerance is not None else rtol * hi_r
    if not tol > 0:
        raise ValueError(f"tolerance must be > 0, got {tol}")
    for x_flip in flipped:
        consider(x_flip, tol)
    while hi_r - lo_r > tol and not f.exhausted:
        mid = 0.5 * (lo_r + hi_r)
        x_flip = _flip_at_radius(f, x0, g0, s, mid, p, lo_box, hi_box, steps_per_radius)
        if x_flip is None:
            lo_r = mid
        else:
            hi_r = mid
            consider(x_flip, tol)
    x_adv, dist = best
    phi_adv = model.value(x_adv)
    converged = s * phi_adv < 0 and not f.exhausted
    return AttackRecord(p, x0, x_adv, dist, f.grads, converged, False, phi0, phi_adv,
                        bisect_steps, {"radius_bracket": (lo_r, hi_r), "tolerance": tol})


def _threads() -> int:
    raw = os.environ.get("NNGP_CERT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"NNGP_CERT_THREADS must be an integer, got {raw!r}") from None


@dataclass(frozen=True)
class ScalingRow:
    n: int
    p: float
    median: float
    p45: float
    p55: float
    rel_median: float
    rel_p45: float
    rel_p55: float
    censored_count: int
    nets: int
    points: int
    seed: int


def _percentiles(values):
    if len(values) == 0:
        return (math.nan, math.nan, math.nan)
    v = np.sort(np.asarray(values, dtype=float))
    return tuple(float(q) for q in np.percentile(v, [50, 45, 55]))


def _attack_net(arch_family, widths, n, j, points_per_net, norms, seed, rtol):
    from .randnet import init_random

    arch = arch_family(n)
    net = init_random(arch, widths, (seed, n, j, 0))
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(n, j, 1)))
    out = []
    for _ in range(points_per_net):
        x0 = rng.uniform(size=arch.n_inputs)
        for p in norms:
            out.append(boundary_search(net, x0, p, rtol=rtol))
    return out


def scaling_experiment(arch_family, dims, nets_per_dim: int, points_per_net: int, seed: int,
                       widths=(256, 256, 256), norms=(1.0, 2.0, math.inf), rtol: float = 1e-3,
                       n_jobs: int | None = None):
    """Median attack distances per (n, p) over random networks and uniform start points.

    Returns ``(rows, records)`` where ``records[(n, p)]`` lists every
    :class:`AttackRecord`.  Cells whose records are all censored get NaN
    medians.
    """
    dims = [int(n) for n in dims]
    if not dims:
        raise ValueError("dims must be nonempty")
    if any(b <= a for a, b in zip(dims, dims[1:])):
        raise ValueError(f"dims must be increasing, got {dims}")
    norms = tuple(_check_p(p) for p in norms)
    jobs = [(n, j) for n in dims for j in range(nets_per_dim)]
    n_jobs = n_jobs or _threads()
    if n_jobs > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_attack_net)(arch_family, widths, n, j, points_per_net, norms, seed, rtol)
            for n, j in jobs
        )
    else:
        results = [_attack_net(arch_family, widths, n, j, points_per_net, norms, seed, rtol)
                   for n, j in jobs]
    records = {(n, p): [] for n in dims for p in norms}
    for (n, _), recs in zip(jobs, results):
        for rec in recs:
            records[(n, rec.p)].append(rec)
    rows = []
    for n in dims:
        for p in norms:
            recs = records[(n, p)]
            ok = [r for r in recs if not r.censored]
            dist = [r.distance for r in ok]
            rel = [r.distance / lp_norm(r.x0, p) for r in ok]
            rows.append(ScalingRow(n, p, *_percentiles(dist), *_percentiles(rel),
                                   len(recs) - len(ok), nets_per_dim, points_per_net, seed))
    return rows, records
