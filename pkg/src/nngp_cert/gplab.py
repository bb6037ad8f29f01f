"""Monte-Carlo checks of the probabilistic ingredients on finite point sets.

Continuum events (a boundary crossing somewhere in a ball or on a segment)
are approximated on finite grids.  A finite grid can only miss crossings,
so every estimate here under-estimates the continuum probability, which is
the safe direction when checking an upper bound.

Random streams: trials are drawn in fixed-size chunks, chunk ``i`` using the
generator seeded by ``SeedSequence(seed, spawn_key=(i,))``.  Results depend
only on ``seed`` and the chunk size, never on evaluation order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special
from scipy.stats import gennorm, qmc

from .certificate import dudley_constant
from .covering import sample_l1_ball
from .kernel import LinearKernel, as_kernel

CHUNK = 1024
MAX_REL_JITTER = 1e-6
PIVOT_FLOOR = 1e-12


class NotPSDError(np.linalg.LinAlgError):
    def __init__(self, message, eigenvalues):
        self.eigenvalues = eigenvalues
        super().__init__(message)


def _rng(seed, chunk: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk,)))


def factorize(gram: np.ndarray, max_rel_jitter: float = MAX_REL_JITTER):
    """Lower Cholesky factor of ``gram + jitter I`` with the smallest decade jitter that works.

    Jitter starts at 0 and escalates by factors of ten from ``1e-12 * max diag``
    up to ``max_rel_jitter * max diag``.  A factorization with a pivot below
    ``1e-12 * max diag`` counts as numerically singular and is retried.
    """
    gram = np.asarray(gram, dtype=float)
    scale = float(np.max(np.diag(gram))) if gram.size else 0.0
    if scale <= 0:
        if np.any(gram != 0):
            raise NotPSDError("gram has a nonpositive diagonal", np.linalg.eigvalsh(gram))
        return np.zeros_like(gram), 0.0
    eye = np.eye(len(gram))
    levels = [0.0] + [10.0**e for e in range(-12, 1 + int(round(math.log10(max_rel_jitter))))]
    for rel in levels:
        jitter = rel * scale
        try:
            L = np.linalg.cholesky(gram + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        if np.min(np.diag(L)) ** 2 >= PIVOT_FLOOR * scale:
            return L, jitter
    eig = np.linalg.eigvalsh(gram)
    raise NotPSDError(
        f"gram is not positive semidefinite within jitter cap {max_rel_jitter:g} x max diag: "
        f"smallest eigenvalue {eig[0]:.3e}, largest {eig[-1]:.3e}",
        eig,
    )


@dataclass
class GramEnsemble:
    points: np.ndarray
    gram: np.ndarray
    factor: np.ndarray
    jitter_used: float
    seed: object = None

    @property
    def sigma2(self) -> float:
        return float(np.max(np.diag(self.gram)))


@dataclass
class ConditionedEnsemble:
    anchor: int
    value: float
    mean: np.ndarray
    gram: np.ndarray


def build_ensemble(kernel, points) -> GramEnsemble:
    """Gram matrix of ``kernel`` on ``points`` and its jittered Cholesky factor."""
    k = as_kernel(kernel)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    gram = k(pts)
    gram = 0.5 * (gram + gram.T)
    L, jitter = factorize(gram)
    return GramEnsemble(pts, gram, L, jitter)


def ensemble_from_gram(gram) -> GramEnsemble:
    gram = np.asarray(gram, dtype=float)
    L, jitter = factorize(gram)
    return GramEnsemble(np.empty((len(gram), 0)), gram, L, jitter)


def _sample_chunks(factor: np.ndarray, trials: int, seed, chunk: int = CHUNK):
    m = factor.shape[0]
    for i, start in enumerate(range(0, trials, chunk)):
        k = min(chunk, trials - start)
        z = _rng(seed, i).standard_normal((k, m))
        yield z @ factor.T


def sample(ens: GramEnsemble, trials: int, seed) -> np.ndarray:
    """``trials x points`` matrix whose rows are independent draws of the process."""
    return np.concatenate(list(_sample_chunks(ens.factor, trials, seed)), axis=0)


def condition_on_anchor(ens: GramEnsemble, anchor: int, value: float) -> ConditionedEnsemble:
    """Conditional mean and covariance given the process equals ``value`` at ``anchor``."""
    K = ens.gram
    k00 = K[anchor, anchor]
    if not k00 > 0:
        raise ValueError("anchor has zero variance; cannot condition on it")
    col = K[:, anchor]
    mean = col * value / k00
    cond = K - np.outer(col, col) / k00
    cond[anchor, :] = 0.0
    cond[:, anchor] = 0.0
    mean[anchor] = value
    return ConditionedEnsemble(anchor, float(value), mean, 0.5 * (cond + cond.T))


@dataclass(frozen=True)
class Ball:
    r: float
    p: float = 1.0


@dataclass(frozen=True)
class Segment:
    v: tuple
    r: float


@dataclass
class Estimate:
    estimate: float
    stderr: float
    trials: int
    grid_size: int
    jitter: float = 0.0
    extra: dict = field(default_factory=dict)


def _lp_directions(u: np.ndarray, p: float) -> np.ndarray:
    """Map uniforms to points on the unit l^p sphere (cone measure)."""
    if math.isinf(p):
        raise ValueError("use the cube construction for p = inf")
    u = np.clip(u, 1e-12, 1 - 1e-12)
    g = gennorm.ppf(u, p)
    norms = np.sum(np.abs(g) ** p, axis=1) ** (1.0 / p)
    return g / norms[:, None]


def ball_grid(x0, r: float, p: float, grid_size: int, seed) -> np.ndarray:
    """``x0`` followed by ``grid_size`` scrambled-Sobol points in the open l^p ball.

    Half the points sit just inside the boundary sphere, where crossings
    concentrate; the rest fill the interior with radius ``r U^(1/n)``.
    """
    if not r > 0:
        raise ValueError(f"ball radius must be > 0, got {r}")
    x0 = np.asarray(x0, dtype=float).ravel()
    n = x0.size
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        u = qmc.Sobol(d=n + 1, scramble=True, seed=np.random.default_rng(seed)).random(grid_size)
    n_edge = grid_size // 2
    shrink = 1.0 - 1e-9
    if math.isinf(p):
        pts = 2.0 * u[:, :n] - 1.0
        idx = np.floor(u[:n_edge, n] * n).astype(int).clip(0, n - 1)
        pts[np.arange(n_edge), idx] = np.sign(pts[np.arange(n_edge), idx]) + (
            pts[np.arange(n_edge), idx] == 0)
        pts *= shrink
    else:
        dirs = _lp_directions(u[:, :n], p)
        radii = np.ones(grid_size)
        radii[n_edge:] = u[n_edge:, n] ** (1.0 / n)
        pts = dirs * (radii * shrink)[:, None]
    return np.vstack([x0, x0 + r * pts])


def segment_grid(x0, v, r: float, grid_size: int) -> np.ndarray:
    if not r > 0:
        raise ValueError(f"segment length must be > 0, got {r}")
    x0 = np.asarray(x0, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    v = v / np.linalg.norm(v)
    t = np.linspace(0.0, r, grid_size)
    return x0 + t[:, None] * v


def region_points(x0, region, grid_size: int, seed) -> np.ndarray:
    if isinstance(region, Ball):
        return ball_grid(x0, region.r, region.p, grid_size, seed)
    if isinstance(region, Segment):
        return segment_grid(x0, region.v, region.r, grid_size)
    raise TypeError(f"unknown region {region!r}")


def crossing_probability(kernel, x0, region, grid_size: int, trials: int, seed) -> Estimate:
    """Fraction of draws whose sign somewhere on the discretized region differs from sign at x0."""
    pts = region_points(x0, region, grid_size, seed)
    ens = build_ensemble(kernel, pts)
    hits = 0
    for vals in _sample_chunks(ens.factor, trials, seed):
        s0 = np.sign(vals[:, :1])
        hits += int(np.count_nonzero(np.any(np.sign(vals[:, 1:]) != s0, axis=1)))
    p = hits / trials
    return Estimate(p, math.sqrt(p * (1 - p) / trials), trials, grid_size, ens.jitter_used)


def _normalized_gap(k, A, B):
    """``1 - K~(a, b)`` for matched rows, with ``K~`` the variance-normalized kernel."""
    kab = k.pairs(A, B)
    s = np.sqrt(k.diag(A) * k.diag(B))
    if np.any(s <= 0):
        raise ValueError("zero variance on the segment; cannot normalize the kernel")
    return (s - kab) / s


def rice_integrand(kernel, x0, v, t: np.ndarray, h: float) -> np.ndarray:
    """``sqrt(d^2/ds dt K~(s,t))`` at ``s = t`` by central differences, Richardson-extrapolated.

    The symmetric difference quotient reduces to ``(1 - K~(t-h, t+h)) / (2 h^2)``
    because ``K~(t, t) = 1``.
    """
    k = as_kernel(kernel)
    x0 = np.asarray(x0, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    v = v / np.linalg.norm(v)

    def quotient(step):
        A = x0 + (t - step)[:, None] * v
        B = x0 + (t + step)[:, None] * v
        return _normalized_gap(k, A, B) / (2.0 * step**2)

    mixed = (4.0 * quotient(h / 2) - quotient(h)) / 3.0
    return np.sqrt(np.clip(mixed, 0.0, None))


@dataclass
class RiceReport:
    mean_count: float
    stderr: float
    rice_bound: float
    coarse_bound: float
    trials: int
    grid_size: int


def rice_bound(kernel, x0, v, r: float, grid_size: int, nodes: int = 64) -> float:
    """Expected zero count of the normalized process on the segment, by Gauss-Legendre."""
    h = r / (8.0 * grid_size)
    xs, ws = np.polynomial.legendre.leggauss(nodes)
    t = 0.5 * r * (xs + 1.0)
    vals = rice_integrand(kernel, x0, v, t, h)
    return float(0.5 * r * np.dot(ws, vals) / math.pi)


def rice_check(kernel, x0, v, r: float, grid_size: int, trials: int, seed) -> RiceReport:
    """Mean sign-change count along the segment against Rice's formula and the coarse bound."""
    k = as_kernel(kernel)
    x0 = np.asarray(x0, dtype=float).ravel()
    norm = float(np.linalg.norm(x0))
    if not 0 < r < norm:
        raise ValueError(f"need 0 < r < ||x0||_2 = {norm}, got r = {r}")
    pts = segment_grid(x0, v, r, grid_size)
    ens = build_ensemble(k, pts)
    counts = []
    for vals in _sample_chunks(ens.factor, trials, seed):
        s = np.sign(vals)
        counts.append(np.count_nonzero(s[:, 1:] != s[:, :-1], axis=1))
    counts = np.concatenate(counts).astype(float)
    coarse = 2.0 * k.M * r / (math.pi * (norm - r))
    return RiceReport(float(counts.mean()), float(counts.std(ddof=1) / math.sqrt(trials)),
                      rice_bound(k, x0, v, r, grid_size), coarse, trials, grid_size)


@dataclass
class TailRow:
    t: float
    frequency: float
    stderr: float
    bound: float
    passed: bool


@dataclass
class TailReport:
    sigma: float
    esup: float
    esup_stderr: float
    rows: list


def borell_tis_check(ens: GramEnsemble, t_values=None, trials: int = 10_000, seed=0,
                     min_trials: int = 10_000) -> TailReport:
    """Exceedance frequency of ``sup - E sup`` against ``exp(-t^2 / (2 sigma^2))``.

    ``E sup`` is replaced by its empirical mean, hence the floor on ``trials``.
    ``t_values`` defaults to ``(sigma, 2 sigma, 3 sigma)``.
    """
    if trials < min_trials:
        raise ValueError(f"borell_tis_check needs at least {min_trials} trials, got {trials}")
    sigma = math.sqrt(ens.sigma2)
    if t_values is None:
        t_values = (sigma, 2 * sigma, 3 * sigma)
    sups = np.concatenate([v.max(axis=1) for v in _sample_chunks(ens.factor, trials, seed)])
    esup = float(sups.mean())
    rows = []
    for t in t_values:
        freq = float(np.mean(sups >= esup + t))
        se = math.sqrt(freq * (1 - freq) / trials)
        bound = 1.0 if sigma == 0 else math.exp(-t * t / (2 * sigma * sigma))
        rows.append(TailRow(float(t), freq, se, bound, freq <= bound + 3 * se))
    return TailReport(sigma, esup, float(sups.std(ddof=1) / math.sqrt(trials)), rows)


def expected_max_abs_normal(n: int) -> float:
    """``E max_i |w_i|`` for ``n`` iid standard normals."""
    val, _ = integrate.quad(lambda t: 1.0 - special.erf(t / math.sqrt(2.0)) ** n, 0, np.inf,
                            epsabs=1e-12, limit=200)
    return val


@dataclass
class DudleyReport:
    n: int
    esup: float
    stderr: float
    bound: float
    einf: float


def l1_cloud(n: int, size: int, seed, include_vertices: bool = True) -> np.ndarray:
    """Points inside the open unit l^1 ball: scaled vertices ``±e_i`` plus uniform samples."""
    pts = sample_l1_ball(n, size, _rng(seed, 0))
    if include_vertices:
        verts = np.vstack([np.eye(n), -np.eye(n)]) * (1.0 - 1e-9)
        pts = np.vstack([verts, pts])
    return pts


def dudley_check(n: int, cloud_size: int, trials: int, seed, cloud=None) -> DudleyReport:
    """Empirical ``E sup_{x in cloud} w . x`` for the linear process against ``8 sqrt(2) a_n``."""
    if cloud is None:
        cloud = l1_cloud(n, cloud_size, seed)
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    if np.any(np.abs(cloud).sum(axis=1) >= 1.0):
        raise ValueError("cloud points must lie inside the open unit l^1 ball")
    sups = []
    for i, start in enumerate(range(0, trials, CHUNK)):
        k = min(CHUNK, trials - start)
        w = _rng(seed, i + 1).standard_normal((k, n))
        sups.append((w @ cloud.T).max(axis=1))
    sups = np.concatenate(sups)
    bound = 8.0 * math.sqrt(2.0) * dudley_constant(max(n, 2))
    return DudleyReport(n, float(sups.mean()), float(sups.std(ddof=1) / math.sqrt(trials)),
                        bound, expected_max_abs_normal(n))


__all__ = [
    "Ball", "Segment", "GramEnsemble", "ConditionedEnsemble", "NotPSDError", "LinearKernel",
    "build_ensemble", "ensemble_from_gram", "sample", "condition_on_anchor",
    "crossing_probability", "rice_check", "rice_bound", "borell_tis_check", "dudley_check",
    "factorize", "ball_grid", "segment_grid", "l1_cloud", "expected_max_abs_normal",
]
