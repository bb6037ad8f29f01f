"""Infinite-width covariance of random ReLU networks.

Each layer maps the pixel-pair covariance of its input to that of its output.
Fields are dense ``|I| x |I|`` matrices because nonlinear layers read the
shifted pairs ``K[alpha + gamma, beta + gamma]``.  All array routines accept
an arbitrary leading batch shape so a whole row of a gram matrix is
propagated at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .arch import (
    ArchSpec,
    Flatten,
    InputConv,
    Nonlinear,
    Output,
    Pool,
    Skip,
    pool_membership,
)

CORR_TOL = 1e-12
DIAG_TOL = 1e-12


class KernelDomainError(ValueError):
    pass


def psi(t, tol: float = CORR_TOL):
    """ReLU arc-cosine correlation map ``(sqrt(1-t^2) + (pi - arccos t) t) / pi``.

    Arguments within ``tol`` of [-1, 1] are clamped; larger excursions raise.
    """
    t = np.asarray(t, dtype=float)
    if np.any(np.abs(t) > 1.0 + tol) or np.any(np.isnan(t)):
        raise KernelDomainError(f"psi argument outside [-1, 1] beyond tolerance {tol}")
    t = np.clip(t, -1.0, 1.0)
    # with phi = arccos(-t) this is (sin phi - phi cos phi) / pi; near t = -1 both
    # terms are O(phi) while the difference is O(phi^3), so small phi uses the series
    # 1 + t is exact near t = -1, where arccos(-t) would lose digits
    phi = np.where(t < 0, 2.0 * np.arcsin(np.sqrt(0.5 * (1.0 + t))), np.pi - np.arccos(t))
    out = (np.sqrt((1.0 - t) * (1.0 + t)) + phi * t) / np.pi
    small = phi < 0.5
    if np.any(small):
        f = phi[small] if phi.ndim else phi
        f2 = f * f
        term = f * f2 / 3.0
        acc = term
        for k in range(2, 10):
            # ratio of consecutive terms of sum_k (-1)^(k+1) 2k phi^(2k+1) / (2k+1)!
            term = -term * f2 * k / ((k - 1) * 2 * k * (2 * k + 1))
            acc = acc + term
        if phi.ndim:
            out[small] = acc / np.pi
        else:
            out = acc / np.pi
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class KernelField:
    """Pixel-pair covariances of layer ``layer`` for the ordered input pair (x, y)."""

    layer: int
    K_xx: np.ndarray
    K_xy: np.ndarray
    K_yy: np.ndarray

    def traced(self) -> tuple[float, float, float]:
        """Pixel-summed kernels ``(K(x,x), K(x,y), K(y,y))``."""
        return (float(np.trace(self.K_xx)), float(np.trace(self.K_xy)),
                float(np.trace(self.K_yy)))


@dataclass(frozen=True)
class SmoothnessConstants:
    C: float
    M: float
    C_trace: tuple[float, ...]
    M_trace: tuple[float, ...]


class _Plan:
    """Index arrays for one architecture: patch shifts and pooling matrices."""

    def __init__(self, arch: ArchSpec):
        self.arch = arch
        self.shifts: dict[int, np.ndarray] = {}
        self.pools: dict[int, np.ndarray] = {}
        for pos, layer in enumerate(arch.layers, 1):
            grid = arch.grids[pos - 1]
            if isinstance(layer, (InputConv, Nonlinear)):
                self.shifts[pos] = np.array(
                    [grid.shift_index(o) for o in layer.patch.offsets], dtype=np.intp
                )
            elif isinstance(layer, Pool):
                member = pool_membership(grid, layer.factors)
                S = np.zeros((grid.size, arch.grids[pos].size))
                S[np.arange(grid.size), member] = 1.0
                self.pools[pos] = S


@lru_cache(maxsize=64)
def _plan(arch: ArchSpec) -> _Plan:
    return _Plan(arch)


def _shift_sum(K: np.ndarray, perms: np.ndarray) -> np.ndarray:
    out = np.zeros_like(K)
    for perm in perms:
        out += K[..., perm[:, None], perm[None, :]]
    return out


def _relu_moment(K, da, db):
    """Gaussian ReLU moment ``E[relu(u) relu(v)]`` times 2, i.e. the field ``V``."""
    if np.any(da < -DIAG_TOL) or np.any(db < -DIAG_TOL):
        raise KernelDomainError("negative variance on a kernel field diagonal")
    s = np.sqrt(np.clip(da, 0.0, None)[..., :, None] * np.clip(db, 0.0, None)[..., None, :])
    pos = s > 0
    rho = np.zeros_like(K)
    np.divide(K, s, out=rho, where=pos)
    if np.any(np.abs(rho) > 1.0 + CORR_TOL):
        worst = float(np.max(np.abs(rho)))
        raise KernelDomainError(f"pixel correlation {worst!r} exceeds 1 beyond tolerance")
    return np.where(pos, s * psi(rho), 0.0)


def _input_gram(Xa, Xb):
    return np.einsum("...ci,...cj->...ij", Xa, Xb) / Xa.shape[-2]


def _apply(pos, layer, plan, prev, history, da, db):
    """Output field of layer ``pos`` given the previous field and its diagonals."""
    if isinstance(layer, Nonlinear):
        V = _relu_moment(prev, da, db)
        return layer.sigma_b**2 + 0.5 * layer.sigma_w**2 * _shift_sum(V, plan.shifts[pos])
    if isinstance(layer, Skip):
        return prev + history[pos - 1 - layer.k]
    if isinstance(layer, Pool):
        S = plan.pools[pos]
        return S.T @ prev @ S
    if isinstance(layer, Flatten):
        V = _relu_moment(prev, da, db)
        tr = np.trace(V, axis1=-2, axis2=-1)
        return (layer.sigma_b**2 + 0.5 * layer.sigma_w**2 * tr)[..., None, None]
    if isinstance(layer, Output):
        return prev
    raise TypeError(f"unexpected layer {layer!r}")


def _self_fields(arch: ArchSpec, X: np.ndarray) -> list[np.ndarray]:
    """Fields ``K^(l)(x, x)`` for a batch ``X`` of shape (B, C, |I|); index 0 unused."""
    plan = _plan(arch)
    first = arch.layers[0]
    G = _input_gram(X, X)
    fields = [None, first.sigma_b**2 + first.sigma_w**2 * _shift_sum(G, plan.shifts[1])]
    for pos in range(2, len(arch.layers) + 1):
        prev = fields[-1]
        d = np.diagonal(prev, axis1=-2, axis2=-1)
        fields.append(_apply(pos, arch.layer(pos), plan, prev, fields, d, d))
    return fields


def _cross_fields(arch: ArchSpec, Xa, Xb, diags_a, diags_b) -> list[np.ndarray]:
    """Fields ``K^(l)(a, b)`` using precomputed self-field diagonals."""
    plan = _plan(arch)
    first = arch.layers[0]
    G = _input_gram(Xa, Xb)
    fields = [None, first.sigma_b**2 + first.sigma_w**2 * _shift_sum(G, plan.shifts[1])]
    for pos in range(2, len(arch.layers) + 1):
        fields.append(_apply(pos, arch.layer(pos), plan, fields[-1], fields,
                             diags_a[pos - 1], diags_b[pos - 1]))
    return fields


def as_input_batch(arch: ArchSpec, points) -> np.ndarray:
    """Reshape points to (m, C, |I|); accepts (m, n), (m, C, *dims) or one point."""
    X = np.asarray(points, dtype=float)
    C, size, n = arch.input_channels, arch.input_grid.size, arch.n_inputs
    if X.ndim >= 1 and X.shape == arch.input_shape or X.shape == (n,):
        X = X.reshape(1, C, size)
    elif X.ndim == 2 and X.shape[1] == n:
        X = X.reshape(len(X), C, size)
    elif X.ndim == 1 + len(arch.input_shape) and X.shape[1:] == arch.input_shape:
        X = X.reshape(len(X), C, size)
    elif X.ndim == 3 and X.shape[1:] == (C, size):
        pass
    else:
        raise ValueError(
            f"points of shape {X.shape} do not match input shape {arch.input_shape} (n={n})"
        )
    if not np.all(np.isfinite(X)):
        raise ValueError("points contain non-finite values")
    return X


def kernel_fields(arch: ArchSpec, x, y) -> list[KernelField]:
    """Per-layer :class:`KernelField` for the pair (x, y), layers 1..L+1."""
    X = as_input_batch(arch, np.stack([np.asarray(x, float).ravel(),
                                       np.asarray(y, float).ravel()]))
    selfs = _self_fields(arch, X)
    diags = [None] + [np.diagonal(f, axis1=-2, axis2=-1) for f in selfs[1:]]
    cross = _cross_fields(arch, X[0], X[1], [None] + [d[0] for d in diags[1:]],
                          [None] + [d[1] for d in diags[1:]])
    return [KernelField(pos, selfs[pos][0], cross[pos], selfs[pos][1])
            for pos in range(1, len(arch.layers) + 1)]


def propagate_layer(field: KernelField, arch: ArchSpec, earlier=None) -> KernelField:
    """Advance ``field`` (the output of layer ``field.layer``) through the next layer.

    ``earlier`` maps layer positions to stored fields; a skip layer needs the
    field of the layer it reaches back to.  Propagating the input layer is
    not possible from a field; use :func:`input_field`.
    """
    pos = field.layer + 1
    if pos > len(arch.layers):
        raise ValueError("no layer after the output layer")
    layer = arch.layer(pos)
    expected = arch.grids[field.layer].size
    if field.K_xy.shape != (expected, expected):
        raise ValueError(
            f"field shape {field.K_xy.shape} does not match grid size {expected} of layer "
            f"{field.layer}"
        )
    plan = _plan(arch)
    history: dict[int, np.ndarray] = {}
    if isinstance(layer, Skip):
        target = pos - 1 - layer.k
        if earlier is None or target not in earlier:
            raise ValueError(f"skip layer {pos} needs the stored field of layer {target}")
        history = {target: earlier[target]}
    dx = np.diagonal(field.K_xx)
    dy = np.diagonal(field.K_yy)
    parts = []
    for K, a, b, name in ((field.K_xx, dx, dx, "K_xx"), (field.K_xy, dx, dy, "K_xy"),
                          (field.K_yy, dy, dy, "K_yy")):
        hist = {k: getattr(v, name) for k, v in history.items()}
        parts.append(_apply(pos, layer, plan, K, hist, a, b))
    return KernelField(pos, *parts)


def input_field(arch: ArchSpec, x, y) -> KernelField:
    X = as_input_batch(arch, np.stack([np.ravel(x), np.ravel(y)]).astype(float))
    plan = _plan(arch)
    first = arch.layers[0]

    def k1(a, b):
        return first.sigma_b**2 + first.sigma_w**2 * _shift_sum(_input_gram(a, b), plan.shifts[1])

    return KernelField(1, k1(X[0], X[0]), k1(X[0], X[1]), k1(X[1], X[1]))


def kernel_diag(arch: ArchSpec, points) -> np.ndarray:
    X = as_input_batch(arch, points)
    return _self_fields(arch, X)[-1][:, 0, 0].copy()


def kernel_matrix(arch: ArchSpec, points, other=None) -> np.ndarray:
    """Output-kernel matrix ``K(x_i, x_j)``; symmetric when ``other`` is omitted.

    Each entry depends only on its own pair, so the result does not depend on
    how rows are batched.
    """
    X = as_input_batch(arch, points)
    sx = _self_fields(arch, X)
    dx = [None] + [np.diagonal(f, axis1=-2, axis2=-1) for f in sx[1:]]
    if other is None:
        m = len(X)
        K = np.empty((m, m))
        for i in range(m):
            cross = _cross_fields(arch, X[i][None], X[i:], [None] + [d[i][None] for d in dx[1:]],
                                  [None] + [d[i:] for d in dx[1:]])
            row = cross[-1][:, 0, 0]
            K[i, i:] = row
            K[i:, i] = row
        return K
    Y = as_input_batch(arch, other)
    sy = _self_fields(arch, Y)
    dy = [None] + [np.diagonal(f, axis1=-2, axis2=-1) for f in sy[1:]]
    K = np.empty((len(X), len(Y)))
    for i in range(len(X)):
        cross = _cross_fields(arch, X[i][None], Y, [None] + [d[i][None] for d in dx[1:]], dy)
        K[i] = cross[-1][:, 0, 0]
    return K


def kernel_pairs(arch: ArchSpec, A, B) -> np.ndarray:
    """``K(a_i, b_i)`` for matched rows of ``A`` and ``B``."""
    XA = as_input_batch(arch, A)
    XB = as_input_batch(arch, B)
    if len(XA) != len(XB):
        raise ValueError("kernel_pairs needs the same number of points on both sides")
    da = [None] + [np.diagonal(f, axis1=-2, axis2=-1) for f in _self_fields(arch, XA)[1:]]
    db = [None] + [np.diagonal(f, axis1=-2, axis2=-1) for f in _self_fields(arch, XB)[1:]]
    return _cross_fields(arch, XA, XB, da, db)[-1][:, 0, 0].copy()


def rkhs_distance(K_xx: float, K_xy: float, K_yy: float, tol: float = 1e-9) -> float:
    """``sqrt(K_xx - 2 K_xy + K_yy)``; small negative radicands from rounding clamp to 0."""
    rad = K_xx - 2.0 * K_xy + K_yy
    scale = max(abs(K_xx), abs(K_yy), abs(K_xy), 1e-300)
    if rad < -tol * scale:
        raise KernelDomainError(f"negative squared RKHS distance {rad!r}")
    return math.sqrt(max(rad, 0.0))


def smoothness_constants(arch: ArchSpec) -> SmoothnessConstants:
    """Per-layer constants with ``sqrt(K(x,x)) >= C ||x||`` and ``d(x,y) <= M C ||x-y||``.

    The flatten layer contributes ``sigma_w / sqrt(2)``: its weights have
    variance ``sigma_w^2 / n_C`` with an unnormalized sum over pixels, so the
    pixel-summed field enters with unit weight.
    """
    n0 = arch.input_grid.size
    C = [0.0]
    M = [1.0]
    for pos, layer in enumerate(arch.layers, 1):
        grid = arch.grids[pos]
        if isinstance(layer, InputConv):
            c = layer.sigma_w * math.sqrt(len(layer.patch) / arch.input_channels)
        elif isinstance(layer, Nonlinear):
            c = layer.sigma_w * math.sqrt(len(layer.patch) / 2.0) * C[-1]
        elif isinstance(layer, Skip):
            c = math.hypot(C[-1], C[pos - 1 - layer.k])
        elif isinstance(layer, Flatten):
            c = layer.sigma_w * math.sqrt(0.5) * C[-1]
        else:
            c = C[-1]
        C.append(c)
        if isinstance(layer, (Flatten, Output)):
            M.append(math.sqrt(n0 / arch.pre_flatten_grid.size))
        else:
            M.append(math.sqrt(n0 / grid.size))
    return SmoothnessConstants(C[-1], M[-1], tuple(C[1:]), tuple(M[1:]))


class LinearKernel:
    """``K(x, y) = x . y``: the Gaussian process ``w . x`` with standard normal ``w``.

    Serves as an analytic oracle; it satisfies the smoothness bounds with C = M = 1.
    """

    C = 1.0
    M = 1.0

    def __call__(self, X, Y=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = X if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
        return X @ Y.T

    def diag(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.einsum("ij,ij->i", X, X)

    def pairs(self, A, B):
        return np.einsum("ij,ij->i", np.atleast_2d(A), np.atleast_2d(B))

    @property
    def n_inputs(self):
        return None


class ArchKernel:
    """Output kernel of an architecture as a callable ``K(X, Y)`` on flat points."""

    def __init__(self, arch: ArchSpec):
        self.arch = arch
        consts = smoothness_constants(arch)
        self.C = consts.C
        self.M = consts.M

    @property
    def n_inputs(self):
        return self.arch.n_inputs

    def __call__(self, X, Y=None):
        return kernel_matrix(self.arch, X, Y)

    def diag(self, X):
        return kernel_diag(self.arch, X)

    def pairs(self, A, B):
        return kernel_pairs(self.arch, A, B)


def as_kernel(obj):
    """Accept an :class:`ArchSpec` or an object already exposing ``__call__``/``diag``/``M``."""
    if isinstance(obj, ArchSpec):
        return ArchKernel(obj)
    if obj == "linear":
        return LinearKernel()
    if callable(obj) and hasattr(obj, "diag") and hasattr(obj, "M"):
        return obj
    raise TypeError(f"cannot interpret {obj!r} as a kernel")
