"""Finite-width random ReLU networks: initialization, forward and reverse passes.

Activations are stored as ``(batch, channels, pixels)`` with pixels flattened
in row-major order.  ``forward`` returns the scalar output ``phi(x)`` whose
sign is the label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

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
from .kernel import as_input_batch


def _rng(seed, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class RandomNetwork:
    arch: ArchSpec
    widths: tuple
    channels: tuple
    weights: dict
    biases: dict
    seed: object = None
    _plan: dict = field(default_factory=dict, repr=False)

    @property
    def n_inputs(self) -> int:
        return self.arch.n_inputs

    def value(self, x) -> float:
        return float(forward_batch(self, np.asarray(x, float).reshape(1, -1))[0])

    def value_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        phi, g = _value_and_grad(self, x.reshape(1, -1))
        return float(phi[0]), g[0].reshape(x.shape)

    def decision_function(self, X):
        return forward_batch(self, X)


def _build_plan(arch: ArchSpec) -> dict:
    plan = {}
    for pos, layer in enumerate(arch.layers, 1):
        grid = arch.grids[pos - 1]
        if isinstance(layer, InputConv):
            plan[pos] = np.array([grid.shift_index(o) for o in layer.patch.offsets], np.intp)
        elif isinstance(layer, Nonlinear):
            neg = [tuple(-v for v in o) for o in layer.patch.offsets]
            plan[pos] = np.array([grid.shift_index(o) for o in neg], np.intp)
        elif isinstance(layer, Pool):
            S = np.zeros((grid.size, arch.grids[pos].size))
            S[np.arange(grid.size), pool_membership(grid, layer.factors)] = 1.0
            plan[pos] = S
    return plan


def _param_positions(arch: ArchSpec):
    return [pos for pos, layer in enumerate(arch.layers, 1)
            if isinstance(layer, (InputConv, Nonlinear, Flatten))]


def _resolve_widths(arch: ArchSpec, widths, output_channels: int):
    params = _param_positions(arch)
    widths = [int(w) for w in widths]
    if len(widths) == len(params) - 1:
        widths.append(int(output_channels))
    if len(widths) != len(params):
        raise ValueError(
            f"expected {len(params) - 1} hidden widths (or {len(params)} with the flatten "
            f"width), got {len(widths)}"
        )
    if any(w < 1 for w in widths):
        raise ValueError(f"widths must be positive, got {widths}")
    return params, tuple(widths), dict(zip(params, widths))


def init_random(arch: ArchSpec, widths, seed, output_channels: int = 1) -> RandomNetwork:
    """Draw weights ``N(0, sigma_w^2 / n_C^(l-1))`` and biases ``N(0, sigma_b^2)``.

    ``widths`` gives the channel count of every input_conv/nonlinear layer, and
    optionally a final entry for the flatten layer (else ``output_channels``).
    """
    params, widths, width_of = _resolve_widths(arch, widths, output_channels)
    channels = [arch.input_channels]
    for pos, layer in enumerate(arch.layers, 1):
        if pos in width_of:
            channels.append(width_of[pos])
        elif isinstance(layer, Skip):
            target = pos - 1 - layer.k
            if channels[target] != channels[pos - 1]:
                raise ValueError(
                    f"skip at layer {pos}: channel counts {channels[pos - 1]} and "
                    f"{channels[target]} differ"
                )
            channels.append(channels[pos - 1])
        elif isinstance(layer, Output):
            channels.append(1)
        else:
            channels.append(channels[pos - 1])
    weights, biases = {}, {}
    for i, pos in enumerate(params):
        layer = arch.layer(pos)
        rng = _rng(seed, i)
        c_in, c_out = channels[pos - 1], channels[pos]
        taps = arch.grids[pos - 1].size if isinstance(layer, Flatten) else len(layer.patch)
        weights[pos] = rng.standard_normal((c_out, c_in, taps)) * (layer.sigma_w / math.sqrt(c_in))
        if layer.sigma_b > 0:
            biases[pos] = rng.standard_normal(c_out) * layer.sigma_b
        else:
            biases[pos] = np.zeros(c_out)
    return RandomNetwork(arch, widths, tuple(channels), weights, biases, seed,
                         _build_plan(arch))


def _conv(W, b, h, idx):
    """``out[b,o,a] = bias[o] + sum_{c,p} W[o,c,p] h[b,c,idx[p,a]]``."""
    O, C, P = W.shape
    if P == 1 and np.array_equal(idx[0], np.arange(idx.shape[1])):
        gathered = h
    else:
        gathered = h[:, :, idx].reshape(h.shape[0], C * P, -1)
    return W.reshape(O, C * P) @ gathered + b[:, None]


def _conv_back(W, g, idx, n_pix):
    O, C, P = W.shape
    dg = W.reshape(O, C * P).T @ g
    if P == 1 and np.array_equal(idx[0], np.arange(idx.shape[1])):
        return dg
    dg = dg.reshape(g.shape[0], C, P, -1)
    out = np.zeros((g.shape[0], C, n_pix))
    for p in range(P):
        out[:, :, idx[p]] += dg[:, :, p, :]
    return out


def _forward(net: RandomNetwork, X: np.ndarray) -> list:
    arch, plan = net.arch, net._plan
    outs = [X]
    for pos, layer in enumerate(arch.layers, 1):
        prev = outs[-1]
        if isinstance(layer, InputConv):
            out = _conv(net.weights[pos], net.biases[pos], prev, plan[pos])
        elif isinstance(layer, Nonlinear):
            out = _conv(net.weights[pos], net.biases[pos], relu(prev), plan[pos])
        elif isinstance(layer, Skip):
            out = prev + outs[pos - 1 - layer.k]
        elif isinstance(layer, Pool):
            out = prev @ plan[pos]
        elif isinstance(layer, Flatten):
            W = net.weights[pos]
            h = relu(prev).reshape(len(prev), -1)
            out = (h @ W.reshape(W.shape[0], -1).T + net.biases[pos])[:, :, None]
        else:
            out = prev[:, :1, :]
        outs.append(out)
    return outs


def forward(net: RandomNetwork, x):
    """``(phi(x), [phi^(1)(x), ..., phi^(L+1)(x)])`` for one input."""
    X = as_input_batch(net.arch, x)
    if len(X) != 1:
        raise ValueError("forward takes a single input; use forward_batch")
    outs = _forward(net, X)
    return float(outs[-1][0, 0, 0]), [o[0] for o in outs[1:]]


def forward_batch(net: RandomNetwork, X) -> np.ndarray:
    return _forward(net, as_input_batch(net.arch, X))[-1][:, 0, 0]


def flatten_outputs(net: RandomNetwork, X) -> np.ndarray:
    """All flatten-layer channels ``phi^(L+1)_i(x)``, shape (batch, channels)."""
    outs = _forward(net, as_input_batch(net.arch, X))
    return outs[net.arch.flatten_position][:, :, 0]


def _value_and_grad(net: RandomNetwork, X):
    arch, plan = net.arch, net._plan
    Xb = as_input_batch(arch, X)
    outs = _forward(net, Xb)
    grads = [None] * len(outs)
    last = np.zeros_like(outs[-1])
    last[:, 0, 0] = 1.0
    grads[-1] = last

    def acc(pos, g):
        grads[pos] = g if grads[pos] is None else grads[pos] + g

    for pos in range(len(arch.layers), 0, -1):
        layer = arch.layer(pos)
        g = grads[pos]
        if g is None:
            continue
        prev = outs[pos - 1]
        if isinstance(layer, Output):
            full = np.zeros_like(prev)
            full[:, :1, :] = g
            acc(pos - 1, full)
        elif isinstance(layer, Flatten):
            W = net.weights[pos]
            dh = (g[:, :, 0] @ W.reshape(W.shape[0], -1)).reshape(prev.shape)
            acc(pos - 1, dh * (prev > 0))
        elif isinstance(layer, Nonlinear):
            dh = _conv_back(net.weights[pos], g, plan[pos], prev.shape[-1])
            acc(pos - 1, dh * (prev > 0))
        elif isinstance(layer, InputConv):
            acc(pos - 1, _conv_back(net.weights[pos], g, plan[pos], prev.shape[-1]))
        elif isinstance(layer, Skip):
            acc(pos - 1, g)
            acc(pos - 1 - layer.k, g)
        elif isinstance(layer, Pool):
            acc(pos - 1, g @ plan[pos].T)
    return outs[-1][:, 0, 0], grads[0].reshape(len(Xb), -1)


def gradient(net: RandomNetwork, x) -> np.ndarray:
    """Gradient of ``phi`` with respect to the input (ReLU derivative 0 at 0)."""
    x = np.asarray(x, dtype=float)
    return _value_and_grad(net, x.reshape(1, -1))[1][0].reshape(x.shape)


def preactivation_margin(net: RandomNetwork, x) -> float:
    """Smallest ``|pre-activation|`` feeding any ReLU, for excluding kink points."""
    outs = _forward(net, as_input_batch(net.arch, x))
    margins = []
    for pos, layer in enumerate(net.arch.layers, 1):
        if isinstance(layer, (Nonlinear, Flatten)):
            margins.append(np.min(np.abs(outs[pos - 1])))
    return float(min(margins)) if margins else math.inf


@dataclass
class AffineModel:
    """``phi(x) = w . x + b``; the closed-form test model for boundary searches."""

    w: np.ndarray
    b: float = 0.0

    def value(self, x) -> float:
        return float(np.dot(self.w, np.ravel(x)) + self.b)

    def value_and_grad(self, x):
        return self.value(x), np.asarray(self.w, dtype=float).copy()


def _fully_connected(arch: ArchSpec) -> bool:
    return all(g.size == 1 for g in arch.grids)


def _psd_sqrt(G: np.ndarray) -> np.ndarray:
    """Batched symmetric square root of PSD matrices (handles singular ones)."""
    vals, vecs = np.linalg.eigh(G)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def _fc_draws(arch: ArchSpec, widths, X, rng, count, output_channels):
    """Exact draws of the flatten outputs of ``count`` fully connected networks.

    Given the previous layer's activations ``H`` (m points x width), the next
    layer's pre-activations are iid rows of ``N(0, sigma_b^2 + sigma_w^2 H H^T / width)``,
    so each layer is sampled from that m x m covariance instead of a weight matrix.
    """
    _, _, width_of = _resolve_widths(arch, widths, output_channels)
    m = X.shape[0]
    H = np.broadcast_to(X.reshape(m, -1), (count, m, X[0].size))
    hist = {0: None}
    pre = None
    for pos, layer in enumerate(arch.layers, 1):
        if isinstance(layer, (InputConv, Nonlinear, Flatten)):
            src = H if isinstance(layer, InputConv) else relu(pre)
            c_in = src.shape[-1]
            G = layer.sigma_b**2 + layer.sigma_w**2 * (src @ np.swapaxes(src, -1, -2)) / c_in
            z = rng.standard_normal((count, width_of[pos], m))
            pre = np.swapaxes(z @ _psd_sqrt(G), -1, -2)
        elif isinstance(layer, Skip):
            pre = pre + hist[pos - 1 - layer.k]
        elif isinstance(layer, Output):
            break
        hist[pos] = pre
    return pre


def empirical_kernel(arch: ArchSpec, widths, points, draws: int, seed,
                     output_channels: int = 1, batch: int = 100) -> np.ndarray:
    """Monte-Carlo covariance ``E[phi(x_i) phi(x_j)]`` over independent random networks.

    Each draw contributes ``mean_c phi_c(x_i) phi_c(x_j)`` over the
    ``output_channels`` flatten outputs (one channel gives the plain output
    covariance).  Fully connected architectures are sampled layer by layer
    from the exact conditional Gaussian law; other architectures draw
    explicit weights.
    """
    if draws < 100:
        raise ValueError(f"empirical_kernel needs at least 100 draws, got {draws}")
    X = as_input_batch(arch, points)
    m = len(X)
    acc = np.zeros((m, m))
    if _fully_connected(arch):
        for i, start in enumerate(range(0, draws, batch)):
            count = min(batch, draws - start)
            out = _fc_draws(arch, widths, X, _rng(seed, i), count, output_channels)
            acc += np.einsum("dmc,dkc->mk", out, out) / out.shape[-1]
    else:
        for d in range(draws):
            net = init_random(arch, widths, (seed, d) if isinstance(seed, int) else seed,
                              output_channels=output_channels)
            out = flatten_outputs(net, X)
            acc += out @ out.T / out.shape[1]
    return acc / draws
