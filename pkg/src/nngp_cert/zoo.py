"""Small reference architectures used by tests, configs and the CLI."""

from __future__ import annotations

import math

from .arch import ArchSpec, build_arch

HE = math.sqrt(2.0)


def fc_doc(n: int, hidden: int = 3, sigma_w: float = HE, sigma_b: float = 0.0) -> dict:
    """Fully connected ReLU net on R^n with ``hidden`` ReLU layers."""
    if hidden < 1:
        raise ValueError("need at least one hidden layer")
    layers = [{"type": "input_conv", "sigma_w": 1.0, "sigma_b": sigma_b}]
    layers += [{"type": "nonlinear", "sigma_w": sigma_w, "sigma_b": sigma_b}
               for _ in range(hidden - 1)]
    layers += [{"type": "flatten", "sigma_w": sigma_w, "sigma_b": sigma_b}, {"type": "output"}]
    return {"input_channels": int(n), "input_dims": [1], "layers": layers}


def fc_arch(n: int, hidden: int = 3, sigma_w: float = HE, sigma_b: float = 0.0) -> ArchSpec:
    return build_arch(fc_doc(n, hidden, sigma_w, sigma_b))


def conv_doc(channels: int = 2, side: int = 4) -> dict:
    """3x3 convolutions on a periodic ``side x side`` image with one 2x2 pooling."""
    return {
        "input_channels": channels,
        "input_dims": [side, side],
        "layers": [
            {"type": "input_conv", "patch": {"box": [3, 3]}, "sigma_w": 1.0, "sigma_b": 0.1},
            {"type": "nonlinear", "patch": {"box": [3, 3]}, "sigma_w": HE, "sigma_b": 0.1},
            {"type": "pool", "factors": [2, 2]},
            {"type": "flatten", "sigma_w": HE / 2, "sigma_b": 0.0},
            {"type": "output"},
        ],
    }


def conv_arch(channels: int = 2, side: int = 4) -> ArchSpec:
    return build_arch(conv_doc(channels, side))


def skip_doc(n: int = 6) -> dict:
    """1-d periodic conv net with a residual connection over one nonlinear layer."""
    return {
        "input_channels": 1,
        "input_dims": [n],
        "layers": [
            {"type": "input_conv", "patch": {"box": [3]}, "sigma_w": 1.0},
            {"type": "nonlinear", "patch": {"box": [3]}, "sigma_w": 1.0},
            {"type": "nonlinear", "patch": None, "sigma_w": 1.0},
            {"type": "skip", "k": 1},
            {"type": "flatten", "sigma_w": HE / math.sqrt(n)},
            {"type": "output"},
        ],
    }


def skip_arch(n: int = 6) -> ArchSpec:
    return build_arch(skip_doc(n))


def reference_archs() -> dict:
    """Named architectures exercised by the test-suite and acceptance checks."""
    return {"fc": fc_arch(8), "conv": conv_arch(), "skip": skip_arch()}
