"""Architecture description for random ReLU networks on periodic pixel grids.

An architecture is a sequence of layers acting on tensors of shape
``(channels, *grid)``.  Pixels live on a torus, so every shift wraps around
each grid dimension.  Layer positions are 1-based: layer ``l`` produces
``phi^(l)`` and position 0 is the raw input.

The document format (JSON or YAML) is described in ``docs/arch_schema.md``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import yaml


class ArchError(ValueError):
    """Raised when an architecture document is malformed or violates a layer rule.

    ``violations`` lists every problem found, one human-readable string each.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class PixelGrid:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d < 1 for d in dims):
            raise ArchError(f"grid dims must be positive integers, got {self.dims!r}")
        object.__setattr__(self, "dims", dims)

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def coords(self):
        """All pixel coordinates in C (row-major) order, matching flat indices."""
        return list(itertools.product(*(range(d) for d in self.dims)))

    def shift_index(self, offset) -> "list[int]":
        """Flat index of ``alpha + offset`` for every flat pixel index ``alpha``."""
        out = []
        for c in self.coords():
            shifted = [(ci + oi) % d for ci, oi, d in zip(c, offset, self.dims)]
            flat = 0
            for s, d in zip(shifted, self.dims):
                flat = flat * d + s
            out.append(flat)
        return out


def _centered(o: int, h: int) -> int:
    r = o % h
    return r - h if r > h // 2 else r


@dataclass(frozen=True)
class Patch:
    """Set of integer offsets on a torus; stored centered and sorted."""

    offsets: tuple[tuple[int, ...], ...]

    @classmethod
    def on_grid(cls, offsets, grid: PixelGrid) -> "Patch":
        offs = [tuple(int(v) for v in o) for o in offsets]
        if not offs:
            raise ArchError("patch must be nonempty")
        for o in offs:
            if len(o) != grid.ndim:
                raise ArchError(
                    f"patch offset {o} has {len(o)} coordinates but the grid has {grid.ndim}"
                )
        canon = [tuple(_centered(v, h) for v, h in zip(o, grid.dims)) for o in offs]
        if len(set(canon)) != len(canon):
            raise ArchError(
                f"patch offsets {offs} collide on the periodic grid {grid.dims}"
            )
        neg = {tuple(_centered(-v, h) for v, h in zip(o, grid.dims)) for o in canon}
        if neg != set(canon):
            raise ArchError(f"patch {offs} is not symmetric under negation (-P != P)")
        return cls(tuple(sorted(canon)))

    @classmethod
    def box(cls, sizes, grid: PixelGrid) -> "Patch":
        """Centered box patch, e.g. ``sizes=(3, 3)`` for the usual 3x3 filter."""
        if any(s % 2 == 0 or s < 1 for s in sizes):
            raise ArchError(f"box patch sizes must be odd and positive, got {sizes}")
        ranges = [range(-(s // 2), s // 2 + 1) for s in sizes]
        return cls.on_grid(list(itertools.product(*ranges)), grid)

    def __len__(self) -> int:
        return len(self.offsets)


@dataclass(frozen=True)
class InputConv:
    patch: Patch
    sigma_w: float
    sigma_b: float = 0.0
    kind = "input_conv"


@dataclass(frozen=True)
class Nonlinear:
    patch: Patch
    sigma_w: float
    sigma_b: float = 0.0
    kind = "nonlinear"


@dataclass(frozen=True)
class Skip:
    k: int
    kind = "skip"


@dataclass(frozen=True)
class Pool:
    factors: tuple[int, ...]
    kind = "pool"


@dataclass(frozen=True)
class Flatten:
    sigma_w: float
    sigma_b: float = 0.0
    kind = "flatten"


@dataclass(frozen=True)
class Output:
    kind = "output"


LayerSpec = Union[InputConv, Nonlinear, Skip, Pool, Flatten, Output]
PARAMETERIZED = (InputConv, Nonlinear, Flatten)


@dataclass(frozen=True)
class ArchSpec:
    input_channels: int
    input_grid: PixelGrid
    layers: tuple[LayerSpec, ...]
    grids: tuple[PixelGrid, ...] = field(compare=False, repr=False)

    @property
    def n_inputs(self) -> int:
        """Input dimension ``n = n_C^(0) |I^(0)|``."""
        return self.input_channels * self.input_grid.size

    @property
    def flatten_position(self) -> int:
        return next(i for i, layer in enumerate(self.layers, 1) if isinstance(layer, Flatten))

    @property
    def pre_flatten_grid(self) -> PixelGrid:
        """Grid ``I^(L_f)`` of the layer feeding the flatten layer."""
        return self.grids[self.flatten_position - 1]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.input_channels,) + self.input_grid.dims

    def layer(self, position: int) -> LayerSpec:
        return self.layers[position - 1]


def _as_float(value, name, errors, positive=False):
    try:
        v = float(value)
    except (TypeError, ValueError):
        errors.append(f"{name}: expected a number, got {value!r}")
        return None
    if not math.isfinite(v):
        errors.append(f"{name}: must be finite")
    elif positive and v <= 0:
        errors.append(f"{name}: must be > 0, got {v}")
    elif not positive and v < 0:
        errors.append(f"{name}: must be >= 0, got {v}")
    return v


def _parse_patch(spec, grid: PixelGrid, where: str, errors):
    try:
        if spec is None:
            return Patch.on_grid([(0,) * grid.ndim], grid)
        if isinstance(spec, dict):
            if set(spec) == {"box"}:
                return Patch.box(tuple(spec["box"]), grid)
            if set(spec) == {"offsets"}:
                return Patch.on_grid(spec["offsets"], grid)
            errors.append(f"{where}.patch: expected {{'box': [...]}} or {{'offsets': [...]}}")
            return None
        return Patch.on_grid(spec, grid)
    except ArchError as exc:
        errors.extend(f"{where}.patch: {v}" for v in exc.violations)
    except (TypeError, ValueError) as exc:
        errors.append(f"{where}.patch: {exc}")
    return None


def build_arch(doc: dict) -> ArchSpec:
    """Validate a parsed architecture document and return an :class:`ArchSpec`.

    All violations are collected and raised together as one :class:`ArchError`.
    """
    errors: list[str] = []
    if not isinstance(doc, dict):
        raise ArchError("document: expected a mapping at the top level")
    unknown = set(doc) - {"input_channels", "input_dims", "layers"}
    if unknown:
        errors.append(f"document: unknown fields {sorted(unknown)}")
    for key in ("input_channels", "input_dims", "layers"):
        if key not in doc:
            errors.append(f"{key}: missing required field")
    if errors:
        raise ArchError(errors)

    channels = doc["input_channels"]
    if not isinstance(channels, int) or isinstance(channels, bool) or channels < 1:
        errors.append(f"input_channels: expected a positive integer, got {channels!r}")
    try:
        grid = PixelGrid(tuple(doc["input_dims"]))
    except (ArchError, TypeError, ValueError) as exc:
        raise ArchError(errors + [f"input_dims: {exc}"]) from None
    raw_layers = doc["layers"]
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ArchError(errors + ["layers: expected a nonempty list"])

    layers: list[LayerSpec] = []
    grids = [grid]
    for pos, raw in enumerate(raw_layers, 1):
        where = f"layers[{pos - 1}]"
        cur = grids[-1]
        if not isinstance(raw, dict) or "type" not in raw:
            errors.append(f"{where}: expected a mapping with a 'type' field")
            raise ArchError(errors)
        kind = raw["type"]
        allowed = {
            "input_conv": {"patch", "sigma_w", "sigma_b"},
            "nonlinear": {"patch", "sigma_w", "sigma_b"},
            "skip": {"k"},
            "pool": {"factors"},
            "flatten": {"sigma_w", "sigma_b"},
            "output": set(),
        }
        if kind not in allowed:
            errors.append(f"{where}.type: unknown layer type {kind!r}")
            raise ArchError(errors)
        extra = set(raw) - allowed[kind] - {"type"}
        if extra:
            errors.append(f"{where}: unknown fields {sorted(extra)} for {kind}")

        if kind in ("input_conv", "nonlinear", "flatten"):
            sw = _as_float(raw.get("sigma_w", 1.0), f"{where}.sigma_w", errors, positive=True)
            sb = _as_float(raw.get("sigma_b", 0.0), f"{where}.sigma_b", errors)
        if kind in ("input_conv", "nonlinear"):
            patch = _parse_patch(raw.get("patch"), cur, where, errors)
            cls = InputConv if kind == "input_conv" else Nonlinear
            layers.append(cls(patch, sw, sb))
            grids.append(cur)
        elif kind == "skip":
            k = raw.get("k")
            if not isinstance(k, int) or isinstance(k, bool):
                errors.append(f"{where}.k: expected an integer gap, got {k!r}")
                k = 0
            layers.append(Skip(k))
            grids.append(cur)
        elif kind == "pool":
            factors = raw.get("factors")
            if not isinstance(factors, list) or len(factors) != cur.ndim:
                errors.append(f"{where}.factors: expected {cur.ndim} integers")
                raise ArchError(errors)
            factors = tuple(int(f) for f in factors)
            bad = [(f, h) for f, h in zip(factors, cur.dims) if f < 1 or h % f]
            if bad:
                errors.append(
                    f"{where}.factors: pool factor must divide the grid extent, got "
                    f"factors {factors} for grid {cur.dims}"
                )
                raise ArchError(errors)
            layers.append(Pool(factors))
            grids.append(PixelGrid(tuple(h // f for h, f in zip(cur.dims, factors))))
        elif kind == "flatten":
            layers.append(Flatten(sw, sb))
            grids.append(PixelGrid((1,)))
        else:
            layers.append(Output())
            grids.append(grids[-1])

    errors.extend(_structural_violations(layers, grids))
    if errors:
        raise ArchError(errors)
    return ArchSpec(channels, grid, tuple(layers), tuple(grids))


def _structural_violations(layers, grids) -> list[str]:
    errors = []
    if not isinstance(layers[0], InputConv):
        errors.append("layers[0]: the first layer must be input_conv")
    for pos, layer in enumerate(layers, 1):
        where = f"layers[{pos - 1}]"
        if pos > 1 and isinstance(layer, InputConv):
            errors.append(f"{where}: input_conv is only allowed as the first layer")
        if isinstance(layer, Pool):
            if not isinstance(layers[pos - 2], Nonlinear):
                errors.append(
                    f"{where}: a pooling layer must be immediately preceded by a "
                    "nonlinear convolutional layer"
                )
        if isinstance(layer, Skip):
            l = pos - 1
            if not 1 <= layer.k <= l - 2:
                errors.append(
                    f"{where}.k: skip gap must satisfy 1 <= k <= l-2 = {l - 2} "
                    f"at position {pos}, got {layer.k}"
                )
            else:
                if not isinstance(layers[l - 1], Nonlinear):
                    errors.append(
                        f"{where}: the layer before a skip must be convolutional or fully connected"
                    )
                if grids[l - layer.k] != grids[l]:
                    errors.append(
                        f"{where}: skip target layer {l - layer.k} has grid "
                        f"{grids[l - layer.k].dims}, expected {grids[l].dims}"
                    )
    flats = [i for i, layer in enumerate(layers) if isinstance(layer, Flatten)]
    outs = [i for i, layer in enumerate(layers) if isinstance(layer, Output)]
    if len(flats) != 1:
        errors.append(f"layers: exactly one flatten layer is required, found {len(flats)}")
    if outs != [len(layers) - 1]:
        errors.append("layers: exactly one output layer is required, and it must be last")
    if len(flats) == 1 and flats[0] != len(layers) - 2:
        errors.append("layers: the flatten layer may only be followed by the output layer")
    return errors


def load_arch(source) -> ArchSpec:
    """Load an architecture from a path, a JSON/YAML string, or a parsed mapping."""
    if isinstance(source, dict):
        return build_arch(source)
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and not source.lstrip().startswith("{")):
        text = Path(source).read_text()
    else:
        text = source
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ArchError(f"document: not valid JSON/YAML ({exc})") from None
    return build_arch(doc)


def arch_to_dict(arch: ArchSpec) -> dict[str, Any]:
    layers = []
    for layer in arch.layers:
        d: dict[str, Any] = {"type": layer.kind}
        if isinstance(layer, (InputConv, Nonlinear)):
            d["patch"] = {"offsets": [list(o) for o in layer.patch.offsets]}
        if isinstance(layer, (InputConv, Nonlinear, Flatten)):
            d["sigma_w"] = layer.sigma_w
            d["sigma_b"] = layer.sigma_b
        if isinstance(layer, Skip):
            d["k"] = layer.k
        if isinstance(layer, Pool):
            d["factors"] = list(layer.factors)
        layers.append(d)
    return {
        "input_channels": arch.input_channels,
        "input_dims": list(arch.input_grid.dims),
        "layers": layers,
    }


def dump_arch(arch: ArchSpec) -> str:
    return json.dumps(arch_to_dict(arch), indent=2)


def layer_geometry(arch: ArchSpec) -> list[tuple[int, PixelGrid]]:
    """Grid of every layer output, position 0 being the input."""
    return list(enumerate(arch.grids))


def pool_membership(grid: PixelGrid, factors) -> "list[int]":
    """Coarse cell (flat index in the pooled grid) of every fine pixel."""
    coarse = tuple(h // f for h, f in zip(grid.dims, factors))
    out = []
    for c in grid.coords():
        flat = 0
        for ci, f, d in zip(c, factors, coarse):
            flat = flat * d + ci // f
        out.append(flat)
    return out
