"""Configuration, pipelines and result persistence for the ``nngp-cert`` command."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .arch import ArchError, ArchSpec, build_arch, load_arch
from .attack import scaling_experiment
from .certificate import certify, dudley_constant, failure_prob
from .covering import dudley_integral, lattice_cardinality, lattice_cover, verify_cover
from .gplab import (
    Ball,
    Segment,
    borell_tis_check,
    build_ensemble,
    crossing_probability,
    rice_check,
)
from .kernel import ArchKernel, LinearKernel, kernel_matrix
from .randnet import empirical_kernel
from .stats import fit_loglog, percentile_profile

SUBCOMMANDS = ("certify", "covering", "gp-crossing", "gp-rice", "gp-tails", "verify-kernel",
               "attack-scaling", "profile")

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

BUILTIN_ARCHS = ("linear", "fc", "conv", "skip")


class ConfigError(ValueError):
    pass


def _norm_value(p):
    if isinstance(p, str):
        if p.lower() in ("inf", "infinity", "linf"):
            return math.inf
        p = float(p)
    p = float(p)
    if p not in (1.0, 2.0, math.inf):
        raise ConfigError(f"norms: expected 1, 2 or inf, got {p}")
    return p


def _norm_label(p: float) -> str:
    return "inf" if math.isinf(p) else str(int(p))


@dataclass
class RunConfig:
    subcommand: str
    seed: int
    out: str = "results"
    arch: str | None = None
    n: int | None = None
    m: int | None = None
    samples: int = 100_000
    dims: list = field(default_factory=list)
    trials: int = 10_000
    grid_size: int = 512
    deltas: list = field(default_factory=lambda: [0.1, 0.3, 0.5])
    norms: list = field(default_factory=lambda: [1.0, 2.0, math.inf])
    norm2: float | None = None
    x0: object = None
    direction: object = None
    radii: list = field(default_factory=list)
    points: int = 10
    widths: list = field(default_factory=list)
    hidden: int = 3
    draws: int = 4000
    nets: int = 100
    points_per_net: int = 1
    dudley: bool = False
    min_r2: float | None = None
    base_dir: str = field(default=".", compare=False)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        d["norms"] = [_norm_label(p) for p in self.norms]
        return d

    def config_hash(self) -> str:
        """sha256 of the canonical JSON of every field except the output directory."""
        d = self.as_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)} - {"base_dir"}
_NEEDS_ARCH = {"certify", "gp-crossing", "gp-rice", "gp-tails", "verify-kernel"}
_NEEDS_DIMS = {"attack-scaling", "profile"}


def _int(d, key, minimum=None):
    v = d.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
        raise ConfigError(f"{key}: expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{key}: must be >= {minimum}, got {v}")
    return int(v)


def make_config(doc: dict, base_dir=".") -> RunConfig:
    """Validate a mapping into a :class:`RunConfig`; raises :class:`ConfigError`."""
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a mapping")
    unknown = set(doc) - _FIELDS
    if unknown:
        raise ConfigError(f"config: unknown fields {sorted(unknown)}")
    sub = doc.get("subcommand")
    if sub not in SUBCOMMANDS:
        raise ConfigError(f"subcommand: expected one of {SUBCOMMANDS}, got {sub!r}")
    if doc.get("seed") is None:
        raise ConfigError("seed: required (runs are never seeded from the clock)")
    d = dict(doc)
    d["seed"] = _int(d, "seed", 0)
    for key, lo in (("n", 1), ("m", 2), ("samples", 1), ("trials", 1), ("grid_size", 2),
                    ("points", 1), ("hidden", 1), ("draws", 1), ("nets", 1),
                    ("points_per_net", 1)):
        if key in d:
            d[key] = _int(d, key, lo)
    for key in ("dims", "widths"):
        if key in d:
            if not isinstance(d[key], list):
                raise ConfigError(f"{key}: expected a list of integers")
            d[key] = [_int({key: v}, key, 1) for v in d[key]]
    if "deltas" in d:
        d["deltas"] = [float(v) for v in d["deltas"]]
        if not d["deltas"] or any(not 0 < v < 1 for v in d["deltas"]):
            raise ConfigError("deltas: expected a nonempty list of values in (0, 1)")
    if "norms" in d:
        d["norms"] = [_norm_value(p) for p in d["norms"]]
    if "radii" in d:
        d["radii"] = [float(v) for v in d["radii"]]
    cfg = RunConfig(**d, base_dir=str(base_dir))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    sub = cfg.subcommand
    if sub in _NEEDS_ARCH and cfg.arch is None:
        raise ConfigError(f"arch: required for {sub}")
    if cfg.arch is not None and cfg.arch not in BUILTIN_ARCHS:
        if not cfg.resolve(cfg.arch).exists():
            raise ConfigError(f"arch: file {cfg.arch!r} does not exist")
    if sub == "covering" and (cfg.n is None or cfg.m is None):
        raise ConfigError("covering: n and m are required")
    if sub in _NEEDS_DIMS:
        if not cfg.dims:
            raise ConfigError("dims: empty dimension sweep")
        if any(b <= a for a, b in zip(cfg.dims, cfg.dims[1:])):
            raise ConfigError(f"dims: must be increasing, got {cfg.dims}")
    if sub == "attack-scaling" and len(cfg.dims) < 3:
        raise ConfigError("dims: a log-log fit needs at least 3 dimensions")
    if sub == "verify-kernel" and len(cfg.widths) < 2:
        raise ConfigError("widths: need at least 2 widths to check convergence")
    if sub == "gp-rice" and not cfg.radii:
        raise ConfigError("radii: required for gp-rice")
    if sub == "gp-tails" and cfg.trials < 10_000:
        raise ConfigError("trials: gp-tails needs at least 10000 trials")
    if isinstance(cfg.x0, str) and not cfg.resolve(cfg.x0).exists():
        raise ConfigError(f"x0: file {cfg.x0!r} does not exist")
    if cfg.norm2 is not None and not cfg.norm2 > 0:
        raise ConfigError("norm2: must be > 0")


def load_config(path, overrides=None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: cannot parse {path}: {exc}") from None
    doc = dict(doc or {})
    doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return make_config(doc, base_dir=path.parent)


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    config_hash: str
    metric: str
    value: float
    stderr: float = math.nan
    lo: float = math.nan
    hi: float = math.nan
    bound: float = math.nan
    passed: bool | None = None


RESULT_COLUMNS = ("experiment", "config_hash", "metric", "value", "stderr", "lo", "hi", "bound",
                  "pass")
SCALING_COLUMNS = ("n", "p", "median", "p45", "p55", "censored_count", "nets", "points", "seed",
                   "rel_median", "rel_p45", "rel_p55")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return ""
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def rows_to_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _result_tuple(r: ResultRow):
    return (r.experiment, r.config_hash, r.metric, r.value, r.stderr, r.lo, r.hi, r.bound,
            r.passed)


@dataclass
class RunOutcome:
    passed: bool
    files: list
    rows: list
    summary: dict

    @property
    def exit_code(self) -> int:
        return EXIT_PASS if self.passed else EXIT_FAIL


class _Collector:
    """Append-only, ordered row sink for one run."""

    def __init__(self, cfg: RunConfig):
        self.experiment = cfg.subcommand
        self.hash = cfg.config_hash()
        self.rows: list[ResultRow] = []

    def add(self, metric, value, **kw) -> ResultRow:
        row = ResultRow(self.experiment, self.hash, metric, float(value), **kw)
        self.rows.append(row)
        return row

    @property
    def passed(self) -> bool:
        return all(r.passed is not False for r in self.rows)


def _load_arch(cfg: RunConfig):
    from . import zoo

    name = cfg.arch
    if name == "linear":
        return None
    if name == "fc":
        return zoo.fc_arch(cfg.n or 8, cfg.hidden)
    if name == "conv":
        return zoo.conv_arch()
    if name == "skip":
        return zoo.skip_arch()
    return load_arch(cfg.resolve(name))


def _kernel_and_dim(cfg: RunConfig):
    arch = _load_arch(cfg)
    if arch is None:
        if cfg.n is None:
            raise ConfigError("n: required with the linear kernel")
        return LinearKernel(), cfg.n
    return ArchKernel(arch), arch.n_inputs


def _read_vector(cfg: RunConfig, spec, n: int, name: str):
    if isinstance(spec, list):
        v = np.asarray(spec, dtype=float).ravel()
    else:
        path = cfg.resolve(spec)
        v = np.load(path).ravel() if path.suffix == ".npy" else np.loadtxt(path).ravel()
    if v.size != n:
        raise ConfigError(f"{name}: expected {n} entries, got {v.size}")
    return v


def _start_point(cfg: RunConfig, n: int, rng) -> np.ndarray:
    """``x0`` from the config, else a seeded Gaussian direction scaled to ``norm2``."""
    if cfg.x0 is not None:
        x0 = _read_vector(cfg, cfg.x0, n, "x0")
    else:
        x0 = rng.standard_normal(n)
        x0 *= (cfg.norm2 or math.sqrt(n)) / np.linalg.norm(x0)
    if cfg.norm2 is not None and cfg.x0 is not None:
        x0 *= cfg.norm2 / np.linalg.norm(x0)
    return x0


def _direction(cfg: RunConfig, x0: np.ndarray, rng) -> np.ndarray:
    if cfg.direction is not None:
        v = _read_vector(cfg, cfg.direction, x0.size, "direction")
    else:
        v = rng.standard_normal(x0.size)
        v -= (v @ x0) / (x0 @ x0) * x0
    return v / np.linalg.norm(v)


def _pipeline_certify(cfg, out: _Collector, summary):
    arch = _load_arch(cfg)
    if arch is None:
        M, n = 1.0, cfg.n
        if n is None:
            raise ConfigError("n: required with the linear kernel")
    else:
        M, n = ArchKernel(arch).M, arch.n_inputs
    if cfg.norm2 is not None:
        norm2 = cfg.norm2
    elif cfg.x0 is not None:
        norm2 = float(np.linalg.norm(_read_vector(cfg, cfg.x0, n, "x0")))
    else:
        raise ConfigError("certify: give norm2 or x0")
    certs = []
    for d in cfg.deltas:
        c = certify(norm2, d, M, n, p_values=cfg.norms)
        certs.append(c.to_dict())
        pb = failure_prob(c.r_l1, norm2, M, n, "ball")
        ps = failure_prob(c.r_segment, norm2, M, n, "segment")
        out.add(f"r_l1[delta={d}]", c.r_l1, bound=d, passed=pb <= d * (1 + 1e-12))
        out.add(f"r_segment[delta={d}]", c.r_segment, bound=d, passed=ps <= d * (1 + 1e-12))
        for p in cfg.norms:
            out.add(f"r_lp[p={_norm_label(p)},delta={d}]", c.radius(p))
    summary["certificates"] = certs


def _pipeline_covering(cfg, out: _Collector, summary):
    cover = lattice_cover(cfg.n, cfg.m)
    card = lattice_cardinality(cfg.n, cfg.m)
    out.add("lattice_points", len(cover.centers), bound=card, passed=len(cover.centers) == card)
    worst = verify_cover(cover, cfg.samples, cfg.seed)
    out.add("max_sq_distance", worst, bound=1.0 / cfg.m, passed=worst <= 1.0 / cfg.m)
    if cfg.dudley:
        val = dudley_integral(cfg.n)
        a_n = dudley_constant(cfg.n)
        out.add("dudley_integral", val, bound=a_n, passed=val <= a_n)


def _pipeline_gp_crossing(cfg, out: _Collector, summary):
    k, n = _kernel_and_dim(cfg)
    rng = np.random.default_rng(cfg.seed)
    x0 = _start_point(cfg, n, rng)
    v = _direction(cfg, x0, rng)
    norm2 = float(np.linalg.norm(x0))
    regions = []
    for d in cfg.deltas:
        c = certify(norm2, d, k.M, n)
        regions.append((f"ball_l1[delta={d}]", Ball(c.r_l1, 1.0), d))
        regions.append((f"segment[delta={d}]", Segment(tuple(v), c.r_segment), d))
    for r in cfg.radii:
        regions.append((f"ball_l1[r={r}]", Ball(r, 1.0), failure_prob(r, norm2, k.M, n, "ball")))
        regions.append((f"segment[r={r}]", Segment(tuple(v), r),
                        failure_prob(r, norm2, k.M, n, "segment")))
    for i, (name, region, bound) in enumerate(regions):
        est = crossing_probability(k, x0, region, cfg.grid_size, cfg.trials, (cfg.seed, i))
        out.add(name, est.estimate, stderr=est.stderr, bound=bound,
                passed=est.estimate <= bound + 2 * est.stderr)
    summary["norm2_x0"] = norm2


def _pipeline_gp_rice(cfg, out: _Collector, summary):
    k, n = _kernel_and_dim(cfg)
    rng = np.random.default_rng(cfg.seed)
    x0 = _start_point(cfg, n, rng)
    v = _direction(cfg, x0, rng)
    for i, r in enumerate(cfg.radii):
        rep = rice_check(k, x0, v, r, cfg.grid_size, cfg.trials, (cfg.seed, i))
        out.add(f"zero_count[r={r}]", rep.mean_count, stderr=rep.stderr, bound=rep.rice_bound,
                passed=rep.mean_count <= rep.rice_bound + 3 * rep.stderr)
        out.add(f"rice_bound[r={r}]", rep.rice_bound, bound=rep.coarse_bound,
                passed=rep.rice_bound <= rep.coarse_bound)
    summary["norm2_x0"] = float(np.linalg.norm(x0))


def _pipeline_gp_tails(cfg, out: _Collector, summary):
    k, n = _kernel_and_dim(cfg)
    pts = np.random.default_rng(cfg.seed).standard_normal((cfg.points, n))
    rep = borell_tis_check(build_ensemble(k, pts), trials=cfg.trials, seed=cfg.seed)
    out.add("esup", rep.esup, stderr=rep.esup_stderr)
    for row in rep.rows:
        out.add(f"exceedance[t={row.t / rep.sigma:g}sigma]", row.frequency, stderr=row.stderr,
                bound=row.bound, passed=row.passed)
    summary["sigma"] = rep.sigma


def _pipeline_verify_kernel(cfg, out: _Collector, summary):
    arch = _load_arch(cfg)
    if arch is None:
        raise ConfigError("verify-kernel needs an architecture, not the linear kernel")
    pts = np.random.default_rng(cfg.seed).standard_normal((cfg.points, arch.n_inputs))
    K = kernel_matrix(arch, pts)
    n_hidden = sum(1 for layer in arch.layers if layer.kind in ("input_conv", "nonlinear"))
    errs = []
    for i, w in enumerate(cfg.widths):
        E = empirical_kernel(arch, [w] * (n_hidden + 1), pts, cfg.draws, (cfg.seed, i))
        errs.append(float(np.linalg.norm(E - K) / np.linalg.norm(K)))
    for i, (w, e) in enumerate(zip(cfg.widths, errs)):
        ok = i == 0 or e < errs[i - 1]
        if i == len(errs) - 1:
            ok = ok and e <= 0.1
        out.add(f"rel_frobenius[width={w}]", e, bound=0.1 if i == len(errs) - 1 else math.nan,
                passed=ok)
    summary["errors"] = errs


def _family(cfg: RunConfig):
    from . import zoo

    if cfg.arch is None or cfg.arch == "fc":
        return lambda n: zoo.fc_arch(n, cfg.hidden)
    doc = yaml.safe_load(cfg.resolve(cfg.arch).read_text())
    if list(doc.get("input_dims", [])) != [1]:
        raise ConfigError("attack pipelines scale input_channels; the arch needs input_dims [1]")
    return lambda n: build_arch({**doc, "input_channels": int(n)})


def _run_attacks(cfg, dims, norms):
    family = _family(cfg)
    n_params = sum(1 for layer in family(dims[0]).layers
                   if layer.kind in ("input_conv", "nonlinear"))
    widths = cfg.widths or [256] * n_params
    if len(widths) != n_params:
        raise ConfigError(f"widths: expected {n_params} entries, got {len(widths)}")
    return family, scaling_experiment(family, dims, cfg.nets, cfg.points_per_net, cfg.seed,
                                      widths=widths, norms=norms)


SLOPE_TARGETS = {1.0: 0.5, 2.0: 0.0, math.inf: -0.5}
SLOPE_TOL = 0.15


def _pipeline_attack_scaling(cfg, out: _Collector, summary):
    family, (rows, records) = _run_attacks(cfg, cfg.dims, cfg.norms)
    table = [(r.n, _norm_label(r.p), r.median, r.p45, r.p55, r.censored_count, r.nets, r.points,
              r.seed, r.rel_median, r.rel_p45, r.rel_p55) for r in rows]
    fits = {}
    for p in cfg.norms:
        sel = [r for r in rows if r.p == p and not math.isnan(r.median)]
        if len(sel) >= 3:
            f = fit_loglog([r.n for r in sel], [r.median for r in sel])
            g = fit_loglog([r.n for r in sel], [r.rel_median for r in sel])
            fits[_norm_label(p)] = {
                "slope": f.slope, "stderr": f.stderr, "r2": f.r2,
                "target": SLOPE_TARGETS[p],
                "within_tolerance": abs(f.slope - SLOPE_TARGETS[p]) <= SLOPE_TOL,
                "rel_slope": g.slope, "rel_stderr": g.stderr,
                "rel_within_tolerance": abs(g.slope + 0.5) <= SLOPE_TOL,
            }
    summary["fits"] = fits
    # one-sided check: empirical l1 delta-quantiles never undercut the certified radius
    if 1.0 in cfg.norms:
        checks = []
        for n in cfg.dims:
            recs = [r for r in records[(n, 1.0)] if not r.censored]
            if not recs:
                continue
            M = ArchKernel(family(n)).M
            for d in cfg.deltas:
                q = float(np.quantile([r.distance for r in recs], d))
                radius = min(certify(np.linalg.norm(r.x0), d, M, n).r_l1 for r in recs)
                ok = q >= radius
                checks.append({"n": n, "delta": d, "quantile": q, "certified": radius, "pass": ok})
                out.add(f"l1_quantile[n={n},delta={d}]", q, bound=radius, passed=ok)
        summary["lower_bound_checks"] = checks
    return SCALING_COLUMNS, table


def _pipeline_profile(cfg, out: _Collector, summary):
    n = cfg.dims[0]
    p = cfg.norms[0]
    _, (rows, records) = _run_attacks(cfg, [n], [p])
    prof = percentile_profile(records[(n, p)], p)
    out.add("fit_slope", prof.fit.slope, stderr=prof.fit.stderr)
    ok = None if cfg.min_r2 is None else prof.fit.r2 >= cfg.min_r2
    out.add("fit_r2", prof.fit.r2, bound=cfg.min_r2 if cfg.min_r2 is not None else math.nan,
            passed=ok)
    summary["n"], summary["p"] = n, _norm_label(p)
    return ("percentile", "distance"), list(zip(prof.percentiles, prof.distances))


PIPELINES = {
    "certify": _pipeline_certify,
    "covering": _pipeline_covering,
    "gp-crossing": _pipeline_gp_crossing,
    "gp-rice": _pipeline_gp_rice,
    "gp-tails": _pipeline_gp_tails,
    "verify-kernel": _pipeline_verify_kernel,
    "attack-scaling": _pipeline_attack_scaling,
    "profile": _pipeline_profile,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def run_config(cfg: RunConfig) -> RunOutcome:
    """Execute the configured pipeline and write ``<subcommand>.csv`` plus a JSON summary.

    Table-producing pipelines (attack-scaling, profile) put the table in the
    CSV and their bound checks in the summary; the others write result rows.
    Nothing is written unless the pipeline completes.
    """
    _validate(cfg)
    out = _Collector(cfg)
    summary: dict = {}
    try:
        table = PIPELINES[cfg.subcommand](cfg, out, summary)
    except (ConfigError, ArchError):
        raise
    except Exception as exc:
        raise RuntimeError(f"{cfg.subcommand} pipeline failed: {exc}") from exc
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    stem = cfg.subcommand
    csv_path = outdir / f"{stem}.csv"
    if table is not None:
        columns, data = table
        csv_path.write_text(rows_to_csv(columns, data))
        summary["checks"] = [dict(zip(RESULT_COLUMNS, _result_tuple(r))) for r in out.rows]
    else:
        csv_path.write_text(rows_to_csv(RESULT_COLUMNS, [_result_tuple(r) for r in out.rows]))
    files = [csv_path]
    doc = {
        "subcommand": cfg.subcommand,
        "config_hash": out.hash,
        "config": cfg.as_dict(),
        "passed": out.passed,
        "failed_metrics": [r.metric for r in out.rows if r.passed is False],
        **summary,
    }
    sum_path = outdir / f"{stem}.summary.json"
    sum_path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    files.append(sum_path)
    return RunOutcome(out.passed, files, out.rows, doc)
