"""Run configuration, engine dispatch and result files.

A run is described by a YAML document with the sections ``method``,
``model``, ``lindblad``, ``initial``, ``numerics`` and ``output``; see the
README for the key reference. :func:`parse_config` validates the document
before anything is computed and reports the offending field together with
its line number. :func:`run` dispatches to the selected engine and
:func:`emit_series` writes one row per output time with the mean and standard
error of every observable.

Numeric fields accept plain numbers or short arithmetic expressions in the
model constants, e.g. ``rate: 10*g`` or ``rate: 0.1*g/sqrt(n_spins)``.
"""

from __future__ import annotations

import argparse
import ast
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import operator
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from . import __version__
from .exact_oracle import (
    FockBasisConfig,
    coherent_product_state,
    evolve_lindblad,
    evolve_schrodinger,
    fidelity,
    to_dense,
)
from .gaussian_core import NGSState, fock_expansion, perturb, product_ngs
from .hamiltonian import (
    Channel,
    HPMapping,
    HTCParams,
    LindbladSpec,
    SpinBosonOperator,
    build_htc,
    collective_sz,
    hp_transform,
    jump_operators,
    k_from_jumps,
)
from .trajectories import TrajectoryConfig, run_ensemble
from .twa import SDEConfig, TWAState, run_twa_ensemble, weyl_observables
from .variational_geometry import (
    DEFAULT_PINV_TOL,
    build_geometry,
    eom_non_hermitian,
    eom_real_time,
    expectation,
    integrate_flow,
)

__all__ = [
    "ConfigError",
    "RunError",
    "ModelSpec",
    "InitialSpec",
    "NumericsSpec",
    "OutputSpec",
    "RunSpec",
    "ResultBundle",
    "parse_config",
    "load_config",
    "run",
    "emit_series",
    "read_series_csv",
    "read_series_json",
    "preset_dir",
    "list_presets",
    "main",
]

log = logging.getLogger("ngstwa")

METHODS = ("ngs", "twa", "oracle_closed", "oracle_lindblad")
MODEL_PRESETS = ("htc", "anharmonic", "gaussian_heff", "tc_collective")
SERIES_FORMAT = "ngstwa-series/1"


class ConfigError(ValueError):
    """Schema or range violation in a run configuration."""

    def __init__(self, field_path: str, message: str, line: int | None = None):
        self.field = field_path
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field_path}: {message}")


class RunError(RuntimeError):
    """An engine failed; the message names the method and model."""


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    preset: str = "htc"
    n_spins: int = 1
    delta: float = 0.0
    g: float = 0.1
    nu: float = 1.0
    lam: float = 0.0
    eps: tuple = ()
    omega_cavity: float = 0.0
    omega: float = 1.0
    mu: float = 1.0
    xi: float = 0.5
    kappa: float = 1.0
    mapping: str = "hp"


# keys accepted under ``model`` for each named preset
_MODEL_KEYS = {
    "htc": {"n_spins", "delta", "g", "nu", "lam", "eps", "omega_cavity"},
    "anharmonic": {"omega", "mu"},
    "gaussian_heff": {"xi", "kappa"},
    "tc_collective": {"n_spins", "delta", "g", "mapping"},
}
_MODEL_DEFAULTS = {
    "tc_collective": {"n_spins": 3, "delta": 1.0, "g": 0.1, "nu": 0.0},
    "htc": {},
    "anharmonic": {"n_spins": 0},
    "gaussian_heff": {"n_spins": 0},
}


@dataclass(frozen=True)
class InitialSpec:
    kind: str = "product"
    cavity_alpha: complex = 1.0
    vib_alpha: complex = 0.0
    spins_up: tuple | None = None
    seed: int = 0


@dataclass(frozen=True)
class NumericsSpec:
    n_gaussians: int = 4
    squeezing: bool = False
    dt: float = 0.5
    t_final: float = 10.0
    n_traj: int = 40
    twa_n_traj: int = 10000
    twa_dt: float = 1e-3
    cutoffs: tuple = (10,)
    seed: int = 0
    rtol: float = 1e-7
    pinv_tol: float = DEFAULT_PINV_TOL
    init_noise: float = 1e-4
    batch_size: int = 2000
    hp_coupling: str = "per_spin"
    path: str = "direct"
    workers: int | None = None
    check_cutoff: bool = False


@dataclass(frozen=True)
class OutputSpec:
    dt: float = 0.5
    observables: tuple = ()
    directory: str = "results"
    basename: str = ""
    formats: tuple = ("csv", "json")


@dataclass(frozen=True)
class RunSpec:
    method: str
    model: ModelSpec
    lindblad: LindbladSpec
    initial: InitialSpec
    numerics: NumericsSpec
    output: OutputSpec
    name: str = ""
    description: str = ""

    @property
    def times(self) -> np.ndarray:
        n = int(round(self.numerics.t_final / self.output.dt))
        return np.arange(n + 1) * self.output.dt

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lindblad"] = [dataclasses.asdict(c) for c in self.lindblad.channels]
        return _jsonable(d)

    def config_hash(self) -> str:
        """Digest of everything that influences the time series."""
        d = self.to_dict()
        d["output"].pop("directory", None)
        d["output"].pop("formats", None)
        d["numerics"].pop("workers", None)
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_method(self, method: str) -> "RunSpec":
        """Same run with another engine; observables that engine cannot report are dropped."""
        if method not in METHODS:
            raise ConfigError("method", f"must be one of {', '.join(METHODS)}")
        obs = tuple(o for o in self.output.observables
                    if not (o == "infidelity" and method != "ngs") and not (o == "norm" and method == "twa"))
        if not obs:
            raise ConfigError("output.observables", f"nothing left to report with method {method}")
        out = dataclasses.replace(self, method=method, output=dataclasses.replace(self.output, observables=obs))
        _check_combination(out, {})
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)] if obj.imag else _jsonable(float(obj.real))
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# -- expression evaluation ---------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {"sqrt": math.sqrt, "exp": math.exp, "log": math.log}


def _eval_expr(text: str, names: Mapping[str, float]) -> float:
    tree = ast.parse(text, mode="eval")

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return float(node.value)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            return _UNARY[type(node.op)](ev(node.operand))
        if isinstance(node, ast.Name):
            if node.id == "pi":
                return math.pi
            if node.id in names:
                return float(names[node.id])
            raise ValueError(f"unknown name {node.id!r}")
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS
                and len(node.args) == 1 and not node.keywords):
            return _FUNCS[node.func.id](ev(node.args[0]))
        raise ValueError("unsupported expression")

    return ev(tree)


# -- line bookkeeping --------------------------------------------------------

def _line_map(text: str) -> dict:
    """Map key paths (tuples) to 1-based line numbers of the YAML source."""
    lines: dict = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (str(k.value),)
                lines[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = path + (i,)
                lines[p] = v.start_mark.line + 1
                walk(v, p)

    if root is not None:
        lines[()] = root.start_mark.line + 1
        walk(root, ())
    return lines


class _Ctx:
    def __init__(self, lines: dict):
        self.lines = lines

    def error(self, path: tuple, message: str) -> ConfigError:
        line = None
        for k in range(len(path), -1, -1):
            if path[:k] in self.lines:
                line = self.lines[path[:k]]
                break
        name = ".".join(str(p) if not isinstance(p, int) else f"[{p}]" for p in path).replace(".[", "[")
        return ConfigError(name or "<root>", message, line)


def _section(raw: Mapping, key: str, ctx: _Ctx, kind=dict):
    val = raw.get(key)
    if val is None:
        return kind()
    if not isinstance(val, kind):
        raise ctx.error((key,), f"expected a {'mapping' if kind is dict else 'list'}")
    return val


def _reject_unknown(section: Mapping, allowed: set, path: tuple, ctx: _Ctx):
    for k in section:
        if k not in allowed:
            raise ctx.error(path + (str(k),), f"unknown key (allowed: {', '.join(sorted(allowed))})")


def _number(val, path, ctx, names, *, minimum=None, strict=False, integer=False):
    if isinstance(val, bool):
        raise ctx.error(path, "expected a number")
    if isinstance(val, str):
        try:
            val = _eval_expr(val, names)
        except (ValueError, SyntaxError, ZeroDivisionError, OverflowError) as exc:
            raise ctx.error(path, f"cannot evaluate expression: {exc}") from None
    if not isinstance(val, (int, float)):
        raise ctx.error(path, "expected a number")
    if not math.isfinite(val):
        raise ctx.error(path, "must be finite")
    if integer:
        if float(val) != int(val):
            raise ctx.error(path, "expected an integer")
        val = int(val)
    if minimum is not None:
        if strict and not val > minimum:
            raise ctx.error(path, f"must be > {minimum}, got {val}")
        if not strict and not val >= minimum:
            raise ctx.error(path, f"must be >= {minimum}, got {val}")
    return val


def _complex(val, path, ctx, names):
    if isinstance(val, (list, tuple)):
        if len(val) != 2:
            raise ctx.error(path, "complex values are written as [re, im]")
        return complex(_number(val[0], path + (0,), ctx, names), _number(val[1], path + (1,), ctx, names))
    return complex(_number(val, path, ctx, names))


def _bool(val, path, ctx):
    if not isinstance(val, bool):
        raise ctx.error(path, "expected true or false")
    return val


def parse_config(text: str, source: str = "") -> RunSpec:
    """Validate a YAML run description and fill in defaults.

    Raises
    ------
    ConfigError
        For malformed YAML, unknown keys, wrong types or out-of-range values.
        The message starts with the line number when it is known.
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("<yaml>", str(exc).splitlines()[0], mark.line + 1 if mark else None) from None
    ctx = _Ctx(_line_map(text))
    if not isinstance(raw, dict):
        raise ctx.error((), "the configuration must be a mapping")
    _reject_unknown(raw, {"method", "name", "description", "model", "lindblad", "initial", "numerics", "output"}, (), ctx)

    method = raw.get("method")
    if method not in METHODS:
        raise ctx.error(("method",), f"must be one of {', '.join(METHODS)}")

    model = _parse_model(_section(raw, "model", ctx), ctx)
    names = {"g": model.g, "n_spins": model.n_spins, "nu": model.nu, "delta": model.delta, "lam": model.lam,
             "omega": model.omega, "mu": model.mu, "xi": model.xi, "kappa": model.kappa}
    lindblad = _parse_lindblad(raw.get("lindblad"), ctx, names, model)
    initial = _parse_initial(_section(raw, "initial", ctx), ctx, names, model)
    numerics = _parse_numerics(_section(raw, "numerics", ctx), ctx, names, model)
    name = str(raw.get("name") or Path(source).stem or "run")
    output = _parse_output(_section(raw, "output", ctx), ctx, names, model, name, numerics)
    spec = RunSpec(method, model, lindblad, initial, numerics, output, name, str(raw.get("description") or ""))
    _check_combination(spec, ctx)
    return spec


def _parse_model(sec: Mapping, ctx: _Ctx) -> ModelSpec:
    preset = sec.get("preset", "htc")
    if preset not in MODEL_PRESETS:
        raise ctx.error(("model", "preset"), f"must be one of {', '.join(MODEL_PRESETS)}")
    _reject_unknown(sec, _MODEL_KEYS[preset] | {"preset"}, ("model",), ctx)
    vals: dict = {"preset": preset, **_MODEL_DEFAULTS[preset]}
    if "n_spins" in sec:
        vals["n_spins"] = _number(sec["n_spins"], ("model", "n_spins"), ctx, {}, minimum=1, integer=True)
    names = {"n_spins": vals.get("n_spins", 1)}
    for key in ("g", "delta", "nu", "omega_cavity", "omega", "mu", "xi"):
        if key in sec:
            vals[key] = _number(sec[key], ("model", key), ctx, names)
    names.update({k: vals[k] for k in ("g", "delta", "nu") if k in vals})
    names.setdefault("g", ModelSpec.g)
    if "lam" in sec:
        vals["lam"] = _number(sec["lam"], ("model", "lam"), ctx, names)
    if "kappa" in sec:
        vals["kappa"] = _number(sec["kappa"], ("model", "kappa"), ctx, names, minimum=0)
    if "mapping" in sec:
        if sec["mapping"] not in ("hp", "individual"):
            raise ctx.error(("model", "mapping"), "must be 'hp' or 'individual'")
        vals["mapping"] = sec["mapping"]
    if "eps" in sec:
        eps = sec["eps"]
        if not isinstance(eps, list):
            raise ctx.error(("model", "eps"), "expected a list with one entry per spin")
        n = vals.get("n_spins", 1)
        if len(eps) != n:
            raise ctx.error(("model", "eps"), f"has {len(eps)} entries, expected {n}")
        vals["eps"] = tuple(_number(e, ("model", "eps", i), ctx, names) for i, e in enumerate(eps))
    return ModelSpec(**vals)


def _parse_lindblad(sec, ctx: _Ctx, names, model: ModelSpec) -> LindbladSpec:
    if sec is None:
        return LindbladSpec()
    if not isinstance(sec, list):
        raise ctx.error(("lindblad",), "expected a list of channels")
    chans = []
    for i, ch in enumerate(sec):
        path = ("lindblad", i)
        if not isinstance(ch, dict):
            raise ctx.error(path, "each channel is a mapping with kind and rate")
        _reject_unknown(ch, {"kind", "rate", "target"}, path, ctx)
        if "kind" not in ch or "rate" not in ch:
            raise ctx.error(path, "channels need both kind and rate")
        rate = _number(ch["rate"], path + ("rate",), ctx, names, minimum=0)
        target = ch.get("target")
        if target is not None:
            target = _number(target, path + ("target",), ctx, {}, minimum=0, integer=True)
        try:
            chans.append(Channel(str(ch["kind"]), float(rate), target))
        except ValueError as exc:
            raise ctx.error(path + ("kind",), str(exc)) from None
    if chans and model.preset == "gaussian_heff":
        raise ctx.error(("lindblad",), "the gaussian_heff model carries its decay in model.kappa")
    return LindbladSpec(tuple(chans))


def _parse_initial(sec: Mapping, ctx: _Ctx, names, model: ModelSpec) -> InitialSpec:
    _reject_unknown(sec, {f.name for f in dataclasses.fields(InitialSpec)}, ("initial",), ctx)
    vals: dict = {}
    kind = sec.get("kind", "product")
    if kind not in ("product", "random_superposition"):
        raise ctx.error(("initial", "kind"), "must be 'product' or 'random_superposition'")
    if kind == "random_superposition" and model.preset not in ("gaussian_heff", "anharmonic"):
        raise ctx.error(("initial", "kind"), "random superpositions are available for single-mode models only")
    vals["kind"] = kind
    for key in ("cavity_alpha", "vib_alpha"):
        if key in sec:
            vals[key] = _complex(sec[key], ("initial", key), ctx, names)
    if "seed" in sec:
        vals["seed"] = _number(sec["seed"], ("initial", "seed"), ctx, {}, minimum=0, integer=True)
    if "spins_up" in sec:
        ups = sec["spins_up"]
        if not isinstance(ups, list) or len(ups) != model.n_spins:
            raise ctx.error(("initial", "spins_up"), f"expected a list of {model.n_spins} booleans")
        vals["spins_up"] = tuple(_bool(u, ("initial", "spins_up", i), ctx) for i, u in enumerate(ups))
    return InitialSpec(**vals)


def _parse_numerics(sec: Mapping, ctx: _Ctx, names, model: ModelSpec) -> NumericsSpec:
    _reject_unknown(sec, {f.name for f in dataclasses.fields(NumericsSpec)}, ("numerics",), ctx)
    vals: dict = {}
    p = lambda k: ("numerics", k)
    for key, kw in {
        "n_gaussians": dict(minimum=1, integer=True),
        "n_traj": dict(minimum=2, integer=True),
        "twa_n_traj": dict(minimum=2, integer=True),
        "seed": dict(minimum=0, integer=True),
        "batch_size": dict(minimum=1, integer=True),
        "dt": dict(minimum=0, strict=True),
        "t_final": dict(minimum=0, strict=True),
        "twa_dt": dict(minimum=0, strict=True),
        "rtol": dict(minimum=0, strict=True),
        "pinv_tol": dict(minimum=0, strict=True),
        "init_noise": dict(minimum=0),
    }.items():
        if key in sec:
            vals[key] = _number(sec[key], p(key), ctx, names, **kw)
    if vals.get("seed", 0) >= 2**64:
        raise ctx.error(p("seed"), "must fit in 64 bits")
    for key in ("squeezing", "check_cutoff"):
        if key in sec:
            vals[key] = _bool(sec[key], p(key), ctx)
    if "workers" in sec and sec["workers"] is not None:
        vals["workers"] = _number(sec["workers"], p("workers"), ctx, {}, minimum=1, integer=True)
    if "hp_coupling" in sec:
        if sec["hp_coupling"] not in ("per_spin", "bare"):
            raise ctx.error(p("hp_coupling"), "must be 'per_spin' or 'bare'")
        vals["hp_coupling"] = sec["hp_coupling"]
    if "path" in sec:
        if sec["path"] not in ("direct", "symplectic", "auto"):
            raise ctx.error(p("path"), "must be 'direct', 'symplectic' or 'auto'")
        vals["path"] = sec["path"]
    if "cutoffs" in sec:
        c = sec["cutoffs"]
        items = c if isinstance(c, list) else [c]
        vals["cutoffs"] = tuple(_number(v, p("cutoffs"), ctx, {}, minimum=1, integer=True) for v in items)
    out = NumericsSpec(**vals)
    nm = _n_modes(model)
    if len(out.cutoffs) not in (1, nm):
        raise ctx.error(p("cutoffs"), f"give one cutoff or {nm} (one per mode)")
    if out.dt > out.t_final:
        raise ctx.error(p("dt"), "must not exceed t_final")
    return out


def _parse_output(sec: Mapping, ctx: _Ctx, names, model: ModelSpec, name: str, numerics: NumericsSpec) -> OutputSpec:
    _reject_unknown(sec, {f.name for f in dataclasses.fields(OutputSpec)}, ("output",), ctx)
    vals: dict = {"basename": name}
    if "dt" in sec:
        vals["dt"] = _number(sec["dt"], ("output", "dt"), ctx, names, minimum=0, strict=True)
    dt = vals.get("dt", OutputSpec.dt)
    steps = numerics.t_final / dt
    if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
        raise ctx.error(("output", "dt"), "t_final must be an integer multiple of the output step")
    for key in ("directory", "basename"):
        if key in sec:
            if not isinstance(sec[key], str) or not sec[key]:
                raise ctx.error(("output", key), "expected a non-empty string")
            vals[key] = sec[key]
    if "formats" in sec:
        f = sec["formats"]
        f = f if isinstance(f, list) else [f]
        for i, x in enumerate(f):
            if x not in ("csv", "json"):
                raise ctx.error(("output", "formats", i), "must be 'csv' or 'json'")
        vals["formats"] = tuple(f)
    obs = sec.get("observables")
    if obs is None:
        obs = _default_observables(model)
    if not isinstance(obs, list) or not obs:
        raise ctx.error(("output", "observables"), "expected a non-empty list of names")
    for i, o in enumerate(obs):
        if not isinstance(o, str) or not _observable_known(o, model):
            raise ctx.error(("output", "observables", i), f"unknown observable {o!r} for model {model.preset}")
    vals["observables"] = tuple(obs)
    return OutputSpec(**vals)


def _check_combination(spec: RunSpec, ctx):
    ctx = ctx if isinstance(ctx, _Ctx) else _Ctx({})
    m, preset = spec.method, spec.model.preset
    if m == "twa" and preset not in ("htc", "tc_collective"):
        raise ctx.error(("method",), "TWA is available for the htc and tc_collective models")
    if m == "oracle_lindblad" and preset == "gaussian_heff":
        raise ctx.error(("method",), "gaussian_heff describes no-jump evolution; use oracle_closed")
    for i, o in enumerate(spec.output.observables):
        if o == "infidelity" and (m != "ngs" or spec.lindblad.channels or preset == "gaussian_heff"):
            raise ctx.error(("output", "observables", i), "infidelity needs method ngs with closed dynamics")
        if o == "norm" and preset != "gaussian_heff":
            raise ctx.error(("output", "observables", i), "norm is reported for the gaussian_heff model only")
        if m == "twa" and o in ("norm", "infidelity"):
            raise ctx.error(("output", "observables", i), f"{o} is not available with TWA")
    if preset == "tc_collective" and spec.model.mapping == "hp":
        if spec.initial.spins_up is not None and not all(spec.initial.spins_up):
            raise ctx.error(("initial", "spins_up"), "the collective mapping starts from the fully polarised state")
        for i, ch in enumerate(spec.lindblad.channels):
            if ch.kind == "single_spin_decay" and m in ("ngs", "twa"):
                raise ctx.error(("lindblad", i, "kind"), "single-spin decay cannot be written in the collective mapping")
    if m == "twa":
        for i, ch in enumerate(spec.lindblad.channels):
            if ch.kind not in ("cavity_decay", "single_spin_decay", "collective_spin_decay") or (
                ch.target not in (None, 0) and ch.kind == "cavity_decay") or (
                    ch.kind == "single_spin_decay" and ch.target is not None):
                raise ctx.error(("lindblad", i), "TWA supports cavity decay, single-spin decay on every spin "
                                                 "and collective spin decay")


def _n_modes(model: ModelSpec) -> int:
    if model.preset == "htc":
        return 1 + model.n_spins
    return 1


def _default_observables(model: ModelSpec) -> list:
    return {
        "htc": ["n_cav", "sz", "n_vib"],
        "anharmonic": ["n_cav", "x"],
        "gaussian_heff": ["x", "n_cav", "norm"],
        "tc_collective": ["n_cav", "sz"],
    }[model.preset]


def _observable_known(name: str, model: ModelSpec) -> bool:
    base = {"n_cav", "x", "p", "norm", "infidelity"}
    if model.preset in ("htc", "tc_collective"):
        base |= {"sz"}
        base |= {f"sz_{j}" for j in range(model.n_spins)}
    if model.preset == "htc":
        base |= {"n_vib"} | {f"n_vib_{j}" for j in range(model.n_spins)}
    if model.preset == "tc_collective":
        base |= {"n_hp"}
    return name in base


def load_config(path_or_name: str | os.PathLike) -> RunSpec:
    """Parse a configuration file, or a shipped preset when no such file exists."""
    p = Path(path_or_name)
    if not p.exists():
        cand = preset_dir() / f"{path_or_name}.yaml"
        if not cand.exists():
            raise ConfigError("<file>", f"no configuration file or preset named {str(path_or_name)!r}")
        p = cand
    return parse_config(p.read_text(encoding="utf-8"), source=str(p))


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------

def _htc_params(model: ModelSpec) -> HTCParams:
    if model.preset == "tc_collective":
        return HTCParams(n_spins=model.n_spins, delta=model.delta, g=model.g, nu=0.0, lam=0.0, vibrations=False)
    return HTCParams(n_spins=model.n_spins, delta=model.delta, g=model.g, nu=model.nu, lam=model.lam,
                     eps=model.eps, omega_cavity=model.omega_cavity)


def _spin_config(spec: RunSpec) -> int:
    ups = spec.initial.spins_up or (True,) * spec.model.n_spins
    idx = 0
    for up in ups:
        idx = (idx << 1) | (0 if up else 1)
    return idx


@dataclass
class _Problem:
    """Operators of one representation (spins kept, or mapped to a boson)."""

    n_spins: int
    n_modes: int
    H: SpinBosonOperator
    jumps: list
    K: SpinBosonOperator | None
    alphas: list
    spin_config: int
    hp: HPMapping | None = None


def _problem(spec: RunSpec, mapped: bool) -> _Problem:
    """Operators for ``spec``; ``mapped`` selects the collective boson picture."""
    m = spec.model
    a0 = spec.initial.cavity_alpha
    if m.preset == "anharmonic":
        n = SpinBosonOperator.boson(0, 1, 0, 1, 1)
        return _Problem(0, 1, m.omega * n + m.mu * (n * n), [], None, [a0], 0)
    if m.preset == "gaussian_heff":
        O = SpinBosonOperator
        H = m.xi * (O.boson(0, 1, 0, 1, 0) + O.boson(0, 1, 0, 0, 1))
        K = O.boson(0, 1, 0, 1, 1, 0.5 * m.kappa)
        return _Problem(0, 1, H, [], K, [a0], 0)
    p = _htc_params(m)
    H = build_htc(p)
    jumps = [c for _, c in jump_operators(spec.lindblad, p.n_spins, p.n_modes)]
    alphas = [a0] + [spec.initial.vib_alpha] * (p.n_modes - 1)
    if m.preset == "tc_collective" and mapped and m.mapping == "hp":
        hp = HPMapping("large_spin_first_order")
        return _Problem(0, 2, hp_transform(H, hp), [hp_transform(c, hp) for c in jumps], None, [a0, 0.0], 0, hp)
    return _Problem(p.n_spins, p.n_modes, H, jumps, None, alphas, _spin_config(spec))


def _observable_op(name: str, prob: _Problem, model: ModelSpec) -> SpinBosonOperator:
    O = SpinBosonOperator
    ns = model.n_spins if prob.hp is not None else prob.n_spins
    nb = 1 if prob.hp is not None else prob.n_modes
    if name == "n_cav":
        op = O.boson(ns, nb, 0, 1, 1)
    elif name in ("x", "p"):
        a, ad = O.boson(ns, nb, 0, 0, 1), O.boson(ns, nb, 0, 1, 0)
        op = (a + ad) * (1 / math.sqrt(2)) if name == "x" else (a - ad) * (1j / math.sqrt(2))
    elif name == "sz":
        op = collective_sz(ns, nb)
    elif name == "n_hp":
        op = O.identity(ns, nb, ns / 2) - collective_sz(ns, nb)
    elif name.startswith("sz_"):
        op = O.pauli(ns, nb, int(name[3:]), "Z", 0.5)
    elif name == "n_vib":
        op = O.zero(ns, nb)
        for j in range(ns):
            op = op + O.boson(ns, nb, 1 + j, 1, 1, 1.0 / ns)
    elif name.startswith("n_vib_"):
        op = O.boson(ns, nb, 1 + int(name[6:]), 1, 1)
    else:
        raise KeyError(name)
    if prob.hp is not None:
        try:
            op = hp_transform(op, prob.hp)
        except ValueError as exc:
            raise RunError(f"observable {name} has no collective form: {exc}") from None
    return op


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass
class ResultBundle:
    """Time series on the output grid plus provenance metadata.

    ``mean`` and ``stderr`` map observable names to arrays over ``times``;
    entries are NaN where a run was aborted. ``complete`` is false for such
    partial results.
    """

    times: np.ndarray
    mean: dict
    stderr: dict
    metadata: dict
    complete: bool = True
    units: str = "t in 1/nu"


def _units(model: ModelSpec) -> str:
    if model.preset == "htc":
        return "t in 1/nu"
    if model.preset == "tc_collective":
        return "t in 1/delta"
    if model.preset == "anharmonic":
        return "t in 1/omega"
    return "t in 1/xi"


def run(spec: RunSpec) -> ResultBundle:
    """Run ``spec`` with its engine and collect the series and diagnostics."""
    t0 = time.perf_counter()
    engines = {"ngs": _run_ngs, "twa": _run_twa, "oracle_closed": _run_oracle, "oracle_lindblad": _run_oracle}
    try:
        times, mean, err, diag, complete = engines[spec.method](spec)
    except (RunError, ConfigError):
        raise
    except Exception as exc:  # engines raise many exception types; keep the context
        raise RunError(f"{spec.method} engine failed for model {spec.model.preset} ({spec.name}): "
                       f"{type(exc).__name__}: {exc}") from exc
    meta = {
        "name": spec.name,
        "method": spec.method,
        "config_hash": spec.config_hash(),
        "code_version": __version__,
        "seeds": {"base": spec.numerics.seed, **diag.pop("seeds", {})},
        "wall_time_s": time.perf_counter() - t0,
        "diagnostics": diag,
        "config": spec.to_dict(),
        "status": "complete" if complete else "partial",
    }
    return ResultBundle(np.asarray(times, dtype=float), mean, err, meta, complete, _units(spec.model))


def _initial_ngs(spec: RunSpec, prob: _Problem) -> NGSState:
    num = spec.numerics
    if spec.initial.kind == "random_superposition":
        rng = np.random.default_rng(spec.initial.seed)
        Np = num.n_gaussians
        st = NGSState.zeros(0, Np, 1)
        st = st.replace(kappa=0.3 * rng.normal(size=(1, Np)), theta=rng.normal(size=(1, Np)),
                        x=rng.normal(size=(1, Np, 1)), y=rng.normal(size=(1, Np, 1)))
        if num.squeezing:
            st = NGSState(0, st.kappa, st.theta, st.x, st.y, squeezing_enabled=True)
        return st.normalized()
    return product_ngs(prob.n_spins, prob.spin_config, prob.alphas, n_gaussians=num.n_gaussians,
                       squeezing=num.squeezing)


def _cutoffs(spec: RunSpec, n_modes: int, extra: int = 0) -> tuple:
    c = spec.numerics.cutoffs
    c = c * n_modes if len(c) == 1 else c
    return tuple(int(v) + extra for v in c)


def _run_ngs(spec: RunSpec):
    prob = _problem(spec, mapped=True)
    num = spec.numerics
    names = spec.output.observables
    ops = {n: _observable_op(n, prob, spec.model) for n in names if n not in ("norm", "infidelity")}
    init = _initial_ngs(spec, prob)
    times = spec.times
    if prob.jumps:
        cfg = TrajectoryConfig(hamiltonian=prob.H, initial=init, dt=num.dt, t_final=num.t_final,
                               jumps=prob.jumps, rng_seed=num.seed, observables=ops, init_noise_scale=num.init_noise,
                               output_dt=spec.output.dt, pinv_tol=num.pinv_tol, rtol=num.rtol, path=num.path)
        ens, records = run_ensemble(cfg, num.n_traj, workers=num.workers)
        ranks = [r for rec in records if not rec.failed for r in rec.diagnostics.get("rank_history", [])]
        fids = [e.post_projection_fidelity for log_ in ens.jump_logs for e in log_]
        diag = {
            "n_traj": ens.n_traj,
            "n_failed": ens.n_failed,
            "failures": [rec.message for rec in records if rec.failed],
            "n_jumps": [len(log_) for log_ in ens.jump_logs],
            "projection_fidelities": fids,
            "min_projection_fidelity": min(fids) if fids else None,
            "geometry_rank_range": [min(ranks), max(ranks)] if ranks else None,
            "seeds": {"trajectories": ens.metadata.get("seeds")},
        }
        return ens.times, dict(ens.mean), dict(ens.stderr), diag, ens.n_failed == 0

    if spec.initial.kind == "product":
        init = perturb(init, np.random.default_rng(num.seed), num.init_noise).normalized()
    if prob.K is not None:
        eom = lambda s: eom_non_hermitian(s, prob.H, prob.K, tol=num.pinv_tol, path=num.path)
    else:
        eom = lambda s: eom_real_time(s, prob.H, tol=num.pinv_tol, path="auto", smooth=True)
    res = integrate_flow(init, eom, times, rtol=num.rtol, atol=num.rtol * 1e-2)
    states = res.states
    mean = {n: np.full(len(times), np.nan) for n in names}
    for i, st in enumerate(states):
        n2 = st.norm_squared()
        for n, op in ops.items():
            mean[n][i] = expectation(st, op).real / n2
        if "norm" in mean:
            mean["norm"][i] = n2
    if "infidelity" in mean:
        cut = _cutoffs(spec, prob.n_modes)
        basis = FockBasisConfig(prob.n_spins, cut)
        psi0 = coherent_product_state(basis, prob.spin_config, prob.alphas)
        exact = evolve_schrodinger(psi0, to_dense(prob.H, basis, sparse=True), times)
        for i, st in enumerate(states):
            mean["infidelity"][i] = 1.0 - fidelity(st, exact[i], cutoff=cut)
    diag = {
        "n_evals": res.n_evals,
        "integrator": res.message if isinstance(res.message, str) else str(res.message),
        "geometry_ranks": [build_geometry(st, num.pinv_tol).rank for st in states],
    }
    err = {n: np.zeros(len(times)) for n in names}
    for n in names:
        err[n][len(states):] = np.nan
    return times, mean, err, diag, bool(res.success) and len(states) == len(times)


def _twa_observe(state: TWAState, cfg: SDEConfig) -> dict:
    """Weyl symbols under the observable names used by the CLI."""
    w = weyl_observables(state, cfg)
    out = {"n_cav": w["n_cav"], "x": math.sqrt(2) * w["a_re"], "p": math.sqrt(2) * w["a_im"], "sz": w["sz"]}
    if cfg.variant == "tc_collective_hp":
        out["n_hp"] = w["n_hp"]
        return out
    ns = cfg.htc.n_spins
    for j in range(ns):
        out[f"sz_{j}"] = 0.5 * w[f"sz_{j}"]
    vib = [w[f"n_vib_{k}"] for k in range(ns) if f"n_vib_{k}" in w]
    if cfg.htc.vibrations and vib:
        for k, v in enumerate(vib):
            out[f"n_vib_{k}"] = v
        out["n_vib"] = sum(vib) / len(vib)
    if cfg.htc.n_spins and "n_hp" not in out:
        out["n_hp"] = ns / 2 - w["sz"]
    return out


def _run_twa(spec: RunSpec):
    num, m = spec.numerics, spec.model
    rates = {"cavity_decay": 0.0, "single_spin_decay": 0.0, "collective_spin_decay": 0.0}
    for ch in spec.lindblad.channels:
        rates[ch.kind] += ch.rate
    variant = "tc_collective_hp" if (m.preset == "tc_collective" and m.mapping == "hp") else "htc_individual"
    cfg = SDEConfig(htc=_htc_params(m), dt=num.twa_dt, t_final=num.t_final, n_traj=num.twa_n_traj,
                    rng_seed=num.seed, variant=variant, kappa=rates["cavity_decay"],
                    gamma=rates["single_spin_decay"], Gamma=rates["collective_spin_decay"],
                    output_dt=spec.output.dt, spins_up=spec.initial.spins_up,
                    cavity_alpha=spec.initial.cavity_alpha, vib_alpha=spec.initial.vib_alpha,
                    batch_size=num.batch_size, hp_coupling=num.hp_coupling)
    ens = run_twa_ensemble(cfg, workers=num.workers, observe=_twa_observe)
    names = spec.output.observables
    meta = ens.metadata
    diag = {"n_traj": ens.n_traj, "theta_clamps": meta.get("theta_clamps", 0), "variant": variant,
            "batch_sizes": meta.get("batch_sizes")}
    if "hp_validity" in meta:
        hv = meta["hp_validity"]
        idx = hv["first_flagged_index"]
        diag["hp_validity"] = {"threshold": hv["threshold"], "ratio": hv["ratio"],
                               "first_flagged_time": None if idx is None else float(ens.times[idx])}
    missing = [n for n in names if n not in ens.mean]
    if missing:
        raise RunError(f"TWA cannot report {', '.join(missing)} for this model")
    return ens.times, {n: ens.mean[n] for n in names}, {n: ens.stderr[n] for n in names}, diag, True


def _run_oracle(spec: RunSpec):
    prob = _problem(spec, mapped=False)
    names = spec.output.observables
    series, diag = _oracle_series(spec, prob, names, 0)
    if spec.numerics.check_cutoff:
        shifted, _ = _oracle_series(spec, prob, names, 4)
        diag["cutoff_shift"] = {n: float(np.max(np.abs(shifted[n] - series[n]))) for n in names}
    err = {n: np.zeros(len(spec.times)) for n in names}
    return spec.times, series, err, diag, True


def _oracle_series(spec: RunSpec, prob: _Problem, names, extra: int):
    cut = _cutoffs(spec, prob.n_modes, extra)
    basis = FockBasisConfig(prob.n_spins, cut)
    times = spec.times
    if spec.initial.kind == "random_superposition":
        psi0 = fock_expansion(_initial_ngs(spec, prob), cut).vector
    else:
        psi0 = coherent_product_state(basis, prob.spin_config, prob.alphas)
    psi0 = psi0 / np.linalg.norm(psi0)
    ops = {n: to_dense(_observable_op(n, prob, spec.model), basis) for n in names if n != "norm"}
    H = to_dense(prob.H, basis, sparse=True)
    diag: dict = {"cutoffs": list(cut), "dim": basis.dim}
    out = {}
    if spec.method == "oracle_closed":
        if prob.K is not None:
            H = H - 1j * to_dense(prob.K, basis, sparse=True)
        states = evolve_schrodinger(psi0, H, times)
        n2 = np.einsum("ti,ti->t", states.conj(), states).real
        for n, op in ops.items():
            out[n] = np.einsum("ti,ij,tj->t", states.conj(), op, states).real / n2
        if "norm" in names:
            out["norm"] = n2
        diag["norm_drift"] = float(np.max(np.abs(n2 - 1))) if prob.K is None else None
        return out, diag
    jumps = [to_dense(c, basis) for c in prob.jumps]
    res = evolve_lindblad(np.outer(psi0, psi0.conj()), H.toarray(), jumps, times, store=False,
                          observables=list(ops.values()))
    vals = np.real(res.rhos)
    for i, n in enumerate(ops):
        out[n] = vals[:, i]
    diag["trace_drift"] = float(np.max(np.abs(res.traces - 1)))
    diag["min_eigenvalue"] = float(np.nanmin(res.min_eigenvalues))
    return out, diag


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    v = float(v)
    return format(v, ".17g") if math.isfinite(v) else "null"


def _columns(bundle: ResultBundle) -> list:
    cols = ["t"]
    for n in bundle.mean:
        cols += [f"{n}_mean", f"{n}_stderr"]
    return cols


def _rows(bundle: ResultBundle):
    for i, t in enumerate(bundle.times):
        row = [t]
        for n in bundle.mean:
            row += [bundle.mean[n][i], bundle.stderr[n][i]]
        yield row


def emit_series(bundle: ResultBundle, directory: str | os.PathLike, basename: str,
                formats: Sequence[str] = ("csv", "json")) -> list:
    """Write the series (and a metadata sidecar) and return the written paths.

    Numbers carry 17 significant digits so that reading them back reproduces
    the floats bitwise. Non-finite values are written as ``null``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta_path = d / f"{basename}.meta.json"
    written = []
    header = (f"ngstwa {bundle.metadata.get('code_version', __version__)}; "
              f"config_hash={bundle.metadata.get('config_hash', '')}; metadata={meta_path.name}")
    cols = _columns(bundle)
    for fmt in formats:
        if fmt == "csv":
            path = d / f"{basename}.csv"
            buf = io.StringIO()
            buf.write(f"# {header}\n# units: {bundle.units}\n")
            if not bundle.complete:
                buf.write("# status: partial (null marks missing values)\n")
            buf.write(",".join(cols) + "\n")
            for row in _rows(bundle):
                buf.write(",".join(_fmt(v) for v in row) + "\n")
            path.write_text(buf.getvalue(), encoding="utf-8")
        elif fmt == "json":
            path = d / f"{basename}.json"
            head = json.dumps({"format": SERIES_FORMAT, "header": header, "units": bundle.units,
                               "metadata": meta_path.name, "status": "complete" if bundle.complete else "partial",
                               "columns": cols})
            rows = ",\n".join("  [" + ", ".join(_fmt(v) for v in row) + "]" for row in _rows(bundle))
            path.write_text(head[:-1] + ', "rows": [\n' + rows + "\n]}\n", encoding="utf-8")
        else:
            raise ValueError(f"unknown format {fmt!r}")
        written.append(path)
    meta_path.write_text(json.dumps(_jsonable(bundle.metadata), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    written.append(meta_path)
    return written


def _parse_cell(text: str) -> float:
    return math.nan if text == "null" else float(text)


def read_series_csv(path: str | os.PathLike) -> dict:
    """Columns of an emitted CSV file as float arrays (``null`` becomes NaN)."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    cols = next(reader)
    data = [[_parse_cell(c) for c in row] for row in reader if row]
    arr = np.array(data, dtype=float).reshape(len(data), len(cols))
    return {c: arr[:, i] for i, c in enumerate(cols)}


def read_series_json(path: str | os.PathLike) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    arr = np.array([[math.nan if v is None else float(v) for v in row] for row in doc["rows"]], dtype=float)
    arr = arr.reshape(len(doc["rows"]), len(doc["columns"]))
    return {c: arr[:, i] for i, c in enumerate(doc["columns"])}


# ---------------------------------------------------------------------------
# Presets and command line
# ---------------------------------------------------------------------------

def preset_dir() -> Path:
    """Directory holding the shipped run configurations.

    ``NGSTWA_PRESETS`` overrides the default, which is ``presets/`` next to
    the source tree.
    """
    env = os.environ.get("NGSTWA_PRESETS")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "presets"


def list_presets() -> list:
    d = preset_dir()
    return sorted(p.stem for p in d.glob("*.yaml")) if d.is_dir() else []


def _preset_summary(name: str) -> str:
    try:
        raw = yaml.safe_load((preset_dir() / f"{name}.yaml").read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError):
        return ""
    return str(raw.get("description", "")).strip().splitlines()[0] if raw.get("description") else ""


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ngstwa", description="Spin-boson dynamics with NGS, TWA and exact references.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a configuration file or preset")
    r.add_argument("config", help="path to a YAML file or the name of a shipped preset")
    r.add_argument("--method", choices=METHODS, help="override the method of the configuration")
    r.add_argument("--output-dir", help="override output.directory")
    r.add_argument("--basename", help="override output.basename")
    r.add_argument("--format", dest="formats", action="append", choices=("csv", "json"),
                   help="output format (repeatable; default from the configuration)")
    p = sub.add_parser("presets", help="inspect shipped presets")
    psub = p.add_subparsers(dest="action", required=True)
    psub.add_parser("list", help="list preset names")
    show = psub.add_parser("show", help="print a preset")
    show.add_argument("name")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "presets":
        if args.action == "list":
            for name in list_presets():
                summary = _preset_summary(name)
                print(f"{name:32s} {summary}".rstrip())
            return 0
        path = preset_dir() / f"{args.name}.yaml"
        if not path.exists():
            print(f"error: no preset named {args.name!r}", file=sys.stderr)
            return 2
        sys.stdout.write(path.read_text(encoding="utf-8"))
        return 0

    try:
        spec = load_config(args.config)
        if args.method:
            spec = spec.with_method(args.method)
        out = spec.output
        changes = {}
        if args.output_dir:
            changes["directory"] = args.output_dir
        if args.basename:
            changes["basename"] = args.basename
        if args.formats:
            changes["formats"] = tuple(args.formats)
        if changes:
            spec = dataclasses.replace(spec, output=dataclasses.replace(out, **changes))
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    log.info("running %s with method %s", spec.name, spec.method)
    try:
        bundle = run(spec)
    except RunError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    try:
        paths = emit_series(bundle, spec.output.directory, spec.output.basename, spec.output.formats)
    except OSError as exc:
        print(f"could not write results: {exc}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    if not bundle.complete:
        print(f"run incomplete: {bundle.metadata.get('diagnostics', {})}", file=sys.stderr)
        return 1
    return 0
