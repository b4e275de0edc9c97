"""Batch front-end: run configurations, simulation and certification scenarios.

Config files are flat ``key = value`` lines with ``#`` comments, e.g.::

    target = sphere2
    initial_data = spin_wave(pi/4, 1)
    n_points = 128
    dt = 1e-4
    t_final = 0.5
    diag_stride = 10

Exit codes: 0 all gates pass, 1 a gate failed, 2 configuration error,
3 solver abort.
"""
from __future__ import annotations

import argparse
import ast
import dataclasses
import itertools
import json
import logging
import math
import operator
import os
import re
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics, divcurl, initial
from .flow import SchemeConfig, StabilityError, evolve
from .geometry import make_geometry
from .grid import PeriodicGrid

log = logging.getLogger("smflow")

EXIT_OK, EXIT_GATE, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
SCENARIOS = ("simulate", "certify_divcurl", "sweep")
UNIT_TOL = 1e-10


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


# ---------------------------------------------------------------------------
# parsing

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}


def parse_number(text):
    """Float from a literal or a small arithmetic expression in ``pi``."""

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        raise ValueError(f"not a number: {text!r}")

    try:
        return ev(ast.parse(str(text).strip(), mode="eval"))
    except SyntaxError:
        raise ValueError(f"not a number: {text!r}") from None


def parse_list(text, conv=parse_number):
    text = str(text).strip().strip("[]")
    if not text:
        return []
    return [conv(p) for p in text.split(",")]


def parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config_file(path):
    """``key = value`` pairs; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ConfigError(f"line {lineno}", "empty key")
            out[key] = value
    return out


_INITIAL_ARGS = {
    "constant": (),
    "great_circle": ("n",),
    "spin_wave": ("theta", "n"),
    "random_smooth": ("seed", "band"),
}


def parse_initial(text):
    """``name`` or ``name(arg, ...)`` -> (name, {param: value})."""
    m = re.fullmatch(r"\s*(\w+)\s*(?:\((.*)\))?\s*", str(text))
    if not m or m.group(1) not in _INITIAL_ARGS:
        raise ConfigError("initial_data", f"expected one of {sorted(_INITIAL_ARGS)}, got {text!r}")
    name, args = m.group(1), m.group(2)
    params = {}
    if args is not None and args.strip():
        values = [a.strip() for a in args.split(",")]
        names = _INITIAL_ARGS[name]
        if len(values) > len(names):
            raise ConfigError("initial_data", f"{name} takes at most {len(names)} arguments")
        for k, v in zip(names, values):
            params[k] = v
    return name, params


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    target: str = "sphere2"
    initial_data: str = "spin_wave"
    theta: float = math.pi / 4
    n: int = 1
    seed: int = 1
    band: int = 4
    amplitude: float = 0.8
    n_points: int = 128
    derivative: str = "spectral"
    dt: float = 1e-4
    t_final: float = 0.5
    diag_stride: int = 10
    scheme: str = "implicit_midpoint"
    fixed_point_tol: float = 1e-12
    max_fixed_point_iters: int = 100
    cfl_safety: float = 0.25
    force_dt: bool = False
    output_dir: str = "out"
    scenario: str = "simulate"
    # gate tolerances
    m_drift_tol: float = 1e-8
    Q_drift_tol: float = 1e-6
    b_drift_tol: float = 1e-6
    identity_tol: float = 1e-7
    divcurl_tol: float = 1e-5
    route_tol: float = 1e-7
    ratio_cap: float = 10.0
    # sweep grid
    sweep_theta: tuple = ()
    sweep_n: tuple = ()
    sweep_seeds: tuple = ()
    sweep_band: int = 4

    def __post_init__(self):
        if self.target not in ("sphere2", "torus2", "cp1"):
            raise ConfigError("target", f"unknown target {self.target!r}")
        if self.initial_data not in _INITIAL_ARGS:
            raise ConfigError("initial_data", f"unknown initial data {self.initial_data!r}")
        if self.scenario not in SCENARIOS:
            raise ConfigError("scenario", f"expected one of {SCENARIOS}, got {self.scenario!r}")
        if self.derivative not in ("spectral", "fd4"):
            raise ConfigError("derivative", f"unknown derivative scheme {self.derivative!r}")
        for key in ("dt", "t_final", "fixed_point_tol", "cfl_safety", "m_drift_tol", "Q_drift_tol",
                    "b_drift_tol", "identity_tol", "divcurl_tol", "route_tol", "ratio_cap"):
            v = getattr(self, key)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(key, f"must be a positive number, got {v!r}")
        for key in ("n_points", "diag_stride", "max_fixed_point_iters", "band", "n", "sweep_band"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be a positive integer")
        if self.n_points < 8 or self.n_points % 2:
            raise ConfigError("n_points", "must be an even integer >= 8")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed", "must fit in an unsigned 64-bit integer")
        if not 0 < self.amplitude < 1 and self.target != "torus2":
            raise ConfigError("amplitude", "must lie in (0, 1)")
        if self.target == "torus2" and self.initial_data == "random_smooth" and not self.amplitude > 0:
            raise ConfigError("amplitude", "must be positive")
        n_steps = self.t_final / self.dt
        if abs(n_steps - round(n_steps)) > 1e-6 * n_steps:
            raise ConfigError("t_final", "must be an integer multiple of dt")
        if round(n_steps) % self.diag_stride:
            raise ConfigError("diag_stride", f"must divide the step count {round(n_steps)}")
        try:
            SchemeConfig(scheme=self.scheme)
        except ValueError as exc:
            raise ConfigError("scheme", str(exc)) from None

    # parsing --------------------------------------------------------------
    @classmethod
    def from_mapping(cls, raw):
        """Build from string values (config file entries)."""
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        raw = dict(raw)
        if "initial_data" in raw:
            name, params = parse_initial(raw.pop("initial_data"))
            kw["initial_data"] = name
            for k, v in params.items():
                if k in raw:
                    raise ConfigError(k, "given both in initial_data(...) and as a key")
                raw[k] = v
        for key, value in raw.items():
            if key not in types:
                raise ConfigError(key, "unknown configuration key")
            kind = types[key]
            try:
                if kind == "float":
                    kw[key] = parse_number(value)
                elif kind == "int":
                    num = parse_number(value) if not str(value).strip().isdigit() else int(value)
                    if num != int(num):
                        raise ValueError(f"not an integer: {value!r}")
                    kw[key] = int(num)
                elif kind == "bool":
                    kw[key] = parse_bool(value)
                elif kind == "tuple":
                    conv = parse_number if key == "sweep_theta" else (lambda s: int(s.strip()))
                    kw[key] = tuple(parse_list(value, conv))
                else:
                    kw[key] = str(value).strip()
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
        return cls(**kw)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("sweep_theta", "sweep_n", "sweep_seeds"):
            d[k] = list(d[k])
        return d

    # builders -------------------------------------------------------------
    def initial_params(self):
        return {
            "constant": {},
            "great_circle": {"n": self.n},
            "spin_wave": {"theta": self.theta, "n": self.n},
            "random_smooth": {"seed": self.seed, "band": self.band, "amplitude": self.amplitude},
        }[self.initial_data]

    def scheme_config(self):
        return SchemeConfig(
            scheme=self.scheme,
            dt=self.dt,
            fixed_point_tol=self.fixed_point_tol,
            max_fixed_point_iters=self.max_fixed_point_iters,
            cfl_safety=self.cfl_safety,
            force_dt=self.force_dt,
        )

    def build_state(self):
        grid = PeriodicGrid(self.n_points, derivative=self.derivative)
        geometry = make_geometry(self.target)
        return initial.make_initial(self.initial_data, grid, geometry, **self.initial_params())


def load_config(path=None, overrides=None):
    raw = read_config_file(path) if path else {}
    raw.update(overrides or {})
    return RunConfig.from_mapping(raw)


# ---------------------------------------------------------------------------
# output helpers


def atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_json(path, obj):
    atomic_write(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class RunResult:
    summary: dict
    exit_code: int
    series: diagnostics.DiagnosticsSeries | None = None
    trajectory: object = None
    files: list = field(default_factory=list)


def _drift(col, relative_to):
    return float(np.max(np.abs(col - col[0])) / relative_to) if col.size else 0.0


def _gate(value, tol, ok=None):
    passed = bool(value <= tol) if ok is None else bool(ok)
    return {"value": value, "tol": tol, "pass": passed}


def simulate(cfg, write=True):
    """Evolve, compute diagnostics and gates; optionally write outputs."""
    t0 = time.perf_counter()
    u0 = cfg.build_state()
    scheme = cfg.scheme_config()
    traj, series = evolve(u0, cfg.t_final, scheme, cfg.diag_stride)
    m = series.column("m")
    Q = series.column("Q")
    b = series.column("b_integral")
    E = series.column("E")
    m0 = float(m[0])
    drift = {
        "m_relative": _drift(m, m0 if m0 > 0 else 1.0),
        "Q_relative": _drift(Q, max(1.0, abs(Q[0]))),
        "b_integral_relative": _drift(b, max(1.0, abs(b[0]))),
    }
    ident = float(np.max(np.abs(series.column("identity_residual"))))
    xi1_mono = bool(np.all(np.diff(series.xi1) >= 0))
    monitors = [diagnostics.interpolation_monitors(s) for s in series.samples]
    monitor_max = {}
    for key in monitors[0]:
        vals = [mo[key]["ratio"] for mo in monitors if mo[key]["ratio"] is not None]
        monitor_max[key] = max(vals) if vals else None
    gates = {
        "m_drift": _gate(drift["m_relative"], cfg.m_drift_tol),
        "Q_drift": _gate(drift["Q_relative"], cfg.Q_drift_tol),
        "b_integral_drift": _gate(drift["b_integral_relative"], cfg.b_drift_tol),
        "identity_residual": _gate(ident, cfg.identity_tol),
        "xi1_nondecreasing": {"value": xi1_mono, "pass": xi1_mono},
        "bound_ratio_finite": {"pass": bool(np.all(np.isfinite(E)))},
    }
    if u0.geometry.key == "sphere2":
        dev = max(float(np.max(np.abs(np.linalg.norm(s.points, axis=-1) - 1.0))) for s in traj.states)
        gates["unit_norm"] = _gate(dev, UNIT_TOL)
    summary = {
        "config": cfg.to_dict(),
        "aborted": traj.aborted,
        "abort_reason": traj.abort_reason,
        "n_samples": len(series.samples),
        "initial": series.samples[0].to_dict(),
        "terminal": series.samples[-1].to_dict() | {"xi1": series.xi1[-1], "xi2": series.xi2[-1]},
        "drift": drift,
        "max_residuals": {
            "balance1": max(series.balance1_residual_norm, default=None),
            "balance2": max(series.balance2_residual_norm, default=None),
            "identity": ident,
            "proj_residual": float(np.max(series.column("proj_residual"))),
        },
        "interpolation_max_ratio": monitor_max,
        "bound": {
            "E0": float(E[0]),
            "sup_E": float(np.max(E)),
            "ratio": float(np.max(E) / (E[0] + 1.0)),
        },
        "gates": gates,
    }
    result = RunResult(summary, EXIT_OK, series, traj)
    if cfg.scenario == "certify_divcurl":
        _certify(cfg, result, write)
    passed = all(g["pass"] for g in gates.values())
    summary["passed"] = passed
    if traj.aborted:
        result.exit_code = EXIT_ABORT
    elif not passed:
        result.exit_code = EXIT_GATE
    summary["exit_code"] = result.exit_code
    summary["wall_time_s"] = time.perf_counter() - t0
    if write:
        out = cfg.output_dir
        os.makedirs(out, exist_ok=True)
        atomic_write(os.path.join(out, "series.csv"), diagnostics.series_csv(series))
        write_json(os.path.join(out, "summary.json"), summary)
        result.files += [os.path.join(out, "series.csv"), os.path.join(out, "summary.json")]
    return result


def _certify(cfg, result, write):
    traj = result.trajectory
    gates = result.summary["gates"]
    if len(traj.states) < 2:
        gates["divcurl_valid"] = {"pass": False, "value": "fewer than two stored states"}
        return
    system = divcurl.from_flow(traj)
    report = divcurl.verify_periodic(system, tol=cfg.divcurl_tol, ratio_cap=cfg.ratio_cap)
    if not report.valid:
        report.reason += "; use a smaller diag_stride"
    xi2 = result.series.xi2[-1]
    consistency = abs(report.lhs - xi2) / max(1.0, abs(xi2))
    result.summary["divcurl"] = report.to_dict() | {"xi2_T": xi2, "lhs_vs_xi2_gap": consistency}
    gates["divcurl_valid"] = {"value": report.valid, "pass": report.valid}
    gates["divcurl_route_gap"] = _gate(report.route_gap, cfg.route_tol)
    gates["divcurl_certified"] = {"value": report.empirical_ratio, "pass": report.certified}
    if write:
        out = cfg.output_dir
        os.makedirs(out, exist_ok=True)
        divcurl.save_report(os.path.join(out, "divcurl.json"), report)
        divcurl.save_system(os.path.join(out, "balance_system.smfdcv"), system)
        result.files += [os.path.join(out, "divcurl.json"), os.path.join(out, "balance_system.smfdcv")]


def sweep_cells(cfg):
    """Cell configurations of a sweep: spin waves over theta x n, random data over seeds."""
    cells = []
    for theta, n in itertools.product(cfg.sweep_theta, cfg.sweep_n):
        cells.append(cfg.replace(initial_data="spin_wave", theta=theta, n=n))
    for seed in cfg.sweep_seeds:
        cells.append(cfg.replace(initial_data="random_smooth", seed=seed, band=cfg.sweep_band))
    return cells


def _cell_name(c):
    if c.initial_data == "spin_wave":
        return f"spin_wave_theta{c.theta:.6g}_n{c.n}"
    if c.initial_data == "random_smooth":
        return f"random_smooth_seed{c.seed}_band{c.band}"
    return c.initial_data


def _trend(values):
    d = np.diff(values)
    if d.size == 0:
        return "n/a"
    if np.all(d >= 0):
        return "nondecreasing"
    if np.all(d <= 0):
        return "nonincreasing"
    return "mixed"


SWEEP_COLUMNS = ("cell", "initial_data", "theta", "n", "seed", "band", "n_points",
                 "m0", "E0", "sup_E", "ratio", "aborted", "m_drift", "Q_drift", "exit_code")


def sweep(cfg, write=True):
    """Run every cell, collect sup_t E / (E(0) + 1) and sort by m(0)."""
    t0 = time.perf_counter()
    rows = []
    for c in sweep_cells(cfg):
        name = _cell_name(c)
        c = c.replace(scenario="simulate", output_dir=os.path.join(cfg.output_dir, name))
        try:
            res = simulate(c, write=write)
        except (StabilityError, ConfigError) as exc:
            rows.append({"cell": name, "aborted": True, "error": str(exc), "exit_code": EXIT_CONFIG,
                         "m0": math.nan, "ratio": math.nan})
            continue
        s = res.summary
        log.info("sweep cell %s: ratio %.4g", name, s["bound"]["ratio"])
        rows.append({
            "cell": name, "initial_data": c.initial_data, "theta": c.theta, "n": c.n,
            "seed": c.seed, "band": c.band, "n_points": c.n_points,
            "m0": s["initial"]["m"], "E0": s["bound"]["E0"], "sup_E": s["bound"]["sup_E"],
            "ratio": s["bound"]["ratio"], "aborted": s["aborted"],
            "m_drift": s["drift"]["m_relative"], "Q_drift": s["drift"]["Q_relative"],
            "exit_code": res.exit_code,
        })
    rows.sort(key=lambda r: (math.isnan(r["m0"]), r["m0"]))
    finite = [r for r in rows if np.isfinite(r.get("ratio", math.nan))]
    aborted = any(r.get("aborted") for r in rows)
    all_finite = len(finite) == len(rows)
    summary = {
        "config": cfg.to_dict(),
        "table": rows,
        "n_cells": len(rows),
        "ratio_trend_in_m0": _trend([r["ratio"] for r in finite]),
        "max_ratio": max((r["ratio"] for r in finite), default=None),
        "all_finite": all_finite,
        "any_aborted": aborted,
        "wall_time_s": time.perf_counter() - t0,
    }
    code = EXIT_ABORT if aborted else (EXIT_OK if all_finite else EXIT_GATE)
    summary["exit_code"] = code
    if write:
        os.makedirs(cfg.output_dir, exist_ok=True)
        lines = [",".join(SWEEP_COLUMNS)]
        for r in rows:
            lines.append(",".join(_csv_cell(r.get(k)) for k in SWEEP_COLUMNS))
        atomic_write(os.path.join(cfg.output_dir, "sweep.csv"), "\n".join(lines) + "\n")
        write_json(os.path.join(cfg.output_dir, "summary.json"), summary)
    return RunResult(summary, code)


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def run(cfg, write=True):
    """Dispatch on ``cfg.scenario``."""
    if cfg.scenario == "sweep":
        return sweep(cfg, write)
    return simulate(cfg, write)


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="smflow", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--scenario", choices=SCENARIOS, help="override the configured scenario")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="random_smooth seed (unsigned 64-bit)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration key; may be repeated")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"config error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return EXIT_CONFIG
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.scenario:
        overrides["scenario"] = args.scenario
    if args.out:
        overrides["output_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    try:
        cfg = load_config(args.config, overrides)
        result = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StabilityError as exc:
        print(f"config error: dt: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: output_dir: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    s = result.summary
    if cfg.scenario == "sweep":
        print(f"sweep: {s['n_cells']} cells, max ratio {s['max_ratio']}, exit {result.exit_code}")
    else:
        failed = [k for k, g in s["gates"].items() if not g["pass"]]
        status = "aborted" if s["aborted"] else ("pass" if not failed else "fail: " + ", ".join(failed))
        print(f"{cfg.scenario}: {status} (exit {result.exit_code})")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
