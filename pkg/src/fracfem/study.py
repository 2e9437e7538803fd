"""Configuration-driven single solves and convergence studies.

A study is described by one JSON file::

    {
      "problem": {"n": 1, "s": 0.5, "domain": {"kind": "interval", "a": -1, "b": 1},
                  "nonlinearity": {"tag": "none"}, "benchmark": {"kind": "getoor"}},
      "discretization": {"scheme": "state_only", "mesh": {"family": "quasi_uniform"},
                         "h": [0.0625, 0.03125]},
      "tolerances": {"newton": 1e-10, "opt": 1e-9}
    }

The physical parameters ``s``, ``alpha``, ``lower`` and ``upper`` have no
defaults.  Rows of a study are independent jobs; they may run in a process
pool and are merged in row order, so the table does not depend on the
worker count.
"""
from __future__ import annotations

import json
import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assembly import NonlinearityPreset, assemble_load, build_system
from .bench import (ErrorTable, ExactSolution, error_energy, error_l2, eoc, getoor,
                    manufactured_control, manufactured_semilinear)
from .control import (ControlFieldP0, ImplicitControl, OptimizationError, check_optimality,
                      project_box, solve_fully_discrete, solve_variational)
from .mesh import (GradingSpec, Interval, MeshError, Polygon, SimplicialMesh, build_graded,
                   build_quasi_uniform, locate, prolongation, unit_square)
from .problem import ProblemSpec, TrackingObjective
from .fracquad import element_quadrature
from .pde_solve import solve_state

log = logging.getLogger(__name__)

SCHEMES = ("state_only", "fully_discrete", "variational")
BENCHMARKS = ("getoor", "manufactured_semilinear", "manufactured_control", "constant_source",
              "tracking")
EXACT_BENCHMARKS = ("getoor", "manufactured_semilinear", "manufactured_control")


class ConfigError(ValueError):
    """Invalid study configuration; ``line`` points into the JSON source."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class StudyConfig:
    n: int
    s: float
    domain: object
    nonlinearity: NonlinearityPreset
    benchmark: dict
    scheme: str
    family: str
    h: list
    mu: float = 1.0
    c_sigma: float = 1.0
    alpha: Optional[float] = None
    lower: Optional[float] = None
    upper: Optional[float] = None
    reference_h: Optional[float] = None
    tol_newton: float = 1e-10
    tol_opt: float = 1e-9
    multistart: int = 0
    log_exponents: dict = field(default_factory=dict)
    workers: int = 1
    out: Optional[str] = None
    raw: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return self.raw


def _line_of(text: str, key: str) -> Optional[int]:
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _require(block: dict, key: str, text: str, where: str):
    if key not in block:
        raise ConfigError(f"missing required field '{where}.{key}'", _line_of(text, where))
    return block[key]


def _number(value, key: str, text: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"'{key}' must be a finite number", _line_of(text, key))
    return float(value)


def _parse_domain(spec, n: int, text: str):
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("domain must be an object with a 'kind'", _line_of(text, "domain"))
    kind = spec["kind"]
    try:
        if kind == "interval":
            dom = Interval(float(spec["a"]), float(spec["b"]))
        elif kind == "unit_square":
            dom = unit_square()
        elif kind == "polygon":
            dom = Polygon(spec["vertices"])
        else:
            raise ConfigError(f"unknown domain kind '{kind}'", _line_of(text, "domain"))
    except (KeyError, TypeError, ValueError, MeshError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid domain: {exc}", _line_of(text, "domain")) from exc
    if (n == 1) != isinstance(dom, Interval):
        raise ConfigError(f"domain kind '{kind}' does not match n = {n}", _line_of(text, "domain"))
    return dom


def parse_config(data, text: str = "") -> StudyConfig:
    """Validate a decoded JSON document and build a :class:`StudyConfig`."""
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object", 1)
    problem = _require(data, "problem", text, "config")
    disc = _require(data, "discretization", text, "config")
    tols = data.get("tolerances", {})
    n = _require(problem, "n", text, "problem")
    if n not in (1, 2):
        raise ConfigError("n must be 1 or 2", _line_of(text, "n"))
    s = _number(_require(problem, "s", text, "problem"), "s", text)
    if not 0.0 < s < 1.0:
        raise ConfigError("s must lie in (0, 1)", _line_of(text, "s"))
    domain = _parse_domain(_require(problem, "domain", text, "problem"), n, text)

    nl = problem.get("nonlinearity", {"tag": "none"})
    try:
        preset = NonlinearityPreset(nl.get("tag", "none"), float(nl.get("c", 1.0)))
    except (AttributeError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid nonlinearity: {exc}", _line_of(text, "nonlinearity")) from exc

    bench = _require(problem, "benchmark", text, "problem")
    if not isinstance(bench, dict) or bench.get("kind") not in BENCHMARKS:
        raise ConfigError(f"benchmark.kind must be one of {BENCHMARKS}", _line_of(text, "benchmark"))

    scheme = _require(disc, "scheme", text, "discretization")
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}", _line_of(text, "scheme"))
    mesh_block = _require(disc, "mesh", text, "discretization")
    family = mesh_block.get("family")
    if family not in ("quasi_uniform", "graded"):
        raise ConfigError("mesh.family must be 'quasi_uniform' or 'graded'", _line_of(text, "family"))
    mu = _number(mesh_block.get("mu", 1.0), "mu", text)
    c_sigma = _number(mesh_block.get("c_sigma", 1.0), "c_sigma", text)
    if family == "graded" and "mu" not in mesh_block:
        raise ConfigError("graded meshes need 'mu'", _line_of(text, "mesh"))
    if mu < 1.0 or c_sigma <= 0:
        raise ConfigError("need mu >= 1 and c_sigma > 0", _line_of(text, "mu") or _line_of(text, "mesh"))

    hs = _require(disc, "h", text, "discretization")
    if not isinstance(hs, list) or len(hs) == 0:
        raise ConfigError("h must be a non-empty list", _line_of(text, "h"))
    hs = [_number(h, "h", text) for h in hs]
    if any(h <= 0 for h in hs) or any(b >= a for a, b in zip(hs, hs[1:])):
        raise ConfigError("h must be positive and strictly decreasing", _line_of(text, "h"))
    ref = disc.get("reference_h")
    if ref is not None:
        ref = _number(ref, "reference_h", text)
        if not 0 < ref < hs[-1]:
            raise ConfigError("reference_h must be below the finest h", _line_of(text, "reference_h"))

    alpha = lower = upper = None
    if scheme != "state_only":
        alpha = _number(_require(problem, "alpha", text, "problem"), "alpha", text)
        lower = _number(_require(problem, "lower", text, "problem"), "lower", text)
        upper = _number(_require(problem, "upper", text, "problem"), "upper", text)
        if alpha <= 0:
            raise ConfigError("alpha must be positive", _line_of(text, "alpha"))
        if not lower < upper:
            raise ConfigError("need lower < upper", _line_of(text, "lower"))

    kind = bench["kind"]
    if kind in ("getoor", "manufactured_semilinear", "manufactured_control"):
        if not (isinstance(domain, Interval) and domain.a == -1.0 and domain.b == 1.0) and n == 1:
            raise ConfigError(f"benchmark '{kind}' lives on the interval (-1, 1)", _line_of(text, "domain"))
        if n == 2:
            raise ConfigError(f"benchmark '{kind}' needs the unit ball; use n = 1", _line_of(text, "benchmark"))
    if kind == "getoor" and not preset.is_zero:
        raise ConfigError("benchmark 'getoor' needs nonlinearity 'none'", _line_of(text, "nonlinearity"))
    if kind in ("getoor", "manufactured_semilinear", "constant_source") and scheme != "state_only":
        raise ConfigError(f"benchmark '{kind}' is a state benchmark", _line_of(text, "scheme"))
    if kind in ("manufactured_control", "tracking") and scheme == "state_only":
        raise ConfigError(f"benchmark '{kind}' needs a control scheme", _line_of(text, "scheme"))
    if kind == "manufactured_control" and not lower < 0 < upper:
        raise ConfigError("manufactured_control needs lower < 0 < upper", _line_of(text, "lower"))
    if kind not in EXACT_BENCHMARKS and ref is None:
        raise ConfigError(f"benchmark '{kind}' has no exact solution: set reference_h",
                          _line_of(text, "benchmark"))
    if ref is not None and n == 1 and family == "graded" and mu > 1:
        log.info("1D graded meshes are not nested; reference errors use interpolation")

    out = data.get("output", {})
    try:
        cfg = StudyConfig(
            n=n, s=s, domain=domain, nonlinearity=preset, benchmark=dict(bench), scheme=scheme,
            family=family, h=hs, mu=mu, c_sigma=c_sigma, alpha=alpha, lower=lower, upper=upper,
            reference_h=ref, tol_newton=float(tols.get("newton", 1e-10)),
            tol_opt=float(tols.get("opt", 1e-9)), multistart=int(data.get("multistart", 0)),
            log_exponents=dict(data.get("log_exponents", {})), workers=int(data.get("workers", 1)),
            out=out.get("dir") if isinstance(out, dict) else None, raw=data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.tol_newton <= 0 or cfg.tol_opt <= 0:
        raise ConfigError("tolerances must be positive", _line_of(text, "tolerances"))
    return cfg


def load_config(path) -> StudyConfig:
    """Read and validate a JSON config file; raises ConfigError."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg} (column {exc.colno})", exc.lineno) from exc
    return parse_config(data, text)


# ---------------------------------------------------------------------------
# problem and mesh construction


def _constant(value: float):
    return lambda x: np.full(len(x), value)


def build_problem(cfg: StudyConfig):
    """Return (ProblemSpec, exact) where exact is None, an ExactSolution or a
    ControlBenchmark."""
    b = cfg.benchmark
    kind = b["kind"]
    if kind == "getoor":
        return ProblemSpec(s=cfg.s, source=_constant(1.0)), getoor(cfg.n, cfg.s)
    if kind == "manufactured_semilinear":
        return manufactured_semilinear(cfg.n, cfg.s, float(b.get("lambda", 1.0)), cfg.nonlinearity)
    if kind == "manufactured_control":
        bm = manufactured_control(cfg.n, cfg.s, cfg.alpha, cfg.lower, cfg.upper, cfg.nonlinearity,
                                  lam_u=float(b.get("lambda_u", 1.0)),
                                  lam_p=b.get("lambda_p"))
        return bm.problem, bm
    if kind == "constant_source":
        return ProblemSpec(s=cfg.s, nonlinearity=cfg.nonlinearity,
                           source=_constant(float(b.get("value", 1.0)))), None
    # tracking of a constant target with an optional constant source
    objective = TrackingObjective(_constant(float(b.get("target", 1.0))))
    source = float(b.get("source", 0.0))
    return ProblemSpec(s=cfg.s, nonlinearity=cfg.nonlinearity, objective=objective,
                       alpha=cfg.alpha, lower=cfg.lower, upper=cfg.upper,
                       source=_constant(source) if source else None), None


def build_meshes(cfg: StudyConfig, hs=None) -> list:
    """One mesh per h; 2D meshes form a nested chain (each the base of the next)."""
    hs = cfg.h if hs is None else hs
    meshes = []
    base = None
    for h in hs:
        if cfg.n == 1:
            if cfg.family == "quasi_uniform":
                m = build_quasi_uniform(cfg.domain, h)
            else:
                m = build_graded(cfg.domain, GradingSpec(h=h, mu=cfg.mu, c_sigma=cfg.c_sigma))
        else:
            mu = cfg.mu if cfg.family == "graded" else 1.0
            c = cfg.c_sigma if cfg.family == "graded" else 1.0
            if base is None and cfg.family == "quasi_uniform":
                m = build_quasi_uniform(cfg.domain, h)
            else:
                m = build_graded(cfg.domain, GradingSpec(h=h, mu=mu, c_sigma=c), base=base)
            base = m
        meshes.append(m)
    return meshes


# ---------------------------------------------------------------------------
# one row


@dataclass
class RowResult:
    index: int
    h: float
    mesh: SimplicialMesh
    converged: bool
    state: np.ndarray
    adjoint: Optional[np.ndarray] = None
    control: Optional[np.ndarray] = None
    stats: dict = field(default_factory=dict)
    system: object = None


def _solve_control(cfg, problem, system, rng=None):
    solver = solve_fully_discrete if cfg.scheme == "fully_discrete" else solve_variational
    trip = solver(problem, system, tol_opt=cfg.tol_opt)
    stats = {"iterations": trip.iterations, "fixed_point_residual": trip.residual,
             "objective": trip.objective}
    report = check_optimality(trip, problem, system)
    stats["optimality"] = report.to_dict()
    if cfg.multistart and rng is not None:
        stats["multistart"] = _multistart(cfg, problem, system, trip, rng)
    return trip, stats


def _multistart(cfg, problem, system, trip, rng) -> dict:
    """Re-solve from random admissible starts and log the agreement."""
    mesh = system.mesh
    diffs = []
    for _ in range(cfg.multistart):
        if cfg.scheme == "fully_discrete":
            z0 = rng.uniform(cfg.lower, cfg.upper, mesh.n_elements)
            other = solve_fully_discrete(problem, system, tol_opt=cfg.tol_opt, z0=z0)
            diffs.append(float(np.max(np.abs(other.control.values - trip.control.values))))
        else:
            q0 = -cfg.alpha * rng.uniform(cfg.lower, cfg.upper, mesh.n_dofs)
            other = solve_variational(problem, system, tol_opt=cfg.tol_opt, q0=q0)
            diffs.append(float(np.max(np.abs(other.adjoint.coeffs - trip.adjoint.coeffs))))
    agree = all(d <= 1e-6 for d in diffs)
    if not agree:
        log.warning("multistart found different local solutions (max diffs %s)", diffs)
    log.info("multistart: %d starts, max difference %.3e", len(diffs), max(diffs, default=0.0))
    return {"starts": len(diffs), "max_differences": diffs, "agree": agree}


def solve_row(cfg: StudyConfig, index: int, h: float, mesh: SimplicialMesh,
              keep_system: bool = False, seed: Optional[int] = None, system=None) -> RowResult:
    """Assemble (unless ``system`` is given for this mesh) and solve on one mesh."""
    t0 = time.perf_counter()
    problem, _ = build_problem(cfg)
    if system is None or system.s != cfg.s or system.mesh.n_vertices != mesh.n_vertices:
        system = build_system(mesh, cfg.s)
    t_asm = time.perf_counter() - t0
    stats = {"h_max": mesh.h, "elements": mesh.n_elements}
    rng = np.random.default_rng(seed) if seed is not None else None
    if cfg.scheme == "state_only":
        rhs = assemble_load(mesh, problem.source, boundary_singular=problem.source_singular)
        u, rep = solve_state(system, problem.nonlinearity, rhs, cfg.tol_newton)
        stats.update(newton=rep.to_dict(), max_abs_state=u.max_abs)
        row = RowResult(index, h, mesh, rep.converged, u.coeffs, stats=stats)
    else:
        try:
            trip, cstats = _solve_control(cfg, problem, system, rng)
        except OptimizationError as exc:
            stats["error"] = str(exc)
            return RowResult(index, h, mesh, False, np.zeros(mesh.n_dofs), stats=stats)
        stats.update(cstats, max_abs_state=trip.state.max_abs)
        ctrl = (trip.control.values if cfg.scheme == "fully_discrete" else trip.control.q)
        row = RowResult(index, h, mesh, trip.converged, trip.state.coeffs, trip.adjoint.coeffs,
                        np.array(ctrl), stats=stats)
    stats["seconds_assembly"] = t_asm
    stats["seconds_total"] = time.perf_counter() - t0
    log.info("row %d: h=%.5g N=%d converged=%s (%.1fs)", index, h, mesh.n_dofs, row.converged,
             stats["seconds_total"])
    if keep_system:
        row.system = system
    return row


def _row_job(args):
    return solve_row(*args)


# ---------------------------------------------------------------------------
# errors


def _control_object(cfg, mesh, values):
    if cfg.scheme == "fully_discrete":
        return ControlFieldP0(values, cfg.lower, cfg.upper)
    return ImplicitControl(mesh, values, cfg.alpha, cfg.lower, cfg.upper)


def _exact_errors(cfg, row: RowResult, exact) -> dict:
    system = row.system
    mesh = row.mesh
    if cfg.scheme == "state_only":
        sol: ExactSolution = exact
        return {"e_L2": error_l2(mesh, row.state, sol),
                "e_energy": error_energy(system, row.state, sol)}
    bm = exact
    ctrl = _control_object(cfg, mesh, row.control)
    return {"e_L2": error_l2(mesh, row.state, bm.state),
            "e_energy": error_energy(system, row.state, bm.state),
            "e_ctrl": error_l2(mesh, ctrl, bm.control)}


def _reference_errors(cfg, row: RowResult, ref: RowResult) -> dict:
    fine = ref.mesh
    P = prolongation(row.mesh, fine)
    e = ref.state - P @ row.state
    out = {"e_L2": float(np.sqrt(max(e @ (ref.system.M @ e), 0.0))),
           "e_energy": float(np.sqrt(max(e @ ref.system.A @ e, 0.0)))}
    if cfg.scheme == "state_only":
        return out
    q = element_quadrature(fine, 8, graded=False)
    zf = _control_object(cfg, fine, ref.control).values_at(q)
    if cfg.scheme == "variational":
        # a coarse P1 adjoint is exactly representable on the nested fine mesh
        zc = ImplicitControl(fine, P @ row.control, cfg.alpha, cfg.lower, cfg.upper).values_at(q)
    else:
        parent = locate(row.mesh, fine.centroids)
        zc = row.control[parent][q.element]
    out["e_ctrl"] = float(np.sqrt(np.sum(q.weights * (zf - zc) ** 2)))
    return out


# ---------------------------------------------------------------------------
# drivers


@dataclass
class StudyResult:
    table: ErrorTable
    report: dict
    converged: bool


def _run_rows(jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_row_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_row_job, jobs))
    return sorted(results, key=lambda r: r.index)


def run_study(cfg: StudyConfig, workers: Optional[int] = None, seed: Optional[int] = None,
              systems: Optional[dict] = None) -> StudyResult:
    """Solve on every h of the config and tabulate errors and observed orders.

    ``systems`` optionally maps (s, h) to assembled systems; it is read and
    filled in place so that studies sharing meshes assemble them once.
    Only used with a single worker.
    """
    workers = cfg.workers if workers is None else workers
    hs = list(cfg.h) + ([cfg.reference_h] if cfg.reference_h is not None else [])
    meshes = build_meshes(cfg, hs)
    shared = systems if systems is not None and workers <= 1 else {}
    jobs = [(cfg, k, h, m, True, None if seed is None else seed + k, shared.get((cfg.s, h)))
            for k, (h, m) in enumerate(zip(hs, meshes))]
    rows = _run_rows(jobs, workers)
    if systems is not None and workers <= 1:
        systems.update({(cfg.s, r.h): r.system for r in rows})
    ref = rows.pop() if cfg.reference_h is not None else None
    _, exact = build_problem(cfg)

    table = ErrorTable(metadata={
        "n": cfg.n, "s": cfg.s, "scheme": cfg.scheme, "family": cfg.family, "mu": cfg.mu,
        "c_sigma": cfg.c_sigma, "preset": cfg.nonlinearity.tag, "benchmark": cfg.benchmark["kind"],
        "reference_h": cfg.reference_h})
    converged = all(r.converged for r in rows) and (ref is None or ref.converged)
    row_reports = []
    for r in rows:
        errs = {}
        if r.converged and (ref is None or ref.converged):
            errs = _exact_errors(cfg, r, exact) if ref is None else _reference_errors(cfg, r, ref)
        table.add(r.h, r.mesh.n_dofs, errs.get("e_L2"), errs.get("e_energy"), errs.get("e_ctrl"))
        row_reports.append({"h": r.h, "N": r.mesh.n_dofs, "converged": r.converged, **r.stats})
    with_eoc = eoc(table, cfg.log_exponents) if len(rows) >= 2 else table
    report = {"metadata": table.metadata, "converged": converged, "rows": row_reports,
              "table": with_eoc.rows}
    if ref is not None:
        report["reference"] = {"h": ref.h, "N": ref.mesh.n_dofs, "converged": ref.converged,
                               **ref.stats}
        report["reference_check"] = reference_check(with_eoc, ref.h)
    return StudyResult(table, report, converged)


def reference_check(table: ErrorTable, h_ref: float) -> dict:
    """Estimate the reference error from the last observed order and flag rows
    whose measured error is not at least five times larger."""
    out = {}
    for name in ("e_L2", "e_energy", "e_ctrl"):
        errs = table.column(name)
        if len(errs) < 2 or not np.all(np.isfinite(errs)):
            continue
        rate = table.rows[-1].get("EOC" + name[1:])
        if rate is None or rate <= 0:
            continue
        est = errs[-1] * (h_ref / table.rows[-1]["h"]) ** rate
        out[name] = {"estimate": est, "trusted": [bool(est <= e / 5) for e in errs]}
    return out


def run_single(cfg: StudyConfig, seed: Optional[int] = None, h: Optional[float] = None):
    """Solve on one mesh (the finest h unless given); returns (row, solution dict)."""
    h = cfg.h[-1] if h is None else h
    mesh = build_meshes(cfg, [x for x in cfg.h if x >= h] if cfg.n == 2 else [h])[-1]
    row = solve_row(cfg, 0, h, mesh, keep_system=True, seed=seed)
    sol = {"h": h, "N": mesh.n_dofs, "scheme": cfg.scheme, "converged": row.converged,
           "mesh": json.loads(mesh.to_json()), "state": row.state.tolist(), "stats": row.stats}
    if row.adjoint is not None:
        sol["adjoint"] = row.adjoint.tolist()
    if row.control is not None:
        if cfg.scheme == "fully_discrete":
            sol["control"] = {"kind": "p0", "values": row.control.tolist(),
                              "lower": cfg.lower, "upper": cfg.upper}
        else:
            sol["control"] = ImplicitControl(mesh, row.control, cfg.alpha, cfg.lower,
                                             cfg.upper).to_dict()
    return row, sol
