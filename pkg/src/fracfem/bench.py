"""Exact and manufactured benchmarks, error norms and observed orders."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .assembly import FeSystem, NonlinearityPreset, p1_values
from .control import project_box
from .mesh import SimplicialMesh
from .problem import ProblemSpec, TrackingObjective
from .fracquad import BOUNDARY_DEPTH, element_quadrature

ERROR_ORDER = 8


def _ball_profile(x, s):
    r2 = np.sum(np.atleast_2d(x) ** 2, axis=1)
    return np.maximum(1.0 - r2, 0.0) ** s


def getoor_constant(n: int, s: float) -> float:
    """c_{n,s} = Gamma(n/2) / (2^{2s} Gamma((n+2s)/2) Gamma(1+s))."""
    return math.gamma(0.5 * n) / (4.0**s * math.gamma(0.5 * (n + 2 * s)) * math.gamma(1 + s))


def getoor_inverse_constant(n: int, s: float) -> float:
    """d_{n,s} with (-Delta)^s (1 - |x|^2)_+^s = d_{n,s} on the unit ball."""
    return 1.0 / getoor_constant(n, s)


def ball_integral(n: int, s: float) -> float:
    """int_B (1 - |x|^2)^s dx over the unit ball."""
    return math.pi ** (0.5 * n) * math.gamma(s + 1) / math.gamma(s + 1 + 0.5 * n)


@dataclass
class ExactSolution:
    """Pointwise exact solution, optionally with its energy and the load
    f = (-Delta)^s u (so that A(u, v) = int f v for every admissible v)."""

    evaluate: Callable[[np.ndarray], np.ndarray]
    energy: Optional[float] = None
    fractional_load: Optional[Callable[[np.ndarray], np.ndarray]] = None
    tag: str = ""

    def __call__(self, x):
        return self.evaluate(x)


def getoor(n: int, s: float) -> ExactSolution:
    """u = c_{n,s} (1 - |x|^2)_+^s, the solution for f = 1 on the unit ball."""
    c = getoor_constant(n, s)
    return ExactSolution(lambda x: c * _ball_profile(x, s), energy=c * ball_integral(n, s),
                         fractional_load=lambda x: np.ones(len(x)), tag=f"getoor(n={n}, s={s})")


def manufactured_semilinear(n: int, s: float, lam: float, preset: NonlinearityPreset):
    """Problem with exact solution lam (1 - |x|^2)_+^s for a monotone preset.

    Returns (ProblemSpec with source f = lam d + a(u), ExactSolution).
    """
    d = getoor_inverse_constant(n, s)

    def exact(x):
        return lam * _ball_profile(x, s)

    def source(x):
        return lam * d + preset.a(exact(x))

    sol = ExactSolution(exact, energy=lam**2 * d * ball_integral(n, s),
                        fractional_load=lambda x: np.full(len(x), lam * d),
                        tag=f"manufactured(n={n}, s={s}, lambda={lam}, a={preset.tag})")
    problem = ProblemSpec(s=s, nonlinearity=preset, source=source, source_singular=True)
    return problem, sol


@dataclass
class ControlBenchmark:
    """Known optimal triplet for a control problem with an extra source e."""

    problem: ProblemSpec
    state: ExactSolution
    adjoint: ExactSolution
    control: Callable[[np.ndarray], np.ndarray]
    lam_u: float
    lam_p: float


def manufactured_control(n: int, s: float, alpha: float, lower: float, upper: float,
                         preset: NonlinearityPreset = NonlinearityPreset("cubic", 1.0),
                         lam_u: float = 1.0, lam_p: Optional[float] = None) -> ControlBenchmark:
    """Benchmark with u = lam_u G, p = lam_p G, z = Pi(-p/alpha), G = (1-|x|^2)_+^s.

    The default ``lam_p = -2 alpha upper`` puts the control on its upper
    bound where G >= 1/2, so the active set is a centred ball and the lower
    bound (negative) is never reached.
    """
    if not lower < 0 < upper:
        raise ValueError("the benchmark needs lower < 0 < upper")
    if lam_p is None:
        lam_p = -2.0 * alpha * upper
    d = getoor_inverse_constant(n, s)

    def ubar(x):
        return lam_u * _ball_profile(x, s)

    def pbar(x):
        return lam_p * _ball_profile(x, s)

    def zbar(x):
        return project_box(-pbar(x) / alpha, lower, upper)

    def source(x):
        return lam_u * d + preset.a(ubar(x)) - zbar(x)

    def target(x):
        u = ubar(x)
        return u - lam_p * d - preset.da(u) * pbar(x)

    objective = TrackingObjective(target, singular=True)
    problem = ProblemSpec(s=s, nonlinearity=preset, objective=objective, alpha=alpha,
                          lower=lower, upper=upper, source=source, source_singular=True)
    state = ExactSolution(ubar, energy=lam_u**2 * d * ball_integral(n, s),
                          fractional_load=lambda x: np.full(len(x), lam_u * d), tag="ubar")
    adjoint = ExactSolution(pbar, energy=lam_p**2 * d * ball_integral(n, s),
                            fractional_load=lambda x: np.full(len(x), lam_p * d), tag="pbar")
    return ControlBenchmark(problem, state, adjoint, zbar, lam_u, lam_p)


# ---------------------------------------------------------------------------
# error norms


def field_values(mesh: SimplicialMesh, fld, q) -> np.ndarray:
    """Values of a P1 coefficient vector, P0 element vector, StateFieldP1,
    implicit control or callable at the points of ``q``."""
    if hasattr(fld, "values_at"):
        return fld.values_at(q)
    if hasattr(fld, "coeffs"):
        return p1_values(mesh, fld.coeffs, q)
    if callable(fld):
        return np.asarray(fld(q.points), dtype=float)
    arr = np.asarray(fld, dtype=float)
    if arr.shape == (mesh.n_elements,):
        return arr[q.element]
    if arr.shape == (mesh.n_dofs,):
        return p1_values(mesh, arr, q)
    raise ValueError("cannot interpret field: expected P1 coefficients or P0 values")


def error_l2(mesh: SimplicialMesh, fld, exact, order: int = ERROR_ORDER,
             depth: int = BOUNDARY_DEPTH) -> float:
    """||exact - field||_{L2(Omega)} with boundary-graded Gauss quadrature."""
    q = element_quadrature(mesh, order, graded=True, depth=depth)
    diff = np.asarray(exact(q.points), dtype=float) - field_values(mesh, fld, q)
    return float(np.sqrt(np.sum(q.weights * diff**2)))


def error_energy(system: FeSystem, u_h, exact: Optional[ExactSolution] = None,
                 reference: Optional[tuple] = None, order: int = ERROR_ORDER) -> float:
    """Energy-norm error sqrt(A(u - u_h, u - u_h)).

    Exact path: needs ``exact.energy`` = A(u, u) and ``exact.fractional_load``
    f with A(u, v) = int f v, giving ||u||^2 - 2 int f u_h + u_h^T A u_h.
    Reference path: ``reference = (fine_system, fine_coeffs, prolongation)``
    with the prolongation matrix mapping coarse to fine coefficients.
    """
    coeffs = u_h.coeffs if hasattr(u_h, "coeffs") else np.asarray(u_h, dtype=float)
    if reference is not None:
        fine, fine_u, prolong = reference
        e = fine_u - prolong @ coeffs
        return float(np.sqrt(max(e @ fine.A @ e, 0.0)))
    if exact is None or exact.energy is None or exact.fractional_load is None:
        raise ValueError("exact path needs the energy and fractional load of the solution")
    from .assembly import assemble_load
    F = assemble_load(system.mesh, exact.fractional_load, order=order)
    sq = exact.energy - 2.0 * F @ coeffs + coeffs @ system.A @ coeffs
    if sq < -1e-10:
        raise ArithmeticError(f"negative squared energy error {sq:.3e}: quadrature inconsistency")
    return float(np.sqrt(max(sq, 0.0)))


# ---------------------------------------------------------------------------
# observed orders


COLUMNS = ("h", "N", "e_L2", "EOC_L2", "e_energy", "EOC_energy", "e_ctrl", "EOC_ctrl")


@dataclass
class ErrorTable:
    """Rows of (h, N, errors) ordered by decreasing h, with metadata."""

    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, h: float, N: int, e_L2=None, e_energy=None, e_ctrl=None):
        self.rows.append({"h": float(h), "N": int(N), "e_L2": e_L2, "e_energy": e_energy,
                          "e_ctrl": e_ctrl})

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.rows], dtype=float)

    def _with_eoc(self) -> "ErrorTable":
        return eoc(self) if len(self.rows) >= 2 else self

    def to_csv(self) -> str:
        table = self._with_eoc()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in table.rows:
            writer.writerow([_fmt(row.get(c)) for c in COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        table = self._with_eoc()
        return json.dumps({"metadata": self.metadata, "rows": table.rows}, indent=2, sort_keys=True,
                          default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)}")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def eoc(table: ErrorTable, log_exponents: Optional[dict] = None) -> ErrorTable:
    """Return a copy with EOC columns; EOC_k = log(e_{k-1}/e_k) / log(h_{k-1}/h_k).

    ``log_exponents`` maps an error column to q for the model
    e = C h^r |log h|^q; the corrected orders go to ``<EOC column>_log``.
    """
    if len(table.rows) < 2:
        raise ValueError("EOC needs at least two rows")
    hs = table.column("h")
    if np.any(np.diff(hs) >= 0):
        raise ValueError("rows must be ordered by decreasing h")
    rows = [dict(r) for r in table.rows]
    for name in ("e_L2", "e_energy", "e_ctrl"):
        errs = table.column(name)
        target = "EOC" + name[1:]
        rows[0][target] = None
        q = (log_exponents or {}).get(name)
        for k in range(1, len(rows)):
            e0, e1 = errs[k - 1], errs[k]
            if not (np.isfinite(e0) and np.isfinite(e1)) or e0 <= 0 or e1 <= 0:
                rows[k][target] = None
                continue
            rate = math.log(e0 / e1) / math.log(hs[k - 1] / hs[k])
            rows[k][target] = rate
            if q is not None:
                corr = -q * math.log(abs(math.log(hs[k - 1])) / abs(math.log(hs[k]))) / math.log(hs[k - 1] / hs[k])
                rows[k][target + "_log"] = rate + corr
    return ErrorTable(rows, dict(table.metadata))
