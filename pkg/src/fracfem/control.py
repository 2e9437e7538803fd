"""Box-constrained optimal control: fully discrete and variational schemes.

Fully discrete: piecewise constant controls, projected gradient with
Barzilai-Borwein steps and Armijo backtracking, then a fixed-point polish.

Variational: the control is never discretized; it is the pointwise
projection Pi(-q_h/alpha) of a P1 function.  At the optimum q_h equals the
discrete adjoint, so we solve q - p(q) = 0 by a Newton-Krylov iteration
with backtracking on the residual.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import LinearOperator, gmres

from .assembly import (FeSystem, assemble_load, assemble_semilinear, control_to_load, p1_values)
from .problem import ProblemSpec
from .fracquad import element_quadrature, simplex_rule, gauss_legendre
from .pde_solve import SolveReport, StateFieldP1, residual, solve_adjoint, solve_state

log = logging.getLogger(__name__)

TOL_OPT = 1e-12
MAX_OUTER = 2000
OBJECTIVE_ORDER = 6


class OptimizationError(RuntimeError):
    pass


def project_box(v, lower, upper):
    """Pi_[lower, upper](v) = min(upper, max(v, lower))."""
    if not lower < upper:
        raise ValueError("projection needs lower < upper")
    return np.minimum(upper, np.maximum(v, lower))


@dataclass
class ControlFieldP0:
    """Piecewise constant control, one value per element."""

    values: np.ndarray
    lower: float
    upper: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(self.values < self.lower) or np.any(self.values > self.upper):
            raise ValueError("control violates its bounds")

    def load(self, mesh) -> np.ndarray:
        return control_to_load(mesh, self.values)

    def l2_squared(self, mesh) -> float:
        return float(np.sum(mesh.volumes * self.values**2))

    def values_at(self, q) -> np.ndarray:
        return self.values[q.element]


# ---------------------------------------------------------------------------
# implicit control of the variational scheme


def _split_polygon(poly, vals, level):
    """Split a convex polygon (barycentric vertices) along vals == level."""
    below, above = [], []
    m = len(poly)
    for i in range(m):
        p, v = poly[i], vals[i]
        q, w = poly[(i + 1) % m], vals[(i + 1) % m]
        if v <= level:
            below.append((p, v))
        if v >= level:
            above.append((p, v))
        if (v - level) * (w - level) < 0:
            t = (level - v) / (w - v)
            x = (p + t * (q - p), level)
            below.append(x)
            above.append(x)
    return below, above


def _fan(poly):
    """Triangles (as barycentric corner triples) of a convex polygon."""
    pts = [p for p, _ in poly]
    return [(pts[0], pts[i], pts[i + 1]) for i in range(1, len(pts) - 1)]


@dataclass
class PiecewiseRule:
    element: np.ndarray
    bary: np.ndarray
    weights: np.ndarray
    label: np.ndarray  # 0 lower bound, 1 free, 2 upper bound


class ImplicitControl:
    """z(x) = Pi(-q_h(x)/alpha) for a zero-trace P1 function q_h.

    Integrals against P1 functions are exact: elements are cut along the
    level lines where the projection switches branch, and every piece gets
    a rule exact for quadratics.
    """

    def __init__(self, mesh, q: np.ndarray, alpha: float, lower: float, upper: float):
        self.mesh = mesh
        self.q = np.asarray(q, dtype=float)
        self.alpha, self.lower, self.upper = alpha, lower, upper
        full = np.zeros(mesh.n_vertices)
        full[mesh.interior] = self.q
        self.vertex_v = -full / alpha

    def __call__(self, x):
        raise TypeError("evaluate through values_at with element-local quadrature")

    def values_at(self, q) -> np.ndarray:
        v = np.sum(self.vertex_v[self.mesh.elements[q.element]] * q.bary, axis=1)
        return project_box(v, self.lower, self.upper)

    @property
    def rule(self) -> PiecewiseRule:
        if not hasattr(self, "_rule"):
            self._rule = self._build_rule()
        return self._rule

    def _build_rule(self) -> PiecewiseRule:
        mesh = self.mesh
        n = mesh.dimension
        vals = self.vertex_v[mesh.elements]
        lo, hi = self.lower, self.upper
        cut = ((vals.min(axis=1) < lo) & (vals.max(axis=1) > lo)) | \
              ((vals.min(axis=1) < hi) & (vals.max(axis=1) > hi))
        if n == 1:
            x, w = gauss_legendre(2)
            base_pts, base_w = x[:, None], w
        else:
            base_pts, base_w = simplex_rule(2, 2)
        lam = np.concatenate([1.0 - base_pts.sum(axis=1, keepdims=True), base_pts], axis=1)
        fact = 1.0 if n == 1 else 2.0
        whole = np.flatnonzero(~cut)
        mean = vals[whole].mean(axis=1)
        labels = np.where(mean <= lo, 0, np.where(mean >= hi, 2, 1))
        el = [np.repeat(whole, len(base_w))]
        bary = [np.tile(lam, (len(whole), 1))]
        wts = [np.outer(mesh.volumes[whole] * fact, base_w).ravel()]
        lab = [np.repeat(labels, len(base_w))]
        for t in np.flatnonzero(cut):
            pieces = self._cut_element(vals[t], n)
            for corners, label in pieces:
                corners = np.asarray(corners)
                if n == 1:
                    length = abs(corners[1][1] - corners[0][1])
                    pts = corners[0][None, :] + base_pts[:, :1] * (corners[1] - corners[0])[None, :]
                    w = base_w * length * mesh.volumes[t]
                else:
                    e1, e2 = corners[1] - corners[0], corners[2] - corners[0]
                    # barycentric area ratio of the sub-triangle
                    area = abs(e1[1] * e2[2] - e1[2] * e2[1])
                    pts = corners[0] + base_pts[:, :1] * e1 + base_pts[:, 1:] * e2
                    w = base_w * 2.0 * area * mesh.volumes[t]
                el.append(np.full(len(w), t))
                bary.append(pts)
                wts.append(w)
                lab.append(np.full(len(w), label))
        return PiecewiseRule(np.concatenate(el), np.concatenate(bary), np.concatenate(wts),
                             np.concatenate(lab))

    def _cut_element(self, v, n):
        eye = np.eye(n + 1)
        if n == 1:
            ts = sorted({0.0, 1.0} | {float((c - v[0]) / (v[1] - v[0])) for c in (self.lower, self.upper)
                                      if (v[0] - c) * (v[1] - c) < 0})
            out = []
            for a, b in zip(ts[:-1], ts[1:]):
                mid = v[0] + 0.5 * (a + b) * (v[1] - v[0])
                label = 0 if mid <= self.lower else 2 if mid >= self.upper else 1
                out.append(([np.array([1 - a, a]), np.array([1 - b, b])], label))
            return out
        poly = [(eye[i], v[i]) for i in range(3)]
        low, rest = _split_polygon([p for p, _ in poly], np.array(v), self.lower)
        out = []
        if len(low) >= 3:
            out += [(tri, 0) for tri in _fan(low)]
        if len(rest) >= 3:
            pts = [p for p, _ in rest]
            vv = np.array([x for _, x in rest])
            free, up = _split_polygon(pts, vv, self.upper)
            if len(free) >= 3:
                out += [(tri, 1) for tri in _fan(free)]
            if len(up) >= 3:
                out += [(tri, 2) for tri in _fan(up)]
        return out

    def _pointwise(self):
        r = self.rule
        v = np.sum(self.vertex_v[self.mesh.elements[r.element]] * r.bary, axis=1)
        return np.where(r.label == 0, self.lower, np.where(r.label == 2, self.upper, v))

    def load(self, mesh=None) -> np.ndarray:
        r = self.rule
        edofs = self.mesh.element_dofs[r.element]
        contrib = (r.weights * self._pointwise())[:, None] * r.bary
        ok = edofs >= 0
        return np.bincount(edofs[ok], weights=contrib[ok], minlength=self.mesh.n_dofs)

    def l2_squared(self, mesh=None) -> float:
        return float(np.sum(self.rule.weights * self._pointwise() ** 2))

    def inactive_mass(self) -> sparse.csr_matrix:
        """int over the free set of phi_i phi_j."""
        r = self.rule
        free = r.label == 1
        nv = self.mesh.dimension + 1
        edofs = self.mesh.element_dofs[r.element[free]]
        b = r.bary[free]
        w = r.weights[free]
        rows = np.repeat(edofs, nv, axis=1).ravel()
        cols = np.tile(edofs, (1, nv)).ravel()
        vals = (w[:, None, None] * b[:, :, None] * b[:, None, :]).ravel()
        ok = (rows >= 0) & (cols >= 0)
        N = self.mesh.n_dofs
        return sparse.csr_matrix((vals[ok], (rows[ok], cols[ok])), shape=(N, N))

    def to_dict(self) -> dict:
        return {"kind": "implicit_projection", "alpha": self.alpha, "lower": self.lower,
                "upper": self.upper, "q": self.q.tolist()}


# ---------------------------------------------------------------------------
# reduced problem


class ReducedProblem:
    """State, adjoint and objective for a fixed system and problem."""

    def __init__(self, system: FeSystem, problem: ProblemSpec, tol_newton: float = 1e-12):
        if not problem.is_control:
            raise ValueError("problem needs alpha and control bounds")
        self.system, self.problem = system, problem
        self.mesh = system.mesh
        self.tol_newton = tol_newton
        if problem.source is not None:
            self.source_load = assemble_load(self.mesh, problem.source,
                                             boundary_singular=problem.source_singular)
        else:
            self.source_load = np.zeros(self.mesh.n_dofs)
        self.q_obj = element_quadrature(self.mesh, OBJECTIVE_ORDER, graded=problem.objective.singular)
        self._last_u = None
        self.state_solves = 0

    def state(self, control):
        rhs = control.load(self.mesh) + self.source_load
        u, report = solve_state(self.system, self.problem.nonlinearity, rhs, self.tol_newton,
                                u0=self._last_u)
        if not report.converged:
            # a cold start is the documented default initialization
            u, report = solve_state(self.system, self.problem.nonlinearity, rhs, self.tol_newton)
        if not report.converged:
            raise OptimizationError(f"state solve failed (residual {report.residual:.3e})")
        self._last_u = u.coeffs
        self.state_solves += 1
        return u, report

    def adjoint(self, u):
        return solve_adjoint(self.system, u, self.problem.objective, self.problem.nonlinearity,
                             OBJECTIVE_ORDER)

    def tracking(self, u) -> float:
        q = self.q_obj
        uq = p1_values(self.mesh, u.coeffs, q)
        return float(np.sum(q.weights * self.problem.objective.value(q.points, uq)))

    def objective(self, control, u=None) -> float:
        if u is None:
            u, _ = self.state(control)
        return self.tracking(u) + 0.5 * self.problem.alpha * control.l2_squared(self.mesh)

    def element_average(self, p) -> np.ndarray:
        full = p.vertex_values()
        return full[self.mesh.elements].mean(axis=1)


def objective(problem: ProblemSpec, system: FeSystem, z) -> float:
    """j(z) = int L(x, S z) + alpha/2 ||z||^2 (state solved internally)."""
    red = ReducedProblem(system, problem)
    if not hasattr(z, "load"):
        z = ControlFieldP0(z, problem.lower, problem.upper)
    return red.objective(z)


def gradient_p0(problem: ProblemSpec, system: FeSystem, z) -> np.ndarray:
    """L2 gradient of j on P0: g_T = <p_h>_T + alpha z_T."""
    red = ReducedProblem(system, problem)
    if not hasattr(z, "load"):
        z = ControlFieldP0(z, problem.lower, problem.upper)
    u, _ = red.state(z)
    p = red.adjoint(u)
    return red.element_average(p) + problem.alpha * z.values


@dataclass
class OptimalTripletDiscrete:
    scheme: str
    state: StateFieldP1
    adjoint: StateFieldP1
    control: object
    objective: float
    residual: float
    converged: bool
    iterations: int
    history: list = field(default_factory=list)
    state_reports: list = field(default_factory=list)

    def to_json(self) -> str:
        control = (self.control.to_dict() if hasattr(self.control, "to_dict")
                   else {"kind": "p0", "values": np.asarray(self.control.values).tolist(),
                         "lower": self.control.lower, "upper": self.control.upper})
        return json.dumps({
            "scheme": self.scheme, "control": control,
            "state": self.state.coeffs.tolist(), "adjoint": self.adjoint.coeffs.tolist(),
            "objective": self.objective,
            "residuals": {"fixed_point": self.residual},
            "converged": self.converged, "iterations": self.iterations,
        }, indent=1)


def _fixed_point_residual_p0(red, z, p):
    target = project_box(-red.element_average(p) / red.problem.alpha, z.lower, z.upper)
    return float(np.max(np.abs(z.values - target), initial=0.0)), target


def _linearization(red, u, p):
    """Factorized A + J(u), the mass matrix and the a''(u) p correction."""
    mesh, preset = red.mesh, red.problem.nonlinearity
    if preset.is_zero:
        K = red.system.cholesky
    else:
        _, J = assemble_semilinear(mesh, u.coeffs, preset)
        K = cho_factor(red.system.A + J.toarray(), lower=True)
    H = _weighted_mass(mesh, u.coeffs, p.coeffs, preset) if preset.tag == "cubic" else None
    M = red.system.M

    def dadjoint(dload):
        du = cho_solve(K, dload)
        rhs = M @ du
        if H is not None:
            rhs = rhs - H(du)
        return cho_solve(K, rhs)

    return dadjoint


def _newton_fixed_point(evaluate, derivative, x, tol, max_iter):
    """Solve G(x) = 0 where evaluate(x) -> (data, G, residual).

    derivative(data) returns the map v -> G'(x) v.  Steps come from GMRES
    and are damped by backtracking on ||G||; when backtracking fails a
    damped fixed-point step x - theta G is taken instead.
    """
    data, G, res = evaluate(x)
    history = [res]
    theta = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        if res <= tol:
            it -= 1
            break
        op = LinearOperator((len(x), len(x)), matvec=derivative(data))
        dx, _ = gmres(op, -G, rtol=1e-13, atol=0.0, restart=200, maxiter=20)
        gnorm = np.linalg.norm(G)
        t = 1.0
        for _ in range(30):
            trial = x + t * dx
            d_t, G_t, r_t = evaluate(trial)
            if np.linalg.norm(G_t) <= (1.0 - 1e-4 * t) * gnorm:
                break
            t *= 0.5
        else:
            theta *= 0.5
            trial = x - theta * G
            d_t, G_t, r_t = evaluate(trial)
        x, data, G, res = trial, d_t, G_t, r_t
        history.append(res)
    return x, data, res, it, history


def solve_fully_discrete(problem: ProblemSpec, system: FeSystem, tol_opt: float = TOL_OPT,
                         max_iter: int = 200, z0=None, switch_tol: float = 1e-4,
                         newton_iter: int = 50) -> OptimalTripletDiscrete:
    """Optimal P0 control.

    Phase 1: projected gradient with Barzilai-Borwein steps and monotone
    Armijo backtracking from z = Pi(0), until the projection fixed-point
    residual drops below ``switch_tol``.  Phase 2 (polish): the projection
    formula z = Pi(-<p>/alpha) is solved as an equation for the element
    averages w = <p> by Newton-Krylov, so the returned control satisfies it
    to ``tol_opt``.
    """
    red = ReducedProblem(system, problem)
    mesh = system.mesh
    alpha, lo, hi = problem.alpha, problem.lower, problem.upper
    vol = mesh.volumes
    z = ControlFieldP0(project_box(np.zeros(mesh.n_elements) if z0 is None else np.asarray(z0), lo, hi),
                       lo, hi)

    def evaluate(ctrl):
        u, rep = red.state(ctrl)
        return u, red.objective(ctrl, u), rep

    u, j, rep = evaluate(z)
    p = red.adjoint(u)
    g = red.element_average(p) + alpha * z.values
    history = [j]
    step = 1.0 / alpha
    prev = None
    res, _ = _fixed_point_residual_p0(red, z, p)
    it = 0
    for it in range(1, max_iter + 1):
        if res <= max(switch_tol, tol_opt):
            break
        if prev is not None:
            sk, yk = z.values - prev[0], g - prev[1]
            sy = np.sum(vol * sk * yk)
            if sy > 0:
                step = np.sum(vol * sk * sk) / sy
        t = step
        for _ in range(40):
            trial = ControlFieldP0(project_box(z.values - t * g, lo, hi), lo, hi)
            u_t, j_t, rep_t = evaluate(trial)
            decrease = np.sum(vol * g * (trial.values - z.values))
            if j_t <= j + 1e-4 * decrease:
                break
            t *= 0.5
        else:
            break
        prev = (z.values, g)
        z, u, j, rep = trial, u_t, j_t, rep_t
        p = red.adjoint(u)
        g = red.element_average(p) + alpha * z.values
        history.append(j)
        res, _ = _fixed_point_residual_p0(red, z, p)

    if res > tol_opt:
        def fp_eval(w):
            ctrl = ControlFieldP0(project_box(-w / alpha, lo, hi), lo, hi)
            u_w, rep_w = red.state(ctrl)
            p_w = red.adjoint(u_w)
            avg = red.element_average(p_w)
            r_w, _ = _fixed_point_residual_p0(red, ctrl, p_w)
            return (ctrl, u_w, p_w, rep_w, w), w - avg, r_w

        def fp_derivative(data):
            ctrl, u_w, p_w, _, w = data
            free = ((-w / alpha) > lo) & ((-w / alpha) < hi)
            dadj = _linearization(red, u_w, p_w)
            full = np.zeros(mesh.n_vertices)

            def matvec(v):
                dload = control_to_load(mesh, np.where(free, -v / alpha, 0.0))
                full[mesh.interior] = dadj(dload)
                return v - full[mesh.elements].mean(axis=1)
            return matvec

        w0 = red.element_average(p)
        _, data, res_n, n_it, _ = _newton_fixed_point(fp_eval, fp_derivative, w0, tol_opt, newton_iter)
        if res_n < res:
            z, u, p, rep, _ = data
            res = res_n
            j = red.objective(z, u)
        it += n_it
    converged = res <= tol_opt
    if not converged:
        log.warning("fully discrete solver stopped with residual %.3e", res)
    return OptimalTripletDiscrete("fully_discrete", u, p, z, j, res, converged, it, history, [rep])


def solve_variational(problem: ProblemSpec, system: FeSystem, tol_opt: float = TOL_OPT,
                      max_iter: int = 100, q0=None) -> OptimalTripletDiscrete:
    """Variational discretization: find q with q = p(Pi(-q/alpha)).

    Newton-Krylov on G(q) = q - p(q) using the derivative of the piecewise
    smooth map (the free set enters through its mass matrix), with
    backtracking on ||G||, followed by a fixed-point polish q <- p(q) that
    is kept only if it lowers the residual.
    """
    red = ReducedProblem(system, problem)
    mesh = system.mesh
    alpha, lo, hi = problem.alpha, problem.lower, problem.upper
    q = np.zeros(mesh.n_dofs) if q0 is None else np.asarray(q0, dtype=float)

    def evaluate(qv):
        ctrl = ImplicitControl(mesh, qv, alpha, lo, hi)
        u, rep = red.state(ctrl)
        p = red.adjoint(u)
        G = qv - p.coeffs
        return (ctrl, u, p, rep), G, float(np.max(np.abs(G), initial=0.0)) / alpha

    def derivative(data):
        ctrl, u, p, _ = data
        dadj = _linearization(red, u, p)
        B = ctrl.inactive_mass()
        return lambda v: v - dadj(-(B @ v) / alpha)

    q, data, res, it, history = _newton_fixed_point(evaluate, derivative, q, tol_opt, max_iter)
    ctrl, u, p, rep = data
    polish, G_p, res_p = evaluate(p.coeffs.copy())
    if res_p < res:
        (ctrl, u, p, rep), res = polish, res_p
    j = red.objective(ctrl, u)
    converged = res <= tol_opt
    if not converged:
        log.warning("variational solver stopped with residual %.3e", res)
    return OptimalTripletDiscrete("variational", u, p, ctrl, j, res, converged, it, history, [rep])


def p1_values_full(mesh, coeffs):
    full = np.zeros(mesh.n_vertices)
    full[mesh.interior] = coeffs
    return full


def _weighted_mass(mesh, u, p, preset):
    """Operator v -> int a''(u_h) p_h v phi_i (derivative of J(u) p in u)."""
    q = element_quadrature(mesh, 6, graded=False)
    cq = preset.d2a(p1_values(mesh, u, q)) * p1_values(mesh, p, q)
    nv = mesh.dimension + 1
    loc = np.zeros((mesh.n_elements, nv, nv))
    np.add.at(loc, q.element, (q.weights * cq)[:, None, None] * q.bary[:, :, None] * q.bary[:, None, :])
    edofs = mesh.element_dofs
    rows = np.repeat(edofs, nv, axis=1).ravel()
    cols = np.tile(edofs, (1, nv)).ravel()
    ok = (rows >= 0) & (cols >= 0)
    N = mesh.n_dofs
    mat = sparse.csr_matrix((loc.ravel()[ok], (rows[ok], cols[ok])), shape=(N, N))
    return lambda v: mat @ v


# ---------------------------------------------------------------------------
# optimality check


@dataclass
class OptimalityReport:
    state_residual: float
    adjoint_residual: float
    fixed_point: float
    vi_min: float

    def passes(self, tol_state=1e-10, tol_fixed=1e-9, tol_vi=1e-10) -> bool:
        return (self.state_residual <= tol_state and self.adjoint_residual <= tol_state
                and self.fixed_point <= tol_fixed and self.vi_min >= -tol_vi)

    def to_dict(self):
        return dict(self.__dict__)


def check_optimality(triplet: OptimalTripletDiscrete, problem: ProblemSpec,
                     system: FeSystem) -> OptimalityReport:
    """Residuals of state, adjoint and the variational inequality.

    The VI is separable: for every element (fully discrete) or quadrature
    point (variational) the worst admissible test value is a bound, so the
    check is min over {lower, upper} of g (w - z).
    """
    red = ReducedProblem(system, problem)
    mesh = system.mesh
    ctrl = triplet.control
    rhs = ctrl.load(mesh) + red.source_load
    r_state = residual(system, problem.nonlinearity, triplet.state, rhs)
    from .pde_solve import tracking_load
    adj_rhs = tracking_load(mesh, triplet.state.coeffs, problem.objective, OBJECTIVE_ORDER)
    _, J = assemble_semilinear(mesh, triplet.state.coeffs, problem.nonlinearity)
    r_adj = float(np.linalg.norm(system.A @ triplet.adjoint.coeffs + J @ triplet.adjoint.coeffs - adj_rhs))
    alpha, lo, hi = problem.alpha, problem.lower, problem.upper
    if isinstance(ctrl, ControlFieldP0):
        avg = red.element_average(triplet.adjoint)
        g = avg + alpha * ctrl.values
        zv = ctrl.values
        fixed = float(np.max(np.abs(zv - project_box(-avg / alpha, lo, hi)), initial=0.0))
    else:
        r = ctrl.rule
        pv = np.sum(p1_values_full(mesh, triplet.adjoint.coeffs)[mesh.elements[r.element]] * r.bary, axis=1)
        zv = ctrl._pointwise()
        g = pv + alpha * zv
        fixed = float(np.max(np.abs(zv - project_box(-pv / alpha, lo, hi)), initial=0.0))
    vi = np.minimum(g * (lo - zv), g * (hi - zv))
    return OptimalityReport(r_state, r_adj, fixed, float(np.min(vi, initial=0.0)))
