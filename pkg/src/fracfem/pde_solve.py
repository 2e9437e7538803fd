"""Discrete state and adjoint solves."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .assembly import FeSystem, NonlinearityPreset, assemble_semilinear, p1_values
from .mesh import SimplicialMesh
from .fracquad import element_quadrature

log = logging.getLogger(__name__)

TOL_NEWTON = 1e-10
MAX_ITER = 50
MAX_BACKTRACKS = 30


class SolverError(RuntimeError):
    """Raised when a linear system that must be solvable is singular."""


@dataclass
class StateFieldP1:
    """Zero-trace P1 function given by its interior coefficients."""

    coeffs: np.ndarray
    mesh: SimplicialMesh

    def vertex_values(self) -> np.ndarray:
        full = np.zeros(self.mesh.n_vertices)
        full[self.mesh.interior] = self.coeffs
        return full

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Evaluate at points (1D only; used for plotting-free spot checks)."""
        if self.mesh.dimension != 1:
            raise NotImplementedError("pointwise evaluation is implemented for intervals")
        v = self.mesh.vertices[:, 0]
        order = np.argsort(v)
        return np.interp(np.asarray(x).reshape(-1), v[order], self.vertex_values()[order])

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.coeffs), initial=0.0))


@dataclass
class SolveReport:
    iterations: int = 0
    residual: float = np.inf
    converged: bool = False
    damping: list = field(default_factory=list)
    residuals: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual,
                "converged": self.converged, "damping": list(self.damping),
                "residuals": list(self.residuals)}


def _cholesky(matrix):
    try:
        return cho_factor(matrix, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise SolverError("matrix is not positive definite") from exc


def residual_vector(system: FeSystem, preset: NonlinearityPreset, u: np.ndarray, rhs: np.ndarray):
    a_vec, _ = assemble_semilinear(system.mesh, u, preset)
    return system.A @ u + a_vec - rhs


def residual(system: FeSystem, preset: NonlinearityPreset, u, rhs) -> float:
    """Euclidean norm of A u + a_vec(u) - rhs."""
    coeffs = u.coeffs if isinstance(u, StateFieldP1) else np.asarray(u)
    return float(np.linalg.norm(residual_vector(system, preset, coeffs, rhs)))


def solve_state(system: FeSystem, preset: NonlinearityPreset, rhs: np.ndarray,
                tol_newton: float = TOL_NEWTON, max_iter: int = MAX_ITER, u0=None):
    """Newton's method with Armijo damping for A u + a_vec(u) = rhs.

    Returns (StateFieldP1, SolveReport).  Non-convergence is reported with
    ``converged = False``; the last iterate is returned alongside.
    """
    rhs = np.asarray(rhs, dtype=float)
    mesh = system.mesh
    report = SolveReport()
    if preset.is_zero or preset.tag == "linear":
        a_vec, J = assemble_semilinear(mesh, np.zeros(mesh.n_dofs), preset)
        factor = system.cholesky if preset.is_zero else _cholesky(system.A + J.toarray())
        u = cho_solve(factor, rhs)
        r = residual(system, preset, u, rhs)
        # one step of iterative refinement keeps the residual at round-off level
        if r > tol_newton:
            u = u - cho_solve(factor, residual_vector(system, preset, u, rhs))
            r = residual(system, preset, u, rhs)
        report.iterations, report.residual = 1, r
        report.residuals.append(r)
        report.converged = r <= tol_newton
        return StateFieldP1(u, mesh), report

    u = np.zeros(mesh.n_dofs) if u0 is None else np.array(u0, dtype=float)
    res = residual_vector(system, preset, u, rhs)
    rn = float(np.linalg.norm(res))
    report.residuals.append(rn)
    for it in range(max_iter):
        if rn <= tol_newton:
            report.converged = True
            break
        _, J = assemble_semilinear(mesh, u, preset)
        du = -cho_solve(_cholesky(system.A + J.toarray()), res)
        t = 1.0
        for _ in range(MAX_BACKTRACKS):
            trial = u + t * du
            tres = residual_vector(system, preset, trial, rhs)
            tn = float(np.linalg.norm(tres))
            if tn <= (1.0 - 1e-4 * t) * rn or tn <= tol_newton:
                break
            t *= 0.5
        u, res, rn = trial, tres, tn
        report.iterations = it + 1
        report.damping.append(t)
        report.residuals.append(rn)
    else:
        report.converged = rn <= tol_newton
    report.residual = rn
    if not report.converged:
        log.warning("Newton did not converge: residual %.3e after %d iterations", rn, report.iterations)
    log.debug("state solve: %d iterations, max|u| = %.4g", report.iterations, np.max(np.abs(u), initial=0))
    return StateFieldP1(u, mesh), report


def tracking_load(mesh: SimplicialMesh, u: np.ndarray, objective, order: int = 6) -> np.ndarray:
    """int dL/du(x, u_h) phi_i with the quadrature used for the objective."""
    q = element_quadrature(mesh, order, graded=objective.singular)
    vals = objective.du(q.points, p1_values(mesh, u, q))
    edofs = mesh.element_dofs[q.element]
    contrib = (q.weights * vals)[:, None] * q.bary
    ok = edofs >= 0
    return np.bincount(edofs[ok], weights=contrib[ok], minlength=mesh.n_dofs)


def solve_adjoint(system: FeSystem, u, objective, preset: NonlinearityPreset, order: int = 6):
    """Solve (A + J(u_h)) p = int dL/du(., u_h) phi_i; returns StateFieldP1."""
    coeffs = u.coeffs if isinstance(u, StateFieldP1) else np.asarray(u)
    rhs = tracking_load(system.mesh, coeffs, objective, order)
    if preset.is_zero:
        p = cho_solve(system.cholesky, rhs)
    else:
        _, J = assemble_semilinear(system.mesh, coeffs, preset)
        p = cho_solve(_cholesky(system.A + J.toarray()), rhs)
    return StateFieldP1(p, system.mesh)
