"""Assembly of the P1 fractional stiffness matrix, mass matrix and loads.

The stiffness form is split as

    (u, v)_{H^s} = sum over touching pairs of the full double integral
                 + 2 sum_T int_T u v g_T
                 - 2 sum over disjoint ordered pairs int_T int_T' u(x) v(y) K

where ``g_T(x)`` integrates the kernel over the complement of the patch of
elements touching ``T`` (so it contains the exterior of the domain).  The
patch complement is a polygon exterior, whose kernel integral is a closed
form boundary flux.  Only the disjoint pairs need the O(E^2) loop.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from . import kernels
from ._jit import resolve_backend
from .mesh import DEFAULT_ELEMENT_CAP, IDENTICAL, SHARED_FACET, SHARED_VERTEX, SimplicialMesh
from .fracquad import (BOUNDARY_DEPTH, FAR_SEPARATION, barycentric, canonical_order,
                         element_quadrature, exterior_weight, kernel_constant, simplex_rule,
                         singular_pair_rule)


class ResourceError(RuntimeError):
    """Problem too large for dense assembly."""


@dataclass(frozen=True)
class QuadratureOrders:
    """Quadrature orders used by the stiffness assembly.

    ``singular`` applies to touching pairs; ``tiers`` are (relative
    separation threshold, element rule order) for disjoint pairs, the last
    tier taking every pair beyond the previous threshold.  ``patch`` is the
    element order for the patch complement term.
    """

    singular: int = 12
    tiers: tuple = ((1.0, 6), (FAR_SEPARATION, 4), (8.0, 3), (np.inf, 2))
    patch: int = 6
    depth: int = BOUNDARY_DEPTH

    def doubled(self) -> "QuadratureOrders":
        return QuadratureOrders(2 * self.singular, tuple((t, 2 * k) for t, k in self.tiers),
                                2 * self.patch, self.depth)


DEFAULT_ORDERS = QuadratureOrders()
# 1D pairs are cheap, and at h = 2^-9 the far-field error is amplified by
# the cancellation against the patch term, so intervals get higher orders
DEFAULT_ORDERS_1D = QuadratureOrders(16, ((1.0, 10), (FAR_SEPARATION, 8), (np.inf, 8)), 8)


def default_orders(n: int) -> QuadratureOrders:
    return DEFAULT_ORDERS_1D if n == 1 else DEFAULT_ORDERS


@dataclass(frozen=True)
class NonlinearityPreset:
    """Monotone nonlinearity a(u) = c u (linear), c u^3 (cubic) or 0 (none)."""

    tag: str = "none"
    c: float = 0.0

    def __post_init__(self):
        if self.tag not in ("none", "linear", "cubic"):
            raise ValueError(f"unknown nonlinearity {self.tag!r}")
        if self.c < 0:
            raise ValueError("nonlinearity coefficient must be >= 0 (monotonicity)")

    def a(self, u):
        if self.tag == "linear":
            return self.c * u
        if self.tag == "cubic":
            return self.c * u**3
        return np.zeros_like(u)

    def da(self, u):
        if self.tag == "linear":
            return np.full_like(u, self.c)
        if self.tag == "cubic":
            return 3.0 * self.c * u**2
        return np.zeros_like(u)

    def d2a(self, u):
        if self.tag == "cubic":
            return 6.0 * self.c * u
        return np.zeros_like(u)

    @property
    def is_zero(self) -> bool:
        return self.tag == "none" or self.c == 0.0


# ---------------------------------------------------------------------------
# stiffness


def _touching_groups(mesh: SimplicialMesh):
    """Canonically ordered touching pairs grouped by classification."""
    n = mesh.dimension
    groups = {SHARED_FACET: ([], []), SHARED_VERTEX: ([], [])}
    elems = mesh.elements
    dofs = mesh.element_dofs
    for t, u in mesh.touching_pairs:
        if (dofs[t] < 0).all() and (dofs[u] < 0).all():
            continue
        pt, pu, m = canonical_order(list(elems[t]), list(elems[u]))
        kind = SHARED_FACET if (m == n and n > 1) else SHARED_VERTEX
        groups[kind][0].append((t, u))
        groups[kind][1].append(pt + pu[m:])
    out = {}
    for kind, (pairs, union) in groups.items():
        width = 2 * (n + 1) - (n if kind == SHARED_FACET else 1)
        out[kind] = (np.array(pairs, dtype=np.int64).reshape(-1, 2),
                     np.array(union, dtype=np.int64).reshape(-1, width))
    return out


def _add_touching(R, mesh, s, orders, backend):
    n = mesh.dimension
    fact2 = math.factorial(n) ** 2
    expo = -0.5 * (n + 2.0 * s)
    vol = mesh.volumes
    dof_map = mesh.dof_map
    active = np.flatnonzero((mesh.element_dofs >= 0).any(axis=1))
    rule = singular_pair_rule(IDENTICAL, n, s, orders.singular)
    vx = mesh.coords[active]
    kernels.touching_accumulate(R, vx, vx, mesh.element_dofs[active], fact2 * vol[active] ** 2,
                                barycentric(rule.x), barycentric(rule.y), rule.weights, rule.delta,
                                expo, backend)
    for kind, (pairs, union) in _touching_groups(mesh).items():
        if len(pairs) == 0:
            continue
        rule = singular_pair_rule(kind, n, s, orders.singular)
        m = rule.shared
        vx = mesh.vertices[union[:, : n + 1]]
        vy = mesh.vertices[np.concatenate([union[:, :m], union[:, n + 1:]], axis=1)]
        jac = 2.0 * fact2 * vol[pairs[:, 0]] * vol[pairs[:, 1]]
        kernels.touching_accumulate(R, vx, vy, dof_map[union], jac, barycentric(rule.x),
                                    barycentric(rule.y), rule.weights, rule.delta, expo, backend)


def patch_boundaries(mesh: SimplicialMesh):
    """Oriented boundary segments of the vertex patch of every element.

    Returns (offsets, segments) in CSR layout: the segments of element t are
    ``segments[offsets[t]:offsets[t+1]]``; each has shape (2, n).
    """
    n = mesh.dimension
    ve = mesh.vertex_elements
    offsets = [0]
    segs = []
    for t in range(mesh.n_elements):
        patch = sorted({u for v in mesh.elements[t] for u in ve[v]})
        if n == 1:
            xs = mesh.vertices[mesh.elements[patch], 0]
            segs.append([[[xs.min()], [xs.min()]], [[xs.max()], [xs.max()]]])
            offsets.append(offsets[-1] + 2)
            continue
        count = {}
        for u in patch:
            e = mesh.elements[u]
            for a, b in ((e[0], e[1]), (e[1], e[2]), (e[2], e[0])):
                key = (a, b) if a < b else (b, a)
                if key in count:
                    del count[key]
                else:
                    count[key] = (a, b)
        edges = np.array(list(count.values()), dtype=np.int64)
        segs.append(mesh.vertices[edges])
        offsets.append(offsets[-1] + len(edges))
    return np.array(offsets, dtype=np.int64), np.concatenate([np.asarray(g, float) for g in segs])


def patch_weights(mesh: SimplicialMesh, s: float, q) -> np.ndarray:
    """g_T at the quadrature points of ``q`` (an ElementQuadrature)."""
    n = mesh.dimension
    offsets, segs = patch_boundaries(mesh)
    if n == 1:
        lo = segs[offsets[:-1], 0, 0][q.element]
        hi = segs[offsets[:-1] + 1, 0, 0][q.element]
        x = q.points[:, 0]
        return ((x - lo) ** (-2.0 * s) + (hi - x) ** (-2.0 * s)) / (2.0 * s)
    from .fracquad import segment_flux
    counts = np.diff(offsets)[q.element]
    point_idx = np.repeat(np.arange(len(q.weights)), counts)
    first = np.cumsum(counts) - counts
    seg_idx = np.repeat(offsets[q.element] - first, counts) + np.arange(counts.sum())
    out = np.zeros(len(q.weights))
    chunk = 2_000_000
    for lo in range(0, len(point_idx), chunk):
        pi, si = point_idx[lo:lo + chunk], seg_idx[lo:lo + chunk]
        vals = segment_flux(q.points[pi], segs[si, 0], segs[si, 1], s)
        out += np.bincount(pi, weights=vals, minlength=len(out))
    return out


def _add_patch_term(R, mesh, s, orders):
    active = np.flatnonzero((mesh.element_dofs >= 0).any(axis=1))
    q = element_quadrature(mesh, orders.patch, active, graded=True, depth=orders.depth)
    g = patch_weights(mesh, s, q)
    wg = 2.0 * q.weights * g
    nv = mesh.dimension + 1
    loc = np.zeros((mesh.n_elements, nv, nv))
    np.add.at(loc, q.element, wg[:, None, None] * q.bary[:, :, None] * q.bary[:, None, :])
    _scatter_local(R, mesh.element_dofs, loc)


def _scatter_local(R, edofs, loc):
    nv = edofs.shape[1]
    for a in range(nv):
        for b in range(nv):
            i, j = edofs[:, a], edofs[:, b]
            ok = (i >= 0) & (j >= 0)
            np.add.at(R, (i[ok], j[ok]), loc[ok, a, b])


def _element_tiers(mesh, orders):
    n = mesh.dimension
    rules = [simplex_rule(n, k) for _, k in orders.tiers]
    qmax = max(len(w) for _, w in rules)
    ne = mesh.n_elements
    pts = np.zeros((len(rules), ne, qmax, n))
    wts = np.zeros((len(rules), ne, qmax))
    lam = np.zeros((len(rules), qmax, n + 1))
    nq = np.zeros(len(rules), dtype=np.int64)
    fact = math.factorial(n)
    for j, (p, w) in enumerate(rules):
        m = len(w)
        lb = barycentric(p)
        nq[j] = m
        lam[j, :m] = lb
        pts[j, :, :m] = np.einsum("qa,tad->tqd", lb, mesh.coords)
        wts[j, :, :m] = fact * mesh.volumes[:, None] * w[None, :]
    thresholds = np.array([t for t, _ in orders.tiers], dtype=float)
    return pts, wts, nq, lam, thresholds


def _add_cross(R, mesh, s, orders, backend):
    pts, wts, nq, lam, thresholds = _element_tiers(mesh, orders)
    expo = -0.5 * (mesh.dimension + 2.0 * s)
    kernels.cross_accumulate(R, pts, wts, nq, lam, np.ascontiguousarray(mesh.elements),
                             np.ascontiguousarray(mesh.element_dofs), mesh.centroids,
                             mesh.diameters, thresholds, expo, backend)


def assemble_stiffness(mesh: SimplicialMesh, s: float, orders: QuadratureOrders | None = None,
                       backend: str | None = None, cap: int = DEFAULT_ELEMENT_CAP) -> np.ndarray:
    """Dense stiffness matrix A[i, j] = (C(n,s)/2) (phi_j, phi_i)_{H^s} over interior dofs."""
    const = kernel_constant(mesh.dimension, s).value
    orders = default_orders(mesh.dimension) if orders is None else orders
    if mesh.n_elements > cap:
        raise ResourceError(f"mesh has {mesh.n_elements} elements, above the cap of {cap}")
    backend = resolve_backend(backend)
    N = mesh.n_dofs
    R = np.zeros((N, N))
    _add_touching(R, mesh, s, orders, backend)
    _add_patch_term(R, mesh, s, orders)
    _add_cross(R, mesh, s, orders, backend)
    R *= 0.5 * const
    _symmetrize(R)
    return R


def _symmetrize(A: np.ndarray, block: int = 512) -> None:
    """A <- (A + A^T)/2 in place, blockwise to avoid a full temporary."""
    N = A.shape[0]
    for i in range(0, N, block):
        bi = slice(i, min(i + block, N))
        A[bi, bi] = 0.5 * (A[bi, bi] + A[bi, bi].T)
        for j in range(i + block, N, block):
            bj = slice(j, min(j + block, N))
            avg = 0.5 * (A[bi, bj] + A[bj, bi].T)
            A[bi, bj] = avg
            A[bj, bi] = avg.T


# ---------------------------------------------------------------------------
# mass, loads, nonlinear terms


def local_mass(n: int) -> np.ndarray:
    """int_T lambda_a lambda_b / |T| on a simplex."""
    m = np.ones((n + 1, n + 1)) + np.eye(n + 1)
    return m * math.factorial(n) / math.factorial(n + 2)


def assemble_mass(mesh: SimplicialMesh) -> sparse.csr_matrix:
    """Exact P1 mass matrix over interior dofs (sparse)."""
    n = mesh.dimension
    loc = mesh.volumes[:, None, None] * local_mass(n)[None]
    edofs = mesh.element_dofs
    rows = np.repeat(edofs, n + 1, axis=1).ravel()
    cols = np.tile(edofs, (1, n + 1)).ravel()
    ok = (rows >= 0) & (cols >= 0)
    N = mesh.n_dofs
    return sparse.csr_matrix((loc.ravel()[ok], (rows[ok], cols[ok])), shape=(N, N))


def _scatter_vector(mesh, q, values):
    edofs = mesh.element_dofs[q.element]
    contrib = (q.weights * values)[:, None] * q.bary
    ok = edofs >= 0
    return np.bincount(edofs[ok], weights=contrib[ok], minlength=mesh.n_dofs)


def assemble_load(mesh: SimplicialMesh, f, order: int = 6, boundary_singular: bool = False,
                  depth: int = BOUNDARY_DEPTH) -> np.ndarray:
    """Load vector F[i] = int f phi_i.

    ``f`` maps (P, n) points to (P,) values.  With ``boundary_singular`` the
    boundary elements use a geometrically graded rule.
    """
    if order < 4:
        raise ValueError("load quadrature order must be at least 4")
    q = element_quadrature(mesh, order, graded=boundary_singular, depth=depth)
    vals = np.asarray(f(q.points), dtype=float)
    if vals.shape == ():
        vals = np.full(len(q.weights), float(vals))
    if np.isnan(vals).any():
        raise FloatingPointError("load function returned NaN")
    return _scatter_vector(mesh, q, vals)


def p1_values(mesh: SimplicialMesh, coeffs: np.ndarray, q) -> np.ndarray:
    """Values of the zero-trace P1 function at the points of ``q``."""
    full = np.zeros(mesh.n_vertices)
    full[mesh.interior] = coeffs
    return np.sum(full[mesh.elements[q.element]] * q.bary, axis=1)


def assemble_semilinear(mesh: SimplicialMesh, u: np.ndarray, preset: NonlinearityPreset,
                        order: int = 6):
    """Return (a_vec, J): int a(u_h) phi_i and int a'(u_h) phi_i phi_j."""
    N = mesh.n_dofs
    if preset.is_zero:
        return np.zeros(N), sparse.csr_matrix((N, N))
    if preset.tag == "linear":
        M = assemble_mass(mesh)
        return preset.c * (M @ u), preset.c * M
    q = element_quadrature(mesh, order, graded=False)
    uq = p1_values(mesh, u, q)
    a_vec = _scatter_vector(mesh, q, preset.a(uq))
    nv = mesh.dimension + 1
    wd = q.weights * preset.da(uq)
    loc = np.zeros((mesh.n_elements, nv, nv))
    np.add.at(loc, q.element, wd[:, None, None] * q.bary[:, :, None] * q.bary[:, None, :])
    edofs = mesh.element_dofs
    rows = np.repeat(edofs, nv, axis=1).ravel()
    cols = np.tile(edofs, (1, nv)).ravel()
    ok = (rows >= 0) & (cols >= 0)
    J = sparse.csr_matrix((loc.ravel()[ok], (rows[ok], cols[ok])), shape=(N, N))
    return a_vec, J


def control_to_load(mesh: SimplicialMesh, z: np.ndarray) -> np.ndarray:
    """Exact int z phi_i for a piecewise constant z (one value per element)."""
    z = np.asarray(z, dtype=float)
    if z.shape != (mesh.n_elements,):
        raise ValueError("control must have one value per element")
    n = mesh.dimension
    contrib = np.repeat((z * mesh.volumes / (n + 1))[:, None], n + 1, axis=1)
    edofs = mesh.element_dofs
    ok = edofs >= 0
    return np.bincount(edofs[ok], weights=contrib[ok], minlength=mesh.n_dofs)


# ---------------------------------------------------------------------------
# system container and binary dump


@dataclass
class FeSystem:
    """P1 space with zero trace, dense stiffness A and sparse mass M."""

    mesh: SimplicialMesh
    s: float
    A: np.ndarray
    M: sparse.csr_matrix
    orders: QuadratureOrders = field(default=DEFAULT_ORDERS)

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_dofs

    @cached_property
    def cholesky(self):
        from scipy.linalg import cho_factor
        return cho_factor(self.A, lower=True)

    def energy(self, u: np.ndarray) -> float:
        return float(u @ self.A @ u)


def build_system(mesh: SimplicialMesh, s: float, orders: QuadratureOrders | None = None,
                 backend: str | None = None) -> FeSystem:
    orders = default_orders(mesh.dimension) if orders is None else orders
    return FeSystem(mesh, s, assemble_stiffness(mesh, s, orders, backend), assemble_mass(mesh), orders)


_HEADER = struct.Struct("<idi")


def dump_matrix(path, matrix, n: int, s: float) -> None:
    """Write a dense matrix as a 16-byte header {n, s, N} plus row-major float64."""
    mat = np.asarray(matrix.toarray() if sparse.issparse(matrix) else matrix, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(n, s, mat.shape[0]))
        fh.write(np.ascontiguousarray(mat).tobytes())


def load_matrix(path):
    """Inverse of :func:`dump_matrix`; returns (n, s, matrix)."""
    with open(path, "rb") as fh:
        n, s, N = _HEADER.unpack(fh.read(_HEADER.size))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return n, s, data.reshape(N, N).copy()
