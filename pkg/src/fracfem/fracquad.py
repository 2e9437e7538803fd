"""Quadrature for the hypersingular double integrals of the fractional form.

Touching element pairs are handled by a recursive cone decomposition of
``T x T'`` about shared vertices.  The P1 integrand
``(u(x) - u(y)) (v(x) - v(y)) |x - y|^(-n-2s)`` is homogeneous of degree
``2 - n - 2s`` about every shared vertex pair, so each radial variable is
integrated in closed form and only smooth integrals over disjoint face
pairs remain.  Those leaves get tensor Gauss rules.

The exterior part of the form needs ``int_{R^n minus P} |x-y|^(-n-2s) dy``
for a polytope ``P``.  By the divergence theorem this is a flux through the
boundary of ``P``; each boundary segment contributes an incomplete Beta
function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .mesh import DISJOINT, IDENTICAL, SHARED_FACET, SHARED_VERTEX, SimplicialMesh

SINGULAR_ORDER = 12
NEAR_ORDER = 6
FAR_ORDER = 3
FAR_SEPARATION = 3.0
TOL_QUAD = 1e-8
BOUNDARY_DEPTH = 20


@dataclass(frozen=True)
class KernelConstant:
    n: int
    s: float
    value: float

    def __float__(self):
        return self.value


def kernel_constant(n: int, s: float) -> KernelConstant:
    """C(n, s) = 2^{2s} s Gamma(s + n/2) / (pi^{n/2} Gamma(1 - s))."""
    if n not in (1, 2):
        raise ValueError(f"dimension must be 1 or 2, got {n}")
    if not 0.0 < s < 1.0:
        raise ValueError(f"fractional order must lie in (0, 1), got {s}")
    value = 4.0**s * s * math.gamma(s + 0.5 * n) / (math.pi ** (0.5 * n) * math.gamma(1.0 - s))
    return KernelConstant(n, s, value)


# ---------------------------------------------------------------------------
# basic rules on reference cells


@lru_cache(maxsize=None)
def gauss_legendre(k: int):
    """k-point Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(k)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def _collapsed_triangle(k: int):
    # Gauss-Jacobi in the collapsed direction absorbs the Duffy Jacobian
    t, wt = special.roots_jacobi(k, 1.0, 0.0)
    u, wu = 0.5 * (t + 1.0), wt / 4.0
    v, wv = gauss_legendre(k)
    x = np.repeat(u, k)
    y = np.outer(1.0 - u, v).ravel()
    w = np.outer(wu, wv).ravel()
    return np.stack([x, y], axis=1), w


_STRANG_FIX_3 = (np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]]), np.full(3, 1 / 6))


def _radon_7():
    a, b = 0.470142064105115, 0.101286507323456
    wa, wb = 0.132394152788506, 0.125939180544827
    pts = [[1 / 3, 1 / 3], [a, a], [1 - 2 * a, a], [a, 1 - 2 * a], [b, b], [1 - 2 * b, b], [b, 1 - 2 * b]]
    w = [0.225, wa, wa, wa, wb, wb, wb]
    return np.array(pts), 0.5 * np.array(w)


_RADON_7 = _radon_7()


@lru_cache(maxsize=None)
def simplex_rule(n: int, k: int):
    """Rule of order ``k`` on the reference simplex (measure 1 or 1/2).

    1D: k-point Gauss.  2D: k=1 centroid, k=2 three-point (degree 2),
    k=3 seven-point Radon (degree 5), k>=4 collapsed Gauss (degree 2k-1).
    """
    if n == 1:
        x, w = gauss_legendre(k)
        return x[:, None], w
    if k == 1:
        return np.array([[1 / 3, 1 / 3]]), np.array([0.5])
    if k == 2:
        return _STRANG_FIX_3
    if k == 3:
        return _RADON_7
    return _collapsed_triangle(k)


def barycentric(ref_points: np.ndarray) -> np.ndarray:
    return np.concatenate([1.0 - ref_points.sum(axis=1, keepdims=True), ref_points], axis=1)


def reference_vertices(n: int) -> np.ndarray:
    return np.concatenate([np.zeros((1, n)), np.eye(n)])


# ---------------------------------------------------------------------------
# pair rules


@dataclass(frozen=True)
class PairRule:
    """Quadrature for one element pair in canonical local ordering.

    Shared vertices come first, in the same order, on both elements.
    ``x``/``y`` are reference points on T and T'; the integral over the
    physical pair is ``(n!)^2 |T| |T'| sum(weights * f(F_T x, F_T' y))``.
    ``delta[p, a]`` holds ``phi_a(x_p) - phi_a(y_p)`` for the local
    functions of the union of both vertex sets (T's vertices first).
    """

    classification: str
    n: int
    s: float
    k: int
    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    shared: int

    @property
    def delta(self) -> np.ndarray:
        return _difference_table(self.x, self.y, self.n, self.shared)

    def integrate(self, f) -> float:
        """Reference-cell integral of ``f(x_ref, y_ref)`` (vectorised)."""
        return float(np.dot(self.weights, f(self.x, self.y)))


def _difference_table(x, y, n, shared):
    lx, ly = barycentric(x), barycentric(y)
    m = n + 1
    out = np.zeros((len(x), 2 * m - shared))
    out[:, :m] = lx
    out[:, :shared] -= ly[:, :shared]
    out[:, m:] = -ly[:, shared:]
    return out


def _face_rule(verts: np.ndarray, k: int):
    d = len(verts) - 1
    if d == 0:
        return verts.copy(), np.ones(1)
    if d == 1:
        t, w = gauss_legendre(k)
        seg = verts[1] - verts[0]
        return verts[0] + t[:, None] * seg, w * np.linalg.norm(seg)
    pts, w = _collapsed_triangle(k)
    e1, e2 = verts[1] - verts[0], verts[2] - verts[0]
    jac = abs(e1[0] * e2[1] - e1[1] * e2[0])
    return verts[0] + pts[:, :1] * e1 + pts[:, 1:] * e2, w * jac


def _facet_height(origin, sigma, tau, ref):
    n = ref.shape[1]
    p0 = np.concatenate([ref[sigma[0]], ref[tau[0]]])
    tangents = [np.concatenate([ref[v] - ref[sigma[0]], np.zeros(n)]) for v in sigma[1:]]
    tangents += [np.concatenate([np.zeros(n), ref[v] - ref[tau[0]]]) for v in tau[1:]]
    r = origin - p0
    if tangents:
        q, _ = np.linalg.qr(np.array(tangents).T)
        r = r - q @ (q.T @ r)
    return float(np.linalg.norm(r))


@lru_cache(maxsize=None)
def _cone_leaves(n: int, shared: int, k: int):
    """Leaves of the cone decomposition: (x, y, geometric weight, radial dims)."""
    ref = reference_vertices(n)
    leaves = []

    def rec(sigma, tau, factor, dims):
        common = [i for i in range(shared) if i in sigma and i in tau]
        if not common:
            xs, wx = _face_rule(ref[list(sigma)], k)
            ys, wy = _face_rule(ref[list(tau)], k)
            x = np.repeat(xs, len(ys), axis=0)
            y = np.tile(ys, (len(xs), 1))
            leaves.append((x, y, factor * np.outer(wx, wy).ravel(), dims))
            return
        i = common[0]
        dim = len(sigma) + len(tau) - 2
        origin = np.concatenate([ref[i], ref[i]])
        if len(sigma) > 1:
            facet = tuple(v for v in sigma if v != i)
            rec(facet, tau, factor * _facet_height(origin, facet, tau, ref), dims + (dim,))
        if len(tau) > 1:
            facet = tuple(v for v in tau if v != i)
            rec(sigma, facet, factor * _facet_height(origin, sigma, facet, ref), dims + (dim,))

    full = tuple(range(n + 1))
    rec(full, full, 1.0, ())
    return leaves


_SHARED_COUNT = {IDENTICAL: lambda n: n + 1, SHARED_FACET: lambda n: n, SHARED_VERTEX: lambda n: 1,
                 DISJOINT: lambda n: 0}


def singular_pair_rule(classification: str, n: int, s: float, k: int = SINGULAR_ORDER) -> PairRule:
    """Pair rule for the P1 fractional integrand.

    For touching pairs the radial variables of the cone decomposition are
    integrated exactly, so the rule is exact whenever the integrand is the
    P1 difference product times the homogeneous kernel.  Disjoint pairs get
    the plain tensor rule ``simplex_rule(n, k)`` squared.
    """
    if k < 1:
        raise ValueError("quadrature order must be >= 1")
    if classification not in _SHARED_COUNT or (n == 1 and classification == SHARED_FACET):
        raise ValueError(f"unsupported classification {classification!r} for n={n}")
    shared = _SHARED_COUNT[classification](n)
    if classification == DISJOINT:
        p, w = simplex_rule(n, k)
        x = np.repeat(p, len(p), axis=0)
        y = np.tile(p, (len(p), 1))
        return PairRule(classification, n, s, k, x, y, np.outer(w, w).ravel(), 0)
    xs, ys, ws = [], [], []
    for x, y, w, dims in _cone_leaves(n, shared, k):
        radial = np.prod([1.0 / (d + 2.0 - n - 2.0 * s) for d in dims])
        xs.append(x)
        ys.append(y)
        ws.append(w * radial)
    return PairRule(classification, n, s, k, np.concatenate(xs), np.concatenate(ys),
                    np.concatenate(ws), shared)


def canonical_order(elem_t, elem_u):
    """Reorder two vertex tuples so that shared vertices come first."""
    shared = [v for v in elem_t if v in elem_u]
    pt = shared + [v for v in elem_t if v not in shared]
    pu = shared + [v for v in elem_u if v not in shared]
    return pt, pu, len(shared)


# ---------------------------------------------------------------------------
# exterior weights


def _cos_power_integral(theta, s):
    """int_0^theta cos^{2s}(phi) dphi for |theta| < pi/2."""
    half = 0.5 * special.beta(0.5, s + 0.5)
    return np.sign(theta) * half * special.betainc(0.5, s + 0.5, np.sin(theta) ** 2)


def _cos_power_tail(theta, s):
    """int_|theta|^{pi/2} cos^{2s}(phi) dphi (accurate near pi/2)."""
    half = 0.5 * special.beta(0.5, s + 0.5)
    return half * special.betainc(s + 0.5, 0.5, np.cos(theta) ** 2)


def segment_flux(x, p0, p1, s):
    """(1/2s) int_{[p0,p1]} (y - x).nu |y - x|^{-2-2s} dS(y), nu the right normal.

    ``x`` has shape (..., 2) and broadcasts against ``p0``/``p1``.
    """
    x, p0, p1 = np.broadcast_arrays(np.asarray(x, float), np.asarray(p0, float), np.asarray(p1, float))
    seg = p1 - p0
    length = np.linalg.norm(seg, axis=-1)
    t = seg / length[..., None]
    nu = np.stack([t[..., 1], -t[..., 0]], axis=-1)
    d = np.sum((p0 - x) * nu, axis=-1)
    ad = np.abs(d)
    tau0 = np.sum((p0 - x) * t, axis=-1)
    tau1 = np.sum((p1 - x) * t, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        th0 = np.arctan2(tau0, ad)
        th1 = np.arctan2(tau1, ad)
        straddle = (np.sign(th0) != np.sign(th1)) | (th0 == 0) | (th1 == 0)
        direct = _cos_power_integral(th1, s) - _cos_power_integral(th0, s)
        tails = np.sign(th1) * (_cos_power_tail(th0, s) - _cos_power_tail(th1, s))
        ang = np.where(straddle, direct, tails)
        out = np.sign(d) * ad ** (-2.0 * s) * ang / (2.0 * s)
    return np.where(ad > 0, out, 0.0)


def exterior_weight(x, segments, s, n):
    """int over the complement of a polytope P of |x - y|^{-n-2s} dy.

    ``segments`` are the oriented boundary facets of P: shape (B, 2, 2) with
    P on the left of each segment in 2D, or (B, 1, 1) boundary points in 1D
    given together with an outward sign via ``segments[:, 0, 0]`` ordering
    (left end first).  ``x`` (..., n) must lie inside P.
    """
    x = np.asarray(x, dtype=float)
    if n == 1:
        pts = np.asarray(segments, dtype=float).reshape(-1)
        lo, hi = pts.min(), pts.max()
        xx = x[..., 0]
        return ((xx - lo) ** (-2.0 * s) + (hi - xx) ** (-2.0 * s)) / (2.0 * s)
    segs = np.asarray(segments, dtype=float)
    return segment_flux(x[..., None, :], segs[:, 0], segs[:, 1], s).sum(axis=-1)


def complement_weight(x, domain_or_mesh, s):
    """omega(x) = int_{Omega^c} |x - y|^{-n-2s} dy for x inside Omega."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    segs = domain_or_mesh.boundary_segments()
    n = domain_or_mesh.dimension
    xx = x.reshape(-1, n)
    if n == 1:
        ends = segs.reshape(-1)
        if np.any(xx[:, 0] <= ends.min()) or np.any(xx[:, 0] >= ends.max()):
            raise ValueError("complement weight diverges on or outside the boundary")
    else:
        from .mesh import point_segment_distance
        d = point_segment_distance(xx[:, None, :], segs[None, :, 0], segs[None, :, 1]).min(axis=1)
        if np.any(d <= 0):
            raise ValueError("complement weight diverges on the boundary")
    out = exterior_weight(xx, segs, s, n)
    return out.reshape(x.shape[:-1]) if n > 1 or x.ndim > 1 else out


# ---------------------------------------------------------------------------
# element rules with boundary grading


@dataclass(frozen=True)
class ElementQuadrature:
    """Flattened quadrature over a set of elements.

    ``weights`` include the physical Jacobian; ``bary`` are the barycentric
    coordinates of every point in its element.
    """

    element: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    bary: np.ndarray


def _graded_interval_rule(k, depth, toward_left):
    t, w = gauss_legendre(k)
    xs, ws = [], []
    edges = [0.0] + [2.0 ** -(depth - j) for j in range(depth)] + [1.0]
    for a, b in zip(edges[:-1], edges[1:]):
        xs.append(a + (b - a) * t)
        ws.append((b - a) * w)
    x, wt = np.concatenate(xs), np.concatenate(ws)
    return (x, wt) if toward_left else (1.0 - x, wt)


def _graded_triangle_rule(k, depth, vertex):
    """Rule on the reference triangle graded toward a vertex (0, 1, 2) or,
    with ``vertex = ('edge', j)``, toward the edge opposite vertex j."""
    ref = reference_vertices(2)
    v, wv = gauss_legendre(k)
    if isinstance(vertex, tuple):
        apex = vertex[1]
        r, wr = _graded_interval_rule(k, depth, toward_left=False)
    else:
        apex = vertex
        r, wr = _graded_interval_rule(k, depth, toward_left=True)
    a = ref[apex]
    b, c = ref[(apex + 1) % 3], ref[(apex + 2) % 3]
    # x = a + r (b - a) + r v (c - b), Jacobian r |det| with |det| = 1
    pts = a + r[:, None, None] * ((b - a) + v[None, :, None] * (c - b))
    w = (wr * r)[:, None] * wv[None, :]
    return pts.reshape(-1, 2), w.ravel()


def _map_rule(tri, pts, w):
    e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
    jac = abs(e1[0] * e2[1] - e1[1] * e2[0])
    return tri[0] + pts[:, :1] * e1 + pts[:, 1:] * e2, w * jac


def _edge_corner_rule(tri, j, corners, k, depth):
    """Sub-triangle with a singular edge opposite local vertex j.

    Endpoints flagged in ``corners`` sit on a corner of the domain, where
    the weight is singular at the scale of the distance to the corner; the
    rule then recursively halves the triangle toward that corner.
    """
    a, b, c = j, (j + 1) % 3, (j + 2) % 3
    cb, cc = b in corners, c in corners
    if depth <= 0 or not (cb or cc):
        return [_map_rule(tri, *_graded_triangle_rule(k, max(depth, 1), ("edge", j)))]
    if cb and cc:
        m = 0.5 * (tri[b] + tri[c])
        return (_edge_corner_rule(np.array([tri[a], tri[b], m]), 0, {1}, k, depth)
                + _edge_corner_rule(np.array([tri[a], m, tri[c]]), 0, {2}, k, depth))
    if cc:
        # mirror so that the corner is at b
        return _edge_corner_rule(np.array([tri[a], tri[c], tri[b]]), 0, {1}, k, depth)
    A, B, C = tri[a], tri[b], tri[c]
    a_mid, m = 0.5 * (A + B), 0.5 * (B + C)
    out = _edge_corner_rule(np.array([a_mid, B, m]), 0, {1}, k, depth - 1)
    out.append(_map_rule(np.array([A, m, C]), *_graded_triangle_rule(k, depth, ("edge", 0))))
    out.append(_map_rule(np.array([A, a_mid, m]), *_graded_triangle_rule(k, depth, 2)))
    return out


def _feature_rule(tri, edges, sing, corners, k, depth):
    """Composite rule on a sub-triangle with singular edges/vertices.

    edges : local indices j of singular edges (opposite vertex j)
    sing : all singular local vertices (including edge endpoints)
    corners : singular vertices lying on a domain corner
    """
    ends = {(j + 1) % 3 for j in edges} | {(j + 2) % 3 for j in edges}
    isolated = set(sing) - ends
    if not edges:
        if not sing:
            return [_map_rule(tri, *simplex_rule(2, k))]
        if len(sing) == 1:
            return [_map_rule(tri, *_graded_triangle_rule(k, depth, next(iter(sing))))]
        if len(sing) == 2:
            i, l = sorted(sing)
            o = 3 - i - l
            m = 0.5 * (tri[i] + tri[l])
            return ([_map_rule(np.array([tri[i], m, tri[o]]), *_graded_triangle_rule(k, depth, 0))]
                    + [_map_rule(np.array([m, tri[l], tri[o]]), *_graded_triangle_rule(k, depth, 1))])
    elif len(edges) == 1 and not isolated:
        return _edge_corner_rule(tri, next(iter(edges)), corners, k, depth)
    centre = tri.mean(axis=0)
    out = []
    for j in range(3):
        a, b = j, (j + 1) % 3
        sub = np.array([tri[a], tri[b], centre])
        if (j + 2) % 3 in edges:
            sub_corners = {i for i, v in ((0, a), (1, b)) if v in corners}
            out += _feature_rule(sub, {2}, {0, 1}, sub_corners, k, depth)
        else:
            out += _feature_rule(sub, set(), {i for i, v in ((0, a), (1, b)) if v in sing}, set(), k, depth)
    return out


def corner_vertices(mesh: SimplicialMesh) -> np.ndarray:
    """Boundary vertices where the boundary of a polygonal mesh turns."""
    flags = np.zeros(mesh.n_vertices, dtype=bool)
    if mesh.dimension == 1:
        return flags
    facets = mesh.boundary_facets
    tangent = mesh.vertices[facets[:, 1]] - mesh.vertices[facets[:, 0]]
    tangent /= np.linalg.norm(tangent, axis=1)[:, None]
    incoming = np.zeros((mesh.n_vertices, 2))
    incoming[facets[:, 1]] = tangent
    outgoing = np.zeros((mesh.n_vertices, 2))
    outgoing[facets[:, 0]] = tangent
    cross = incoming[:, 0] * outgoing[:, 1] - incoming[:, 1] * outgoing[:, 0]
    flags[facets[:, 0]] = np.abs(cross[facets[:, 0]]) > 1e-12
    return flags


def _boundary_rule_reference(mesh, t, k, depth, corners=None):
    elem = mesh.elements[t]
    on = mesh.boundary[elem]
    if mesh.dimension == 1:
        if on.all():
            x1, w1 = _graded_interval_rule(k, depth, True)
            x2, w2 = _graded_interval_rule(k, depth, False)
            x = np.concatenate([0.5 * x1, 0.5 + 0.5 * x2])
            return x[:, None], 0.5 * np.concatenate([w1, w2])
        x, w = _graded_interval_rule(k, depth, bool(on[0]))
        return x[:, None], w
    if corners is None:
        corners = corner_vertices(mesh)
    facets = {frozenset(map(int, f)) for f in mesh.boundary_facets}
    edges = {j for j in range(3)
             if frozenset((int(elem[(j + 1) % 3]), int(elem[(j + 2) % 3]))) in facets}
    sing = set(np.flatnonzero(on).tolist())
    corner_local = {i for i in sing if corners[elem[i]]}
    if len(edges) == 2:
        # the vertex shared by two boundary edges of one triangle is a corner
        corner_local.add(3 - sum(edges))
    pieces = _feature_rule(reference_vertices(2), edges, sing, corner_local, k, depth)
    return np.concatenate([p for p, _ in pieces]), np.concatenate([w for _, w in pieces])


def element_quadrature(mesh: SimplicialMesh, k: int, elements=None, graded: bool = True,
                       depth: int = BOUNDARY_DEPTH) -> ElementQuadrature:
    """Quadrature points on the given elements (default: all).

    Boundary-touching elements get a rule geometrically graded toward their
    boundary vertices/edges (ratio 1/2, ``depth`` levels) when ``graded``.
    """
    n = mesh.dimension
    if elements is None:
        elements = np.arange(mesh.n_elements)
    elements = np.asarray(elements, dtype=np.int64)
    ref_pts, ref_w = simplex_rule(n, k)
    fact = math.factorial(n)
    touching = mesh.touches_boundary[elements] if graded else np.zeros(len(elements), bool)
    plain = elements[~touching]
    chunks = []
    if len(plain):
        lam = barycentric(ref_pts)
        pts = np.einsum("qa,tad->tqd", lam, mesh.coords[plain])
        w = np.outer(mesh.volumes[plain] * fact, ref_w)
        chunks.append((np.repeat(plain, len(ref_w)), pts.reshape(-1, n), w.ravel(),
                       np.tile(lam, (len(plain), 1))))
    corners = corner_vertices(mesh) if touching.any() else None
    for t in elements[touching]:
        p, w = _boundary_rule_reference(mesh, int(t), k, depth, corners)
        lam = barycentric(p)
        chunks.append((np.full(len(w), t), lam @ mesh.coords[t], w * mesh.volumes[t] * fact, lam))
    if not chunks:
        return ElementQuadrature(np.zeros(0, np.int64), np.zeros((0, n)), np.zeros(0), np.zeros((0, n + 1)))
    el, pts, w, lam = (np.concatenate(c) for c in zip(*chunks))
    order = np.argsort(el, kind="stable")
    return ElementQuadrature(el[order], pts[order], w[order], lam[order])


def complement_mass_entry(mesh: SimplicialMesh, i: int, j: int, s: float, k: int = 6,
                          depth: int = BOUNDARY_DEPTH) -> float:
    """int_Omega phi_i phi_j omega dx for vertex hats phi_i, phi_j."""
    common = sorted(set(mesh.vertex_elements[i]) & set(mesh.vertex_elements[j]))
    if not common:
        return 0.0
    q = element_quadrature(mesh, k, common, depth=depth)
    elem = mesh.elements[q.element]
    phi_i = np.sum(q.bary * (elem == i), axis=1)
    phi_j = np.sum(q.bary * (elem == j), axis=1)
    omega = exterior_weight(q.points, mesh.boundary_segments(), s, mesh.dimension)
    return float(np.sum(q.weights * phi_i * phi_j * omega))
