"""Conforming simplicial meshes of intervals and polygons.

Meshes are immutable once built.  Triangles are stored counter-clockwise
with the newest-vertex convention: for an element ``(a, b, c)`` the edge
``(a, b)`` is the refinement edge and ``c`` is the newest vertex.  All
refinement goes through newest-vertex bisection, so a mesh refined from a
coarser one is nested in it and keeps ``parents`` for every new vertex.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

DEFAULT_SIGMA_MAX = 10.0
DEFAULT_ELEMENT_CAP = 200_000

IDENTICAL = "identical"
SHARED_FACET = "shared_facet"
SHARED_VERTEX = "shared_vertex"
DISJOINT = "disjoint"


class MeshError(ValueError):
    """Invalid domain or mesh request."""


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class Interval:
    a: float = -1.0
    b: float = 1.0

    def __post_init__(self):
        if not self.b > self.a:
            raise MeshError(f"empty interval ({self.a}, {self.b})")

    dimension = 1

    @property
    def measure(self) -> float:
        return self.b - self.a

    def boundary_segments(self) -> np.ndarray:
        return np.array([[[self.a]], [[self.b]]])


class Polygon:
    """Simple closed polygon; vertices are reordered counter-clockwise."""

    dimension = 2

    def __init__(self, vertices):
        pts = np.asarray(vertices, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise MeshError("a polygon needs at least three 2D vertices")
        if np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        area = _signed_area(pts)
        scale = np.ptp(pts, axis=0).max()
        if abs(area) <= 1e-14 * scale**2:
            raise MeshError("degenerate polygon: zero area")
        if area < 0:
            pts = pts[::-1].copy()
        if _self_intersects(pts):
            raise MeshError("degenerate polygon: self-intersecting boundary")
        pts.setflags(write=False)
        self.vertices = pts

    def __repr__(self):
        return f"Polygon({self.vertices.tolist()})"

    @property
    def measure(self) -> float:
        return _signed_area(self.vertices)

    def boundary_segments(self) -> np.ndarray:
        return np.stack([self.vertices, np.roll(self.vertices, -1, axis=0)], axis=1)

    def is_axis_rectangle(self) -> bool:
        v = self.vertices
        if len(v) != 4:
            return False
        xs, ys = np.unique(v[:, 0]), np.unique(v[:, 1])
        return len(xs) == 2 and len(ys) == 2


def unit_square() -> Polygon:
    return Polygon([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def _signed_area(pts):
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _orient(p, q, r):
    return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])


def _segments_intersect(p1, p2, q1, q2):
    d1, d2 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    d3, d4 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 != 0 and d3 * d4 != 0:
        return True

    def on_seg(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    return ((d1 == 0 and on_seg(q1, q2, p1)) or (d2 == 0 and on_seg(q1, q2, p2))
            or (d3 == 0 and on_seg(p1, p2, q1)) or (d4 == 0 and on_seg(p1, p2, q2)))


def _self_intersects(pts):
    m = len(pts)
    for i in range(m):
        for j in range(i + 1, m):
            if j == i + 1 or (i == 0 and j == m - 1):
                continue
            if _segments_intersect(pts[i], pts[(i + 1) % m], pts[j], pts[(j + 1) % m]):
                return True
    return False


# ---------------------------------------------------------------------------
# geometry helpers


def point_segment_distance(x, p0, p1):
    """Distance from points ``x`` (..., 2) to segments ``p0 p1`` (broadcast)."""
    d = p1 - p0
    den = np.sum(d * d, axis=-1)
    t = np.sum((x - p0) * d, axis=-1) / np.where(den > 0, den, 1.0)
    t = np.clip(t, 0.0, 1.0)
    foot = p0 + t[..., None] * d
    return np.sqrt(np.sum((x - foot) ** 2, axis=-1))


# ---------------------------------------------------------------------------
# the mesh


class SimplicialMesh:
    """Conforming simplex mesh with boundary vertex flags.

    Parameters
    ----------
    vertices : (nv, n) array
    elements : (ne, n + 1) int array
    boundary : (nv,) bool array, True for vertices on the domain boundary
    domain : Interval or Polygon, optional
        Used for exact distances to the boundary.  Falls back to the mesh
        boundary facets.
    parents : (nv, 2) int array, optional
        For bisection vertices, the two endpoints of the bisected edge;
        ``-1`` for original vertices.
    """

    def __init__(self, vertices, elements, boundary, domain=None, parents=None):
        vertices = np.array(vertices, dtype=float)
        if vertices.ndim == 1:
            vertices = vertices[:, None]
        elements = np.array(elements, dtype=np.int64)
        n = vertices.shape[1]
        if n not in (1, 2) or elements.ndim != 2 or elements.shape[1] != n + 1:
            raise MeshError("only interval and triangle meshes are supported")
        boundary = np.array(boundary, dtype=bool)
        if parents is None:
            parents = -np.ones((len(vertices), 2), dtype=np.int64)
        parents = np.array(parents, dtype=np.int64)
        for arr in (vertices, elements, boundary, parents):
            arr.setflags(write=False)
        self.vertices = vertices
        self.elements = elements
        self.boundary = boundary
        self.parents = parents
        self.domain = domain
        if np.any(self.volumes <= 0):
            raise MeshError("degenerate or clockwise element")

    def __repr__(self):
        return (f"SimplicialMesh(n={self.dimension}, vertices={self.n_vertices}, "
                f"elements={self.n_elements}, h={self.h:.4g})")

    @property
    def dimension(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def interior(self) -> np.ndarray:
        """Indices of the interior vertices (the degrees of freedom)."""
        return np.flatnonzero(~self.boundary)

    @property
    def n_dofs(self) -> int:
        return len(self.interior)

    @cached_property
    def dof_map(self) -> np.ndarray:
        """Vertex -> dof index, ``-1`` on the boundary."""
        m = -np.ones(self.n_vertices, dtype=np.int64)
        m[self.interior] = np.arange(self.n_dofs)
        m.setflags(write=False)
        return m

    @cached_property
    def element_dofs(self) -> np.ndarray:
        return self.dof_map[self.elements]

    @cached_property
    def coords(self) -> np.ndarray:
        """Element vertex coordinates, shape (ne, n + 1, n)."""
        return self.vertices[self.elements]

    @cached_property
    def volumes(self) -> np.ndarray:
        c = self.vertices[self.elements]
        if self.dimension == 1:
            return c[:, 1, 0] - c[:, 0, 0]
        e1, e2 = c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def diameters(self) -> np.ndarray:
        """Element diameters h_T (longest edge)."""
        c = self.coords
        if self.dimension == 1:
            return np.abs(c[:, 1, 0] - c[:, 0, 0])
        lengths = [np.linalg.norm(c[:, i] - c[:, j], axis=1) for i, j in ((0, 1), (1, 2), (2, 0))]
        return np.max(lengths, axis=0)

    @cached_property
    def inradii(self) -> np.ndarray:
        if self.dimension == 1:
            return 0.5 * self.diameters
        c = self.coords
        perimeter = sum(np.linalg.norm(c[:, i] - c[:, j], axis=1) for i, j in ((0, 1), (1, 2), (2, 0)))
        return 2.0 * self.volumes / perimeter

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.coords.mean(axis=1)

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    @property
    def measure(self) -> float:
        return float(self.volumes.sum())

    @cached_property
    def touches_boundary(self) -> np.ndarray:
        return self.boundary[self.elements].any(axis=1)

    @cached_property
    def boundary_facets(self) -> np.ndarray:
        """Boundary facets as vertex-index tuples, oriented with the domain
        on their left (2D) / as endpoint indices (1D)."""
        if self.dimension == 1:
            counts = np.bincount(self.elements.ravel(), minlength=self.n_vertices)
            return np.flatnonzero(counts == 1)[:, None]
        edges = np.concatenate([self.elements[:, [0, 1]], self.elements[:, [1, 2]],
                                self.elements[:, [2, 0]]])
        key = np.sort(edges, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return edges[counts[inv.ravel()] == 1]

    def boundary_segments(self) -> np.ndarray:
        if self.domain is not None:
            return self.domain.boundary_segments()
        return self.vertices[self.boundary_facets]

    @cached_property
    def boundary_distance(self) -> np.ndarray:
        """Exact dist(T, boundary) for every element."""
        segs = self.boundary_segments()
        if self.dimension == 1:
            pts = self.coords[:, :, 0]
            ends = segs[:, 0, 0]
            return np.min(np.abs(pts[:, :, None] - ends[None, None, :]), axis=(1, 2))
        c = self.coords
        p0, p1 = segs[None, :, 0], segs[None, :, 1]
        best = np.full(self.n_elements, np.inf)
        for i, j in ((0, 1), (1, 2), (2, 0)):
            a, b = c[:, i][:, None, :], c[:, j][:, None, :]
            d = np.minimum.reduce([
                point_segment_distance(a, p0, p1), point_segment_distance(b, p0, p1),
                point_segment_distance(p0, a, b), point_segment_distance(p1, a, b)])
            best = np.minimum(best, d.min(axis=1))
        best[self.touches_boundary] = 0.0
        return best

    @cached_property
    def vertex_elements(self) -> list:
        out = [[] for _ in range(self.n_vertices)]
        for t, elem in enumerate(self.elements):
            for v in elem:
                out[v].append(t)
        return out

    @cached_property
    def touching_pairs(self) -> np.ndarray:
        """All unordered element pairs (T, T') with T < T' sharing a vertex."""
        pairs = set()
        for elems in self.vertex_elements:
            for i, t in enumerate(elems):
                for u in elems[i + 1:]:
                    pairs.add((t, u) if t < u else (u, t))
        if not pairs:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array(sorted(pairs), dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps({
            "dimension": self.dimension,
            "vertices": self.vertices.tolist(),
            "elements": self.elements.tolist(),
            "boundary": self.boundary.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "SimplicialMesh":
        data = json.loads(text)
        vertices = np.asarray(data["vertices"], dtype=float).reshape(-1, int(data["dimension"]))
        return cls(vertices, data["elements"], data["boundary"])


# ---------------------------------------------------------------------------
# construction


@dataclass(frozen=True)
class GradingSpec:
    """Boundary grading: h_T <= C h^mu at the boundary and
    h_T <= C h dist(T)^((mu-1)/mu) elsewhere."""

    h: float
    mu: float = 1.0
    c_sigma: float = 1.0

    def __post_init__(self):
        if not self.h > 0:
            raise MeshError("grading parameter h must be positive")
        if not self.mu >= 1:
            raise MeshError("grading exponent mu must be >= 1")
        if not self.c_sigma > 0:
            raise MeshError("grading constant must be positive")

    def size_bound(self, mesh: SimplicialMesh) -> np.ndarray:
        dist = mesh.boundary_distance
        interior = self.c_sigma * self.h * np.power(np.maximum(dist, 0.0), (self.mu - 1.0) / self.mu)
        return np.where(mesh.touches_boundary, self.c_sigma * self.h**self.mu, interior)

    def violations(self, mesh: SimplicialMesh) -> np.ndarray:
        return np.flatnonzero(mesh.diameters > self.size_bound(mesh) * (1 + 1e-12))


def _interval_mesh(domain: Interval, x: np.ndarray) -> SimplicialMesh:
    x = np.asarray(x, dtype=float)
    m = len(x) - 1
    elements = np.stack([np.arange(m), np.arange(1, m + 1)], axis=1)
    boundary = np.zeros(m + 1, dtype=bool)
    boundary[[0, -1]] = True
    return SimplicialMesh(x[:, None], elements, boundary, domain=domain)


def _boundary_flags(domain, vertices):
    segs = domain.boundary_segments()
    d = point_segment_distance(vertices[:, None, :], segs[None, :, 0], segs[None, :, 1])
    scale = np.ptp(segs.reshape(-1, 2), axis=0).max()
    return d.min(axis=1) <= 1e-12 * scale


def _criss_cross(domain: Polygon, h: float) -> SimplicialMesh:
    v = domain.vertices
    (x0, y0), (x1, y1) = v.min(axis=0), v.max(axis=0)
    nx, ny = math.ceil((x1 - x0) / h - 1e-12), math.ceil((y1 - y0) / h - 1e-12)
    xs, ys = np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    corners = np.stack([gx.ravel(), gy.ravel()], axis=1)
    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    ccx, ccy = np.meshgrid(cx, cy, indexing="ij")
    centers = np.stack([ccx.ravel(), ccy.ravel()], axis=1)
    vertices = np.concatenate([corners, centers])
    off = len(corners)

    def cid(i, j):
        return i * (ny + 1) + j

    elements = []
    for i in range(nx):
        for j in range(ny):
            c = off + i * ny + j
            sw, se, ne, nw = cid(i, j), cid(i + 1, j), cid(i + 1, j + 1), cid(i, j + 1)
            # refinement edge = cell side, newest vertex = cell centre
            elements += [(sw, se, c), (se, ne, c), (ne, nw, c), (nw, sw, c)]
    return SimplicialMesh(vertices, elements, _boundary_flags(domain, vertices), domain=domain)


def _ear_clip(pts: np.ndarray) -> list:
    idx = list(range(len(pts)))
    tris = []

    def inside(p, a, b, c):
        return _orient(a, b, p) >= 0 and _orient(b, c, p) >= 0 and _orient(c, a, p) >= 0

    guard = 0
    while len(idx) > 3:
        guard += 1
        if guard > 10 * len(pts) ** 2:
            raise MeshError("ear clipping failed; polygon is not simple")
        for k in range(len(idx)):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % len(idx)]
            a, b, c = pts[i0], pts[i1], pts[i2]
            if _orient(a, b, c) <= 0:
                continue
            if any(inside(pts[j], a, b, c) for j in idx if j not in (i0, i1, i2)):
                continue
            tris.append((i0, i1, i2))
            del idx[k]
            break
    tris.append(tuple(idx))
    return tris


def _longest_edge_first(vertices, tri):
    a, b, c = tri
    lengths = [np.linalg.norm(vertices[b] - vertices[a]), np.linalg.norm(vertices[c] - vertices[b]),
               np.linalg.norm(vertices[a] - vertices[c])]
    k = int(np.argmax(lengths))
    return (tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3])


def _polygon_base(domain: Polygon) -> SimplicialMesh:
    pts = domain.vertices
    tris = [_longest_edge_first(pts, t) for t in _ear_clip(pts)]
    return SimplicialMesh(pts.copy(), tris, np.ones(len(pts), dtype=bool), domain=domain)


def build_quasi_uniform(domain, h: float, cap: int = DEFAULT_ELEMENT_CAP) -> SimplicialMesh:
    """Quasi-uniform mesh with all element diameters at most ``h``.

    Intervals are split uniformly; axis-parallel rectangles get a
    criss-cross mesh; other polygons are ear-clipped and bisected.
    """
    if not h > 0:
        raise MeshError("mesh size h must be positive")
    if isinstance(domain, Interval):
        m = math.ceil(domain.measure / h - 1e-12)
        if m > cap:
            raise MeshError(f"element-count cap {cap} exceeded ({m} elements requested)")
        return _interval_mesh(domain, np.linspace(domain.a, domain.b, m + 1))
    if not isinstance(domain, Polygon):
        raise MeshError(f"unsupported domain {domain!r}")
    if domain.is_axis_rectangle():
        mesh = _criss_cross(domain, h)
        if mesh.n_elements > cap:
            raise MeshError(f"element-count cap {cap} exceeded ({mesh.n_elements} elements)")
        return mesh
    mesh = _polygon_base(domain)
    while True:
        marked = np.flatnonzero(mesh.diameters > h * (1 + 1e-12))
        if len(marked) == 0:
            return mesh
        mesh = refine(mesh, marked)
        if mesh.n_elements > cap:
            raise MeshError(f"element-count cap {cap} exceeded ({mesh.n_elements} elements)")


def _graded_interval(domain: Interval, spec: GradingSpec, cap: int) -> SimplicialMesh:
    centre, half = 0.5 * (domain.a + domain.b), 0.5 * domain.measure
    m = math.ceil(half / spec.h - 1e-12)
    while True:
        t = 1.0 - (1.0 - np.arange(m + 1) / m) ** spec.mu
        right = centre + half * t
        left = centre - half * t[::-1]
        x = np.concatenate([left[:-1], right])
        if 2 * m > cap:
            raise MeshError(f"element-count cap {cap} exceeded: grading mu={spec.mu} "
                            f"needs more than {cap} elements")
        mesh = _interval_mesh(domain, x)
        if len(spec.violations(mesh)) == 0:
            return mesh
        m = max(m + 1, math.ceil(1.05 * m))


def build_graded(domain, spec: GradingSpec, base: SimplicialMesh | None = None,
                 cap: int = DEFAULT_ELEMENT_CAP) -> SimplicialMesh:
    """Mesh satisfying the boundary grading bounds of ``spec``.

    1D meshes use the mapped partition ``1 - (1 - i/M)^mu`` from the
    midpoint to each endpoint.  2D meshes start from ``base`` (default: the
    quasi-uniform mesh of size ``spec.h``) and bisect violating elements;
    passing the graded mesh for a coarser ``h`` as ``base`` yields a nested
    family.
    """
    if isinstance(domain, Interval):
        if spec.mu == 1.0 and spec.c_sigma >= 1.0:
            return build_quasi_uniform(domain, spec.h, cap=cap)
        return _graded_interval(domain, spec, cap)
    mesh = base if base is not None else build_quasi_uniform(domain, spec.h, cap=cap)
    while True:
        marked = spec.violations(mesh)
        if len(marked) == 0:
            return mesh
        mesh = refine(mesh, marked)
        if mesh.n_elements > cap:
            raise MeshError(f"element-count cap {cap} exceeded while grading with "
                            f"mu={spec.mu}, h={spec.h} ({mesh.n_elements} elements)")


def refine(mesh: SimplicialMesh, marked) -> SimplicialMesh:
    """Bisect the marked elements (newest-vertex bisection with closure)."""
    marked = np.unique(np.asarray(marked, dtype=np.int64))
    if mesh.dimension == 1:
        x = mesh.vertices[:, 0]
        mids = 0.5 * (x[mesh.elements[marked, 0]] + x[mesh.elements[marked, 1]])
        return _interval_mesh(mesh.domain or Interval(x.min(), x.max()), np.sort(np.concatenate([x, mids])))

    elems = [tuple(int(v) for v in e) for e in mesh.elements]

    def key(a, b):
        return (a, b) if a < b else (b, a)

    edge_elems: dict = {}
    for t, (a, b, c) in enumerate(elems):
        for e in (key(a, b), key(b, c), key(c, a)):
            edge_elems.setdefault(e, []).append(t)

    marked_edges = set()
    stack = [key(*elems[t][:2]) for t in marked]
    while stack:
        e = stack.pop()
        if e in marked_edges:
            continue
        marked_edges.add(e)
        for t in edge_elems[e]:
            ref = key(*elems[t][:2])
            if ref not in marked_edges:
                stack.append(ref)

    vertices = [row for row in mesh.vertices]
    parents = [tuple(p) for p in mesh.parents]
    boundary = list(mesh.boundary)
    facet_keys = {key(int(a), int(b)) for a, b in mesh.boundary_facets}
    midpoint: dict = {}
    out = []

    def bisect(a, b, c):
        e = key(a, b)
        if e not in marked_edges:
            out.append((a, b, c))
            return
        m = midpoint.get(e)
        if m is None:
            m = len(vertices)
            midpoint[e] = m
            vertices.append(0.5 * (vertices[a] + vertices[b]))
            parents.append(e)
            on_boundary = e in facet_keys
            boundary.append(on_boundary)
            if on_boundary:
                facet_keys.update({key(a, m), key(m, b)})
        bisect(c, a, m)
        bisect(b, c, m)

    for a, b, c in elems:
        bisect(a, b, c)
    return SimplicialMesh(np.array(vertices), out, boundary, domain=mesh.domain, parents=parents)


def refine_uniform(mesh: SimplicialMesh, times: int = 1) -> SimplicialMesh:
    """Bisect every element ``times`` times (two bisections halve h in 2D)."""
    for _ in range(times):
        mesh = refine(mesh, np.arange(mesh.n_elements))
    return mesh


# ---------------------------------------------------------------------------
# queries


def shape_regularity(mesh: SimplicialMesh) -> float:
    """max_T h_T / rho_T with rho_T the inradius."""
    return float(np.max(mesh.diameters / mesh.inradii))


def pair_classification(mesh: SimplicialMesh, t: int, u: int) -> str:
    if t == u:
        return IDENTICAL
    shared = len(set(mesh.elements[t].tolist()) & set(mesh.elements[u].tolist()))
    if shared == 0:
        return DISJOINT
    if shared == mesh.dimension:
        return SHARED_FACET if mesh.dimension == 2 else SHARED_VERTEX
    return SHARED_VERTEX


def is_conforming(mesh: SimplicialMesh, tol: float = 1e-12) -> bool:
    """Check that elements meet only in full shared faces and tile the domain."""
    if mesh.dimension == 1:
        x = mesh.coords[:, :, 0]
        order = np.argsort(x[:, 0])
        x = x[order]
        return bool(np.all(np.abs(x[1:, 0] - x[:-1, 1]) <= tol * max(1.0, np.abs(x).max()))
                    and np.all(mesh.elements[order][1:, 0] == mesh.elements[order][:-1, 1]))
    edges = np.sort(np.concatenate([mesh.elements[:, [0, 1]], mesh.elements[:, [1, 2]],
                                    mesh.elements[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    if np.any(counts > 2):
        return False
    # no vertex may sit in the relative interior of another element's edge
    scale = mesh.h
    for i, j in ((0, 1), (1, 2), (2, 0)):
        a, b = mesh.coords[:, i], mesh.coords[:, j]
        d = point_segment_distance(mesh.vertices[None, :, :], a[:, None, :], b[:, None, :])
        own = (mesh.elements[:, [i]] == np.arange(mesh.n_vertices)[None, :]) | \
              (mesh.elements[:, [j]] == np.arange(mesh.n_vertices)[None, :])
        if np.any((d <= tol * scale) & ~own):
            return False
    if mesh.domain is not None and abs(mesh.measure - mesh.domain.measure) > 1e-10 * mesh.domain.measure:
        return False
    return True


def prolongation(coarse: SimplicialMesh, fine: SimplicialMesh):
    """Sparse matrix mapping interior P1 coefficients on ``coarse`` to ``fine``.

    In 1D the coarse function is interpolated at the fine vertices (exact
    when the meshes are nested).  In 2D ``fine`` must come from ``coarse``
    by bisection, so its vertex list extends the coarse one and every new
    vertex is the midpoint of its two ``parents``.
    """
    from scipy import sparse

    if coarse.dimension != fine.dimension:
        raise MeshError("meshes have different dimensions")
    if coarse.dimension == 1:
        xc = coarse.vertices[:, 0]
        order = np.argsort(xc)
        xs = xc[order]
        xf = fine.vertices[fine.interior, 0]
        k = np.clip(np.searchsorted(xs, xf, side="right") - 1, 0, len(xs) - 2)
        t = (xf - xs[k]) / (xs[k + 1] - xs[k])
        rows = np.concatenate([np.arange(len(xf))] * 2)
        cols = np.concatenate([order[k], order[k + 1]])
        vals = np.concatenate([1.0 - t, t])
        full = sparse.csr_matrix((vals, (rows, cols)), shape=(len(xf), coarse.n_vertices))
        return (full[:, coarse.interior]).tocsr()

    nc = coarse.n_vertices
    if fine.n_vertices < nc or not np.array_equal(fine.vertices[:nc], coarse.vertices):
        raise MeshError("fine mesh is not a refinement of the coarse mesh")
    # weights of every fine vertex in terms of coarse vertices, built in creation order
    weights = [{i: 1.0} for i in range(nc)]
    for v in range(nc, fine.n_vertices):
        a, b = (int(p) for p in fine.parents[v])
        if a < 0 or b < 0 or a >= v or b >= v:
            raise MeshError(f"vertex {v} has no valid parents")
        w: dict = {}
        for src in (weights[a], weights[b]):
            for key, val in src.items():
                w[key] = w.get(key, 0.0) + 0.5 * val
        weights.append(w)
    cmap = coarse.dof_map
    rows, cols, vals = [], [], []
    for r, v in enumerate(fine.interior):
        for key, val in weights[v].items():
            if cmap[key] >= 0 and val != 0.0:
                rows.append(r)
                cols.append(cmap[key])
                vals.append(val)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(fine.n_dofs, coarse.n_dofs))


def locate(mesh: SimplicialMesh, points, tol: float = 1e-10) -> np.ndarray:
    """Index of an element containing each point (``-1`` if none).

    Candidates come from a uniform bucket grid over element bounding boxes,
    then a barycentric test decides.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if mesh.dimension == 1:
        pts = pts.reshape(-1, 1)
    coords = mesh.coords
    lo, hi = coords.min(axis=1), coords.max(axis=1)
    span_lo, span_hi = lo.min(axis=0), hi.max(axis=0)
    cells = max(1, int(round(mesh.n_elements ** (1.0 / mesh.dimension))))
    size = (span_hi - span_lo) / cells
    size[size == 0] = 1.0

    def cell(x):
        return np.clip(np.floor((x - span_lo) / size).astype(np.int64), 0, cells - 1)

    buckets: dict = {}
    c_lo, c_hi = cell(lo - tol), cell(hi + tol)
    for t in range(mesh.n_elements):
        ranges = [range(c_lo[t, d], c_hi[t, d] + 1) for d in range(mesh.dimension)]
        for key in np.stack(np.meshgrid(*ranges, indexing="ij"), -1).reshape(-1, mesh.dimension):
            buckets.setdefault(tuple(key), []).append(t)

    # affine map inverse per element: x = v0 + B lambda'
    v0 = coords[:, 0]
    B = np.stack([coords[:, k] - v0 for k in range(1, mesh.dimension + 1)], axis=-1)
    Binv = np.linalg.inv(B)
    out = -np.ones(len(pts), dtype=np.int64)
    for i, key in enumerate(map(tuple, cell(pts))):
        cand = np.array(buckets.get(key, []), dtype=np.int64)
        if len(cand) == 0:
            continue
        lam = np.einsum("kij,kj->ki", Binv[cand], pts[i] - v0[cand])
        ok = np.all(lam >= -tol, axis=1) & (lam.sum(axis=1) <= 1 + tol)
        if np.any(ok):
            out[i] = cand[np.argmax(ok)]
    return out
