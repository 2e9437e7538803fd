import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracfem.mesh import (DISJOINT, IDENTICAL, SHARED_FACET, SHARED_VERTEX, GradingSpec, Interval,
                          MeshError, Polygon, SimplicialMesh, build_graded, build_quasi_uniform,
                          is_conforming, locate, pair_classification, prolongation, refine,
                          shape_regularity, unit_square)


def _inradius_oracle(tri):
    # area / semiperimeter, computed from side lengths only (Heron)
    a = np.linalg.norm(tri[1] - tri[0])
    b = np.linalg.norm(tri[2] - tri[1])
    c = np.linalg.norm(tri[0] - tri[2])
    p = 0.5 * (a + b + c)
    area = math.sqrt(max(p * (p - a) * (p - b) * (p - c), 0.0))
    return area / p, max(a, b, c)


def test_interval_quasi_uniform_counts():
    m = build_quasi_uniform(Interval(-1, 1), 0.5)
    assert (m.n_elements, m.n_vertices, m.n_dofs) == (4, 5, 3)
    m = build_quasi_uniform(Interval(-1, 1), 2.0**-9)
    assert m.n_elements == 1024 and m.n_dofs == 1023
    assert np.allclose(m.diameters, 2.0**-9)


def test_square_quasi_uniform():
    m = build_quasi_uniform(unit_square(), 0.5)
    assert m.h <= 0.5 + 1e-14
    assert is_conforming(m)
    assert np.all(m.volumes > 0)
    assert math.isclose(m.measure, 1.0)


def test_boundary_flags_exact():
    m = build_quasi_uniform(unit_square(), 0.25)
    v = m.vertices
    on = (np.isclose(v[:, 0], 0) | np.isclose(v[:, 0], 1) | np.isclose(v[:, 1], 0) | np.isclose(v[:, 1], 1))
    assert np.array_equal(on, m.boundary)


def test_degenerate_polygons_rejected():
    with pytest.raises(MeshError):
        Polygon([[0, 0], [1, 0], [2, 0]])
    with pytest.raises(MeshError):
        Polygon([[0, 0], [1, 1], [1, 0], [0, 1]])  # bow tie


def test_shape_regularity_interval():
    assert math.isclose(shape_regularity(build_quasi_uniform(Interval(), 0.1)), 2.0)


def test_shape_regularity_square_matches_heron_oracle():
    m = build_quasi_uniform(unit_square(), 0.25)
    sigma = max(d / r for r, d in (_inradius_oracle(t) for t in m.coords))
    assert math.isclose(shape_regularity(m), sigma, rel_tol=1e-12)
    # right isosceles triangle: hypotenuse / inradius = 2 + 2 sqrt 2
    assert math.isclose(sigma, 2 + 2 * math.sqrt(2), rel_tol=1e-12)


@pytest.mark.parametrize("h", [0.25, 0.125, 0.0625])
def test_graded_interval_bounds(h):
    spec = GradingSpec(h=h, mu=2.0)
    m = build_graded(Interval(-1, 1), spec)
    assert len(spec.violations(m)) == 0
    bd = m.touches_boundary
    assert np.all(m.diameters[bd] <= h**2 * (1 + 1e-12))
    assert is_conforming(m)


def test_graded_square_bounds_and_regularity():
    spec = GradingSpec(h=0.25, mu=2.0)
    m = build_graded(unit_square(), spec)
    assert is_conforming(m)
    d = m.boundary_distance
    bound = np.where(m.touches_boundary, spec.h**2, spec.h * np.sqrt(d))
    assert np.all(m.diameters <= bound * (1 + 1e-12))
    assert shape_regularity(m) <= 10.0


def test_mu_one_matches_quasi_uniform():
    a = build_graded(Interval(-1, 1), GradingSpec(h=0.125, mu=1.0))
    b = build_quasi_uniform(Interval(-1, 1), 0.125)
    assert np.allclose(np.sort(a.diameters), np.sort(b.diameters))
    a2 = build_graded(unit_square(), GradingSpec(h=0.25, mu=1.0))
    b2 = build_quasi_uniform(unit_square(), 0.25)
    assert np.allclose(np.sort(a2.diameters), np.sort(b2.diameters))


def test_dof_count_law_graded_square():
    # mu = n/(n-1): N ~ h^-2 |log h|; log2 of the growth factor tends to 2
    base = None
    counts = []
    for h in (0.5, 0.25, 0.125):
        base = build_graded(unit_square(), GradingSpec(h=h, mu=2.0), base=base)
        counts.append(base.n_dofs)
    # drop the coarsest step, where the base mesh dominates
    ratio = math.log2(counts[2] / counts[1])
    log_factor = math.log2(math.log(8) / math.log(4))
    assert abs(ratio - log_factor - 2.0) <= 0.3


def test_element_cap():
    with pytest.raises(MeshError, match="cap"):
        build_graded(Interval(-1, 1), GradingSpec(h=0.01, mu=3.0), cap=1000)
    with pytest.raises(MeshError, match="cap"):
        build_graded(unit_square(), GradingSpec(h=0.1, mu=2.0), cap=500)


def test_pair_classification_interval():
    m = build_quasi_uniform(Interval(-1, 1), 0.25)
    assert pair_classification(m, 2, 2) == IDENTICAL
    assert pair_classification(m, 2, 3) == SHARED_VERTEX
    assert pair_classification(m, 0, 5) == DISJOINT


def test_pair_classification_matches_vertex_sets():
    m = build_graded(unit_square(), GradingSpec(h=0.5, mu=2.0))
    names = {3: SHARED_FACET, 2: SHARED_FACET, 1: SHARED_VERTEX, 0: DISJOINT}
    rng = np.random.default_rng(0)
    for t, u in rng.integers(0, m.n_elements, size=(200, 2)):
        common = len(set(m.elements[t]) & set(m.elements[u]))
        expect = IDENTICAL if t == u else names[common]
        assert pair_classification(m, t, u) == expect


def test_conformity_detects_hanging_node():
    good = SimplicialMesh([[0, 0], [1, 0], [0, 1], [1, 1]], [[0, 1, 2], [1, 3, 2]], [True] * 4)
    assert is_conforming(good)
    # split one triangle only: the midpoint hangs on the other element's edge
    v = [[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.5]]
    hanging = SimplicialMesh(v, [[0, 1, 4], [0, 4, 2], [1, 3, 2]], [True] * 4 + [False])
    assert not is_conforming(hanging)


def test_refinement_nested_and_prolongation_exact():
    coarse = build_quasi_uniform(unit_square(), 0.5)
    fine = refine(refine(coarse, [0, 3]), [1, 2, 5])
    assert is_conforming(fine)
    P = prolongation(coarse, fine)
    full_c = 1.0 + 2 * coarse.vertices[:, 0] - 3 * coarse.vertices[:, 1]
    full_c[coarse.boundary] = 0.0
    uc = full_c[coarse.interior]
    # oracle: evaluate the coarse P1 function at the fine vertices directly
    fine_pts = fine.vertices[fine.interior]
    owner = locate(coarse, fine_pts)
    lam = []
    for p, t in zip(fine_pts, owner):
        c = coarse.coords[t]
        B = np.stack([c[1] - c[0], c[2] - c[0]], axis=1)
        l12 = np.linalg.solve(B, p - c[0])
        lam.append([1 - l12.sum(), *l12])
    expect = np.einsum("ka,ka->k", np.array(lam), full_c[coarse.elements[owner]])
    assert np.allclose(P @ uc, expect, atol=1e-14)


def test_prolongation_interval():
    coarse = build_quasi_uniform(Interval(-1, 1), 0.5)
    fine = build_quasi_uniform(Interval(-1, 1), 0.125)
    P = prolongation(coarse, fine)
    u = np.array([1.0, 2.0, -1.0])
    x = fine.vertices[fine.interior, 0]
    assert np.allclose(P @ u, np.interp(x, [-1, -0.5, 0, 0.5, 1], [0, 1, 2, -1, 0]))


def test_json_roundtrip():
    m = build_graded(unit_square(), GradingSpec(h=0.5, mu=2.0))
    back = SimplicialMesh.from_json(m.to_json())
    assert np.array_equal(back.elements, m.elements)
    assert np.array_equal(back.boundary, m.boundary)
    assert np.allclose(back.vertices, m.vertices)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.6), st.floats(1.0, 2.5))
def test_graded_interval_property(h, mu):
    spec = GradingSpec(h=h, mu=mu)
    m = build_graded(Interval(-1, 1), spec)
    assert len(spec.violations(m)) == 0
    assert is_conforming(m)
    assert math.isclose(m.measure, 2.0)
