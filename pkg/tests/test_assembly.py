import math

import numpy as np
import pytest
from scipy import integrate
from scipy.linalg import cho_factor, cho_solve

from fracfem.assembly import (FeSystem, NonlinearityPreset, ResourceError, assemble_load, assemble_mass,
                              assemble_semilinear, assemble_stiffness, build_system, control_to_load,
                              default_orders, dump_matrix, load_matrix)
from fracfem.bench import error_l2, getoor
from fracfem.fracquad import element_quadrature
from fracfem.mesh import (GradingSpec, Interval, build_graded, build_quasi_uniform, prolongation,
                          unit_square)


@pytest.fixture(scope="module")
def interval_512():
    return build_system(build_quasi_uniform(Interval(-1, 1), 2.0 / 512), 0.5)


@pytest.fixture(scope="module")
def square_quarter():
    return build_system(build_graded(unit_square(), GradingSpec(h=0.25, mu=2.0)), 0.5)


def _ones(x):
    return np.ones(len(x))


def test_getoor_interpolant_energy(interval_512):
    # ||u*||^2 = int f u* = pi/2 for u* = (1 - x^2)^{1/2}, f = 1
    x = interval_512.mesh.vertices[interval_512.mesh.interior, 0]
    v = np.sqrt(1 - x**2)
    assert abs(v @ interval_512.A @ v - math.pi / 2) / (math.pi / 2) < 0.02


def test_zero_extension_consistency(interval_512):
    F = assemble_load(interval_512.mesh, _ones)
    u = cho_solve(interval_512.cholesky, F)
    assert abs(u @ interval_512.A @ u - math.pi / 2) < 0.01
    x = interval_512.mesh.vertices[interval_512.mesh.interior, 0]
    assert abs(u[np.argmin(np.abs(x))] - 1.0) < 1e-2


@pytest.mark.parametrize("which", ["interval", "square"])
def test_symmetric_positive_definite(which, interval_512, square_quarter):
    sy = interval_512 if which == "interval" else square_quarter
    A = sy.A
    assert np.max(np.abs(A - A.T)) <= 1e-12 * np.max(np.abs(A))
    cho_factor(A)  # raises unless every pivot is positive
    rng = np.random.default_rng(1)
    V = rng.standard_normal((100, sy.n_dofs))
    assert np.all(np.einsum("ki,ij,kj->k", V, A, V) > 0)


def test_energy_nondecreasing_under_nested_refinement():
    # Galerkin best approximation: E_h = u_h^T A u_h grows towards ||u||^2
    for meshes in ([build_quasi_uniform(Interval(-1, 1), 2.0**-k) for k in (3, 4, 5)],
                   _nested_squares((0.5, 0.25))):
        energies = []
        for m in meshes:
            sy = build_system(m, 0.4)
            u = cho_solve(sy.cholesky, assemble_load(m, _ones))
            energies.append(u @ sy.A @ u)
        assert np.all(np.diff(energies) > 0)


def _nested_squares(hs, mu=2.0):
    out, base = [], None
    for h in hs:
        base = build_graded(unit_square(), GradingSpec(h=h, mu=mu), base=base)
        out.append(base)
    return out


def test_stiffness_continuous_in_s():
    m = build_quasi_uniform(Interval(-1, 1), 0.125)
    a = assemble_stiffness(m, 0.5)
    b = assemble_stiffness(m, 0.5 + 1e-6)
    assert np.max(np.abs(b - a) / np.abs(a)) < 1e-4


def test_quadrature_order_doubling_is_below_discretization_error():
    s = 0.5
    exact = getoor(1, s)
    for k in (4, 5, 6):
        m = build_quasi_uniform(Interval(-1, 1), 2.0**-k)
        F = assemble_load(m, _ones)
        orders = default_orders(1)
        A1 = assemble_stiffness(m, s, orders)
        A2 = assemble_stiffness(m, s, orders.doubled())
        u1, u2 = np.linalg.solve(A1, F), np.linalg.solve(A2, F)
        assert error_l2(m, u1 - u2, lambda x: np.zeros(len(x))) < 0.1 * error_l2(m, u1, exact)


def test_element_cap():
    m = build_quasi_uniform(Interval(-1, 1), 0.125)
    with pytest.raises(ResourceError):
        assemble_stiffness(m, 0.5, cap=10)


def test_dump_roundtrip(tmp_path):
    m = build_quasi_uniform(Interval(-1, 1), 0.25)
    A = assemble_stiffness(m, 0.3)
    path = tmp_path / "A.bin"
    dump_matrix(path, A, 1, 0.3)
    assert path.stat().st_size == 16 + 8 * A.size
    n, s, back = load_matrix(path)
    assert (n, s) == (1, 0.3) and np.array_equal(back, A)
    _, _, Mb = load_matrix(_dump(tmp_path / "M.bin", assemble_mass(m)))
    assert np.array_equal(Mb, assemble_mass(m).toarray())


def _dump(path, M):
    dump_matrix(path, M, 1, 0.3)
    return path


# ---------------------------------------------------------------------------
# mass, loads, semilinear terms


def test_mass_interval_entries():
    h = 0.125
    m = build_quasi_uniform(Interval(-1, 1), h)
    M = assemble_mass(m).toarray()
    assert np.allclose(np.diag(M), 2 * h / 3, rtol=1e-14)
    assert np.allclose(np.diag(M, 1), h / 6, rtol=1e-14)
    assert np.allclose(M, M.T, atol=0)
    assert M[5].sum() == pytest.approx(h, rel=1e-14)


def test_mass_square_quadratic_exactness():
    # v^T M v = int v_h^2 for a random P1 function, against an element rule
    m = build_graded(unit_square(), GradingSpec(h=0.25, mu=2.0))
    rng = np.random.default_rng(3)
    v = rng.standard_normal(m.n_dofs)
    q = element_quadrature(m, 6, graded=False)
    full = np.zeros(m.n_vertices)
    full[m.interior] = v
    vq = np.sum(full[m.elements[q.element]] * q.bary, axis=1)
    assert v @ assemble_mass(m) @ v == pytest.approx(np.sum(q.weights * vq**2), rel=1e-12)
    # partition of unity on dofs whose neighbours are all interior
    M = assemble_mass(m)
    row = np.asarray(M.sum(axis=1)).ravel()
    for i, vert in enumerate(m.interior):
        patch = m.vertex_elements[vert]
        if not np.any(m.boundary[m.elements[patch]]):
            assert row[i] == pytest.approx(m.volumes[patch].sum() / 3, rel=1e-13)


def test_load_constant_and_zero():
    h = 0.125
    m = build_quasi_uniform(Interval(-1, 1), h)
    assert np.allclose(assemble_load(m, _ones), h, rtol=1e-14)
    assert np.all(assemble_load(m, lambda x: np.zeros(len(x))) == 0)
    with pytest.raises(FloatingPointError):
        assemble_load(m, lambda x: np.full(len(x), np.nan))
    with pytest.raises(ValueError):
        assemble_load(m, _ones, order=2)


def test_load_boundary_singular_beta_integral():
    # sum_i F_i = int u* (sum of interior hats) = pi/2 minus the two boundary-hat parts
    N = 256
    h = 2.0 / N
    m = build_quasi_uniform(Interval(-1, 1), h)
    F = assemble_load(m, lambda x: np.sqrt(np.maximum(1 - x[:, 0] ** 2, 0)), boundary_singular=True)
    edge = integrate.quad(lambda t: math.sqrt(t * (2 - t)) * (1 - t / h), 0, h, epsabs=1e-15, epsrel=1e-13)[0]
    assert F.sum() == pytest.approx(math.pi / 2 - 2 * edge, abs=1e-10)
    assert abs(F.sum() - math.pi / 2) < 1e-3


def test_semilinear_linear_and_zero():
    m = build_quasi_uniform(Interval(-1, 1), 0.125)
    M = assemble_mass(m)
    u = np.random.default_rng(0).standard_normal(m.n_dofs)
    a_vec, J = assemble_semilinear(m, u, NonlinearityPreset("linear", 2.5))
    assert np.allclose(a_vec, 2.5 * (M @ u), rtol=1e-14)
    assert np.allclose(J.toarray(), 2.5 * M.toarray(), rtol=1e-14)
    a_vec, J = assemble_semilinear(m, np.zeros(m.n_dofs), NonlinearityPreset("cubic", 1.0))
    assert np.all(a_vec == 0)
    assert np.all(J.toarray() == 0)


def test_semilinear_cubic_constant_state():
    m = build_graded(unit_square(), GradingSpec(h=0.25, mu=2.0))
    u = np.full(m.n_dofs, 2.0)
    preset = NonlinearityPreset("cubic", 1.0)
    a6, J = assemble_semilinear(m, u, preset, order=6)
    a10, _ = assemble_semilinear(m, u, preset, order=10)
    assert np.max(np.abs(a6 - a10)) < 1e-10 * np.max(np.abs(a10))
    row = np.asarray(assemble_mass(m).sum(axis=1)).ravel()
    for i, vert in enumerate(m.interior):
        patch = m.vertex_elements[vert]
        if not np.any(m.boundary[m.elements[patch]]):
            assert a6[i] == pytest.approx(8 * row[i], rel=1e-12)
    Jd = J.toarray()
    assert np.allclose(Jd, Jd.T) and np.min(np.linalg.eigvalsh(Jd)) > -1e-14


def test_monotone_preset_validation():
    with pytest.raises(ValueError):
        NonlinearityPreset("cubic", -1.0)
    with pytest.raises(ValueError):
        NonlinearityPreset("exp", 1.0)
    u = np.linspace(-3, 3, 50)
    for tag in ("none", "linear", "cubic"):
        assert np.all(NonlinearityPreset(tag, 1.5).da(u) >= 0)


def test_control_to_load():
    m = build_graded(unit_square(), GradingSpec(h=0.5, mu=2.0))
    ones = control_to_load(m, np.ones(m.n_elements))
    assert np.allclose(ones, assemble_load(m, _ones), rtol=1e-14, atol=0)
    z = np.zeros(m.n_elements)
    t = next(t for t in range(m.n_elements) if np.all(~m.boundary[m.elements[t]]))
    z[t] = 3.0
    load = control_to_load(m, z)
    touched = np.nonzero(load)[0]
    assert set(m.interior[touched]) == set(m.elements[t])
    assert np.allclose(load[touched], 3.0 * m.volumes[t] / 3)
    zr = np.random.default_rng(2).uniform(-1, 1, m.n_elements)
    q = element_quadrature(m, 8, graded=False)
    oracle = np.zeros(m.n_dofs)
    edofs = m.element_dofs[q.element]
    contrib = (q.weights * zr[q.element])[:, None] * q.bary
    ok = edofs >= 0
    np.add.at(oracle, edofs[ok], contrib[ok])
    assert np.allclose(control_to_load(m, zr), oracle, rtol=1e-13, atol=1e-16)
    with pytest.raises(ValueError):
        control_to_load(m, np.ones(3))


def test_fe_system_energy(square_quarter):
    v = np.ones(square_quarter.n_dofs)
    assert square_quarter.energy(v) == pytest.approx(v @ square_quarter.A @ v)
    assert isinstance(square_quarter, FeSystem)


def test_prolongated_coarse_solution_energy_identity():
    # nested meshes, linear problem: ||u_f - P u_c||_A^2 = E_f - E_c
    coarse, fine = _nested_squares((0.5, 0.25))
    sc, sf = build_system(coarse, 0.5), build_system(fine, 0.5)
    uc = cho_solve(sc.cholesky, assemble_load(coarse, _ones))
    uf = cho_solve(sf.cholesky, assemble_load(fine, _ones))
    P = prolongation(coarse, fine)
    # the prolongated coarse stiffness equals the coarse stiffness up to quadrature
    Ac = P.T @ sf.A @ P
    assert np.max(np.abs(Ac - sc.A)) < 1e-5 * np.max(np.abs(sc.A))
    e = uf - P @ uc
    assert e @ sf.A @ e == pytest.approx(uf @ sf.A @ uf - uc @ sc.A @ uc, rel=1e-4)
