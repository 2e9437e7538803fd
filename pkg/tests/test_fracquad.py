import math

import mpmath
import numpy as np
import pytest
from scipy import integrate

from fracfem.assembly import default_orders
from fracfem.mesh import (DISJOINT, IDENTICAL, SHARED_FACET, SHARED_VERTEX, Interval,
                          build_quasi_uniform, unit_square)
from fracfem.fracquad import (FAR_SEPARATION, SINGULAR_ORDER, TOL_QUAD, barycentric,
                                complement_mass_entry, complement_weight, element_quadrature,
                                gauss_legendre, kernel_constant, singular_pair_rule)

S_GRID = [0.1, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.75, 0.9]


def _kernel_constant_oracle(n, s):
    mpmath.mp.dps = 30
    s = mpmath.mpf(s)
    val = 4**s * s * mpmath.gamma(s + mpmath.mpf(n) / 2) / (mpmath.pi ** (mpmath.mpf(n) / 2) * mpmath.gamma(1 - s))
    return float(val)


@pytest.mark.parametrize("n", [1, 2])
@pytest.mark.parametrize("s", S_GRID)
def test_kernel_constant_matches_gamma_oracle(n, s):
    assert kernel_constant(n, s).value == pytest.approx(_kernel_constant_oracle(n, s), rel=1e-12)


def test_kernel_constant_examples():
    assert kernel_constant(1, 0.5).value == pytest.approx(1 / math.pi, rel=1e-14)
    assert kernel_constant(2, 0.5).value == pytest.approx(1 / (2 * math.pi), rel=1e-14)


@pytest.mark.parametrize("n", [1, 2])
def test_kernel_constant_limits_and_continuity(n):
    assert 0 < kernel_constant(n, 1e-6).value < 1e-4
    assert 0 < kernel_constant(n, 1 - 1e-6).value < 1e-4
    mid = kernel_constant(n, 0.5).value
    assert abs(kernel_constant(n, 0.5 - 5e-7).value - mid) < 1e-6
    assert abs(kernel_constant(n, 0.5 + 5e-7).value - mid) < 1e-6


@pytest.mark.parametrize("s", [0.0, 1.0, -0.1])
def test_kernel_constant_rejects_bad_order(s):
    with pytest.raises(ValueError):
        kernel_constant(1, s)


# ---------------------------------------------------------------------------
# pair rules on physical elements


def _pair_matrix(rule, vt, vu):
    """Local matrix int int (phi_a(x)-phi_a(y)) (phi_b(x)-phi_b(y)) |x-y|^{-n-2s}."""
    n = rule.n
    xb, yb = barycentric(rule.x), barycentric(rule.y)
    X, Y = xb @ vt, yb @ vu
    r = np.linalg.norm(X - Y, axis=1)
    vol = lambda v: abs(np.linalg.det(np.stack([v[i] - v[0] for i in range(1, n + 1)], 1))) / math.factorial(n)  # noqa: E731
    fact = math.factorial(n) ** 2 * vol(vt) * vol(vu)
    d = rule.delta
    return fact * np.einsum("q,qa,qb->ab", rule.weights * r ** (-n - 2 * rule.s), d, d)


# canonical orderings: shared vertices first and in the same order
TRI = np.array([[0.0, 0.0], [1.0, 0.0], [0.2, 0.9]])
PAIRS_2D = {
    IDENTICAL: (TRI, TRI),
    SHARED_FACET: (TRI, np.array([[0.0, 0.0], [1.0, 0.0], [0.6, -0.8]])),
    SHARED_VERTEX: (TRI, np.array([[0.0, 0.0], [-0.9, -0.3], [-0.1, -1.0]])),
    DISJOINT: (TRI, TRI + np.array([2.2, 0.3])),
}


@pytest.mark.parametrize("kind", [IDENTICAL, SHARED_FACET, SHARED_VERTEX, DISJOINT])
@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_pair_rule_self_convergence_2d(kind, s):
    vt, vu = PAIRS_2D[kind]
    orders = default_orders(2)
    k = orders.singular if kind != DISJOINT else orders.tiers[0][1]
    a = _pair_matrix(singular_pair_rule(kind, 2, s, k), vt, vu)
    b = _pair_matrix(singular_pair_rule(kind, 2, s, 2 * k), vt, vu)
    assert np.max(np.abs(a - b)) <= 1e-6 * np.max(np.abs(b))


@pytest.mark.parametrize("kind", [IDENTICAL, SHARED_VERTEX, DISJOINT])
@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_pair_rule_self_convergence_1d(kind, s):
    vt = np.array([[0.0], [1.0]])
    vu = {IDENTICAL: vt, SHARED_VERTEX: np.array([[0.0], [-0.7]]), DISJOINT: np.array([[2.0], [3.1]])}[kind]
    orders = default_orders(1)
    k = orders.singular if kind != DISJOINT else orders.tiers[0][1]
    a = _pair_matrix(singular_pair_rule(kind, 1, s, k), vt, vu)
    b = _pair_matrix(singular_pair_rule(kind, 1, s, 2 * k), vt, vu)
    assert np.max(np.abs(a - b)) <= TOL_QUAD * np.max(np.abs(b))


@pytest.mark.parametrize("kind,n", [(IDENTICAL, 1), (SHARED_VERTEX, 1), (DISJOINT, 1),
                                    (IDENTICAL, 2), (SHARED_FACET, 2), (SHARED_VERTEX, 2), (DISJOINT, 2)])
def test_constant_difference_integrates_to_zero(kind, n):
    rule = singular_pair_rule(kind, n, 0.4, 6)
    assert np.all(np.isfinite(rule.weights))
    # phi = psi = 1 on both elements: the difference table rows sum to zero
    assert np.max(np.abs(rule.delta.sum(axis=1))) < 1e-14


def test_identical_interval_left_hat_exact_and_self_convergent():
    h, s = 0.3, 0.4
    vt = np.array([[0.0], [h]])
    vals = [_pair_matrix(singular_pair_rule(IDENTICAL, 1, s, k), vt, vt)[0, 0] for k in (8, 16)]
    assert abs(vals[0] - vals[1]) < 1e-8 * abs(vals[1])
    # phi(x) - phi(y) = (y - x)/h, so the integrand is |x-y|^{1-2s}/h^2
    exact = 2 * h ** (1 - 2 * s) / ((2 - 2 * s) * (3 - 2 * s))
    assert vals[1] == pytest.approx(exact, rel=1e-12)


def test_identical_triangle_matches_angular_oracle():
    # int_T int_T (g.(x-y))^2 |x-y|^{-2-2s} via polar coordinates about x:
    # |T| B(2-2s, 3) int (g.theta)^2 (sum_a |grad l_a . theta|/2)^{2s-2} dtheta
    s = 0.35
    v = TRI
    B = np.stack([v[1] - v[0], v[2] - v[0]], 1)
    grads = np.linalg.inv(B)  # rows: gradients of lambda_1, lambda_2
    grads = np.vstack([-grads.sum(axis=0), grads])
    area = abs(np.linalg.det(B)) / 2
    g = grads[1]

    def ang(theta):
        t = np.array([math.cos(theta), math.sin(theta)])
        return (g @ t) ** 2 * (0.5 * np.abs(grads @ t).sum()) ** (2 * s - 2)

    breaks = sorted({(math.atan2(-gr[0], gr[1]) + k * math.pi) % (2 * math.pi)
                     for gr in grads for k in (0, 1)})
    total = 0.0
    for a, b in zip([0.0] + breaks, breaks + [2 * math.pi]):
        total += integrate.quad(ang, a, b, epsabs=1e-15, epsrel=1e-13)[0]
    oracle = area * math.gamma(2 - 2 * s) * math.gamma(3) / math.gamma(5 - 2 * s) * total
    value = _pair_matrix(singular_pair_rule(IDENTICAL, 2, s, 16), v, v)[1, 1]
    assert value == pytest.approx(oracle, rel=1e-8)


def test_disjoint_far_pair_is_tensor_gauss():
    s = 0.3
    rule = singular_pair_rule(DISJOINT, 1, s, 8)
    x, w = gauss_legendre(8)
    assert np.all(rule.weights > 0)
    assert np.allclose(np.sort(rule.weights), np.sort(np.outer(w, w).ravel()))
    # separation 6 diameters: compare with adaptive quadrature
    vt, vu = np.array([[0.0], [1.0]]), np.array([[7.0], [8.0]])
    val = _pair_matrix(rule, vt, vu)[0, 2]
    f = lambda y, x: -(1 - x) * (8 - y) * abs(x - y) ** (-1 - 2 * s)  # noqa: E731
    oracle = integrate.dblquad(f, 0, 1, 7, 8, epsabs=1e-15, epsrel=1e-14)[0]
    assert val == pytest.approx(oracle, rel=1e-12)


def _dyadic_shared_vertex_oracle(s, depth=45):
    # elements [-1, 0] and [0, 1], phi = hat at 0: (phi(x)-phi(y))^2 = (x + y)^2
    x, w = gauss_legendre(30)
    f = lambda X, Y: (X + Y) ** 2 * np.abs(X - Y) ** (-1 - 2 * s)  # noqa: E731

    def block(ax, bx, ay, by):
        X = ax + (bx - ax) * x
        Y = ay + (by - ay) * x
        XX, YY = np.meshgrid(X, Y, indexing="ij")
        return (bx - ax) * (by - ay) * np.einsum("i,j,ij->", w, w, f(XX, YY))

    total, a = 0.0, 1.0
    for _ in range(depth):
        b = a / 2
        total += block(-a, -b, 0, b) + block(-b, 0, b, a) + block(-a, -b, b, a)
        a = b
    return total


def test_shared_vertex_interval_matches_dyadic_oracle():
    s = 0.5
    rule = singular_pair_rule(SHARED_VERTEX, 1, s, SINGULAR_ORDER)
    # canonical order: shared vertex first on both elements
    vt, vu = np.array([[0.0], [-1.0]]), np.array([[0.0], [1.0]])
    val = _pair_matrix(rule, vt, vu)[0, 0]
    assert val == pytest.approx(_dyadic_shared_vertex_oracle(s), rel=1e-7)


def test_unsupported_classification():
    with pytest.raises(ValueError):
        singular_pair_rule(SHARED_FACET, 1, 0.5, 4)
    with pytest.raises(ValueError):
        singular_pair_rule("overlap", 2, 0.5, 4)
    with pytest.raises(ValueError):
        singular_pair_rule(IDENTICAL, 2, 0.5, 0)


# ---------------------------------------------------------------------------
# complement weight


def test_complement_weight_interval_closed_form():
    dom = Interval(-1, 1)
    assert complement_weight(np.array([[0.0]]), dom, 0.5)[0] == pytest.approx(2.0, rel=1e-14)
    x = np.array([[-0.3], [0.3], [0.7]])
    s = 0.35
    expect = ((x[:, 0] + 1) ** (-2 * s) + (1 - x[:, 0]) ** (-2 * s)) / (2 * s)
    got = complement_weight(x, dom, s)
    assert np.allclose(got, expect, rtol=1e-14)
    assert got[0] == pytest.approx(got[1], rel=1e-14)


def _polar_square_oracle(x, s):
    # omega(x) = int_0^{2pi} R(theta)^{-2s} / (2s) dtheta, R = distance to the
    # boundary along theta; integrate sector by sector (one per side)
    corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    angles = [math.atan2(*(c - x)[::-1]) for c in corners]
    total = 0.0
    for i in range(4):
        a0, a1 = angles[i], angles[(i + 1) % 4]
        if a1 < a0:
            a1 += 2 * math.pi
        p0, p1 = corners[i], corners[(i + 1) % 4]
        t = (p1 - p0) / np.linalg.norm(p1 - p0)
        nrm = np.array([t[1], -t[0]])
        d = abs(np.dot(p0 - x, nrm))
        phi0 = math.atan2(*(-nrm)[::-1])

        def f(theta):
            return (d / abs(math.cos(theta - phi0))) ** (-2 * s) / (2 * s)

        total += integrate.quad(f, a0, a1, epsabs=1e-14, epsrel=1e-13)[0]
    return total


@pytest.mark.parametrize("pt", [(0.5, 0.5), (0.2, 0.7), (0.05, 0.5)])
def test_complement_weight_square_polar_oracle(pt):
    x = np.array(pt)
    val = complement_weight(x[None, :], unit_square(), 0.5)[0]
    assert val == pytest.approx(_polar_square_oracle(x, 0.5), rel=1e-6)


def test_complement_weight_monotone_blowup():
    xs = np.stack([np.full(6, 0.5), np.array([0.5, 0.3, 0.1, 0.03, 0.01, 0.001])], 1)
    w = complement_weight(xs, unit_square(), 0.3)
    assert np.all(w > 0) and np.all(np.diff(w) > 0)
    with pytest.raises(ValueError):
        complement_weight(np.array([[0.5, 0.0]]), unit_square(), 0.3)
    with pytest.raises(ValueError):
        complement_weight(np.array([[1.0]]), Interval(-1, 1), 0.3)


def test_complement_mass_interior_self_convergence():
    m = build_quasi_uniform(unit_square(), 0.125)
    centre = int(np.argmin(np.linalg.norm(m.vertices - 0.5, axis=1)))
    nb = [v for t in m.vertex_elements[centre] for v in m.elements[t] if v != centre][0]
    for j in (centre, nb):
        a = complement_mass_entry(m, centre, j, 0.5, k=6)
        b = complement_mass_entry(m, centre, j, 0.5, k=12)
        assert a == pytest.approx(b, rel=1e-9)


def test_complement_mass_disjoint_supports():
    m = build_quasi_uniform(Interval(-1, 1), 0.25)
    assert complement_mass_entry(m, 1, 5, 0.5) == 0.0


def test_complement_mass_boundary_hat_dyadic_oracle():
    s, h = 0.25, 0.25
    m = build_quasi_uniform(Interval(-1, 1), h)
    i = 1  # vertex at -1 + h
    val = complement_mass_entry(m, i, i, s)
    # work in t = x + 1 so the subdivision toward the boundary does not round away
    omega = lambda t: (t ** (-2 * s) + (2 - t) ** (-2 * s)) / (2 * s)  # noqa: E731
    phi = lambda t: np.where(t < h, t / h, (2 * h - t) / h)  # noqa: E731
    x, w = gauss_legendre(20)
    oracle = 0.0
    b = h
    for _ in range(60):
        X = 0.5 * b + 0.5 * b * x
        oracle += 0.5 * b * np.sum(w * phi(X) ** 2 * omega(X))
        b *= 0.5
    X = h + h * x
    oracle += h * np.sum(w * phi(X) ** 2 * omega(X))
    assert val == pytest.approx(oracle, rel=1e-6)


def test_element_quadrature_integrates_boundary_power():
    # int_{-1}^{1} (1 - x^2)^s dx = sqrt(pi) Gamma(s+1) / Gamma(s+3/2)
    s = 0.3
    m = build_quasi_uniform(Interval(-1, 1), 0.125)
    q = element_quadrature(m, 8)
    val = np.sum(q.weights * (1 - q.points[:, 0] ** 2) ** s)
    exact = math.sqrt(math.pi) * math.gamma(s + 1) / math.gamma(s + 1.5)
    assert val == pytest.approx(exact, rel=1e-10)


def test_far_separation_constant():
    assert FAR_SEPARATION == 3.0
