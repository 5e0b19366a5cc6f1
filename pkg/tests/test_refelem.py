import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import legendre as npleg

from fdmstar.refelem import (
    FdmBasis,
    fdm_basis,
    gauss_legendre_rule,
    gll_nodes,
    interpolate_to_gl,
    legendre,
    mass_pattern,
    reference_operators,
    stiffness_pattern,
)


def test_gll_low_degrees():
    np.testing.assert_array_equal(gll_nodes(1), [-1.0, 1.0])
    np.testing.assert_allclose(gll_nodes(2), [-1.0, 0.0, 1.0], atol=1e-15)
    r = np.sqrt(3 / 7)
    np.testing.assert_allclose(gll_nodes(4), [-1, -r, 0, r, 1], atol=1e-15)


@pytest.mark.parametrize("p", [3, 6, 11, 24])
def test_gll_interior_nodes_are_roots_of_legendre_derivative(p):
    # independent oracle: numpy's Legendre series root finder
    dP = npleg.legder([0] * p + [1])
    roots = np.sort(npleg.legroots(dP).real)
    np.testing.assert_allclose(gll_nodes(p)[1:-1], roots, atol=1e-12)


@given(st.integers(1, 40))
def test_gll_symmetric_and_sorted(p):
    x = gll_nodes(p)
    assert x[0] == -1.0 and x[-1] == 1.0
    assert np.all(np.diff(x) > 0)
    np.testing.assert_array_equal(x, -x[::-1])


def test_gll_rejects_degree_zero():
    with pytest.raises(ValueError):
        gll_nodes(0)


@given(st.integers(1, 20))
def test_gauss_rule_exact_for_degree_2n_minus_1(n):
    rule = gauss_legendre_rule(n)
    assert abs(rule.weights.sum() - 2.0) < 1e-13
    k = 2 * n - 2  # even monomial of highest exactly integrated even degree
    np.testing.assert_allclose(rule.weights @ rule.points**k, 2.0 / (k + 1), rtol=1e-12)
    np.testing.assert_allclose(rule.weights @ rule.points ** (2 * n - 1), 0.0, atol=1e-13)


def test_quadrature_arrays_are_read_only():
    rule = gauss_legendre_rule(4)
    with pytest.raises(ValueError):
        rule.points[0] = 0.0


def test_legendre_values_match_numpy():
    x = np.linspace(-1, 1, 17)
    P, dP = legendre(6, x)
    for n in range(7):
        c = [0] * n + [1]
        np.testing.assert_allclose(P[:, n], npleg.legval(x, c), atol=1e-14)
        np.testing.assert_allclose(dP[:, n], npleg.legval(x, npleg.legder(c)), atol=1e-12)


def test_linear_element_matrices():
    ref = reference_operators(1)
    np.testing.assert_allclose(ref.A_hat, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(ref.B_hat, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-15)


@pytest.mark.parametrize("kind", ["gll", "lobatto", "gl"])
@pytest.mark.parametrize("p", [2, 5, 9])
def test_reference_operator_properties(p, kind):
    ref = reference_operators(p, kind)
    if kind != "lobatto":  # nodal bases: constants are the all-ones vector
        np.testing.assert_allclose(ref.A_hat @ np.ones(p + 1), 0.0, atol=1e-11)
    assert np.all(np.linalg.eigvalsh(ref.B_hat) > 0)
    np.testing.assert_array_equal(ref.A_hat, ref.A_hat.T)
    # mass integrates the constant
    ones = np.linalg.lstsq(ref.tabulate(gauss_legendre_rule(p + 1).points),
                           np.ones(p + 1), rcond=None)[0]
    np.testing.assert_allclose(ones @ ref.B_hat @ ones, 2.0, rtol=1e-12)


def test_nodal_tabulation_is_identity():
    ref = reference_operators(7)
    np.testing.assert_array_equal(ref.tabulate(ref.nodes), np.eye(8))
    gl = reference_operators(4, "gl")
    np.testing.assert_array_equal(gl.tabulate(gl.nodes), np.eye(5))


def test_gl_mass_is_diagonal():
    B = reference_operators(6, "gl").B_hat
    np.testing.assert_allclose(B, np.diag(np.diag(B)), atol=1e-14)
    np.testing.assert_allclose(np.diag(B), gauss_legendre_rule(7).weights, rtol=1e-13)


def test_lobatto_bubbles_have_diagonal_stiffness():
    p = 8
    A = reference_operators(p, "lobatto").A_hat
    j = np.arange(1, p)
    np.testing.assert_allclose(A[1:-1, 1:-1], np.diag(2.0 / (2 * j + 1)), atol=1e-13)


def test_traces_of_interface_basis():
    ref = reference_operators(5)
    np.testing.assert_array_equal(ref.trace_values[0], np.eye(6)[0])
    np.testing.assert_array_equal(ref.trace_values[1], np.eye(6)[5])
    # outward normal derivative: +d/dx at x = 1, -d/dx at x = -1
    np.testing.assert_allclose(ref.trace_derivatives[1], ref.tabulate([1.0], derivative=True)[0], atol=1e-12)
    np.testing.assert_allclose(ref.trace_derivatives[0], -ref.tabulate([-1.0], derivative=True)[0], atol=1e-12)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        reference_operators(3, "hermite")


@pytest.mark.parametrize("p", [2, 3, 8, 16, 32])
def test_fdm_identities(p):
    f = fdm_basis(p)
    ref = reference_operators(p)
    I = f.interior
    SII = f.S_II
    np.testing.assert_allclose(SII.T @ ref.B_hat[np.ix_(I, I)] @ SII, np.eye(p - 1), atol=1e-10)
    np.testing.assert_allclose(SII.T @ ref.A_hat[np.ix_(I, I)] @ SII, np.diag(f.eigenvalues), atol=1e-9)
    assert np.all(f.eigenvalues > 0) and np.all(np.diff(f.eigenvalues) > 0)
    # interface block of S is the identity
    np.testing.assert_array_equal(f.S_hat[np.ix_(f.interface, f.interface)], np.eye(2))


@given(st.integers(2, 20))
@settings(max_examples=15, deadline=None)
def test_fdm_transformed_mass_interior_interface_block_is_zero(p):
    f = fdm_basis(p)
    Bt = f.S_hat.T @ reference_operators(p).B_hat @ f.S_hat
    I, G = f.interior, f.interface
    assert np.max(np.abs(Bt[np.ix_(I, G)])) < 1e-12
    assert np.all(f.B_tilde[np.ix_(I, G)] == 0.0)
    # stored matrices agree with the dense product on their patterns
    np.testing.assert_allclose(f.B_tilde, np.where(f.B_pattern, Bt, 0.0), atol=1e-12)


def test_first_eigenvalue_tends_to_continuum_limit():
    lam = fdm_basis(16).eigenvalues[0]
    assert abs(lam - np.pi**2 / 4) < 1e-6


def test_patterns():
    m = mass_pattern(4)
    s = stiffness_pattern(4)
    assert m.sum() == 3 + 4
    assert np.all(s[:, 0]) and np.all(s[4, :])
    assert not s[1, 2]


def test_fdm_sign_and_parity():
    p = 9
    f = fdm_basis(p)
    for k in f.interior:
        inner = f.S_hat[1:-1, k]
        i = np.flatnonzero(np.abs(inner) >= np.abs(inner).max() * (1 - 1e-8))[0]
        assert inner[i] > 0
        col = f.S_hat[:, k]
        np.testing.assert_allclose(col[::-1], f.parity[k] * col, atol=1e-10)


def test_fdm_accepts_reference_interval():
    ref = reference_operators(5)
    assert fdm_basis(ref) is fdm_basis(5)
    with pytest.raises(ValueError):
        fdm_basis(reference_operators(5, "gl"))
    assert isinstance(fdm_basis(5), FdmBasis)


def test_interpolation_to_gl_points():
    p = 6
    f = fdm_basis(p)
    M = interpolate_to_gl(f)
    x = gauss_legendre_rule(p + 1).points
    np.testing.assert_allclose(M, reference_operators(p).tabulate(x) @ f.S_hat, atol=1e-14)
    with pytest.raises(ValueError):
        interpolate_to_gl(f, p + 1)
