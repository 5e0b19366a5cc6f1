import numpy as np
import pytest
import scipy.sparse.linalg as spla
import sympy
from numpy.polynomial import legendre as leg
from hypothesis import given, settings, strategies as st

from fdmstar.assembly import (
    assemble_global,
    cell_matrix_cartesian,
    cell_matrix_quadrature,
    divergence_values,
    dq_space,
    elasticity_operator,
    elasticity_primal_cell,
    eliminate_dirichlet,
    evaluate,
    expand_free,
    load_vector,
    mixed_blocks,
    penalty_parameter,
    piola_map,
    poisson_operator,
    poisson_surrogate,
    prolongation,
    rt_space,
    scalar_space,
    sipg_facet_dirichlet,
    sipg_facet_interior,
    stencil_counts,
    transformed_assembly,
    vector_space,
)
from fdmstar.meshgeo import (Mesh, _shape_functions, _tensor_rule, cartesian_mesh, cell_geometry,
                             parallelogram_mesh, ring_mesh)
from fdmstar.refelem import reference_operators
from fdmstar.sparsela import NotSPDError, cholesky


def interior_mode_rows(space):
    """Free-DOF indices of DOFs that are interior FDM modes along every axis."""
    shape = space.shapes[0]
    multi = np.unravel_index(np.arange(int(np.prod(shape))), shape)
    mask = np.all([(m > 0) & (m < n - 1) for m, n in zip(multi, shape)], axis=0)
    dofs = np.unique(space.cell_fdm_dofs[:, :len(mask)][:, mask])
    return space.reduced_index[dofs[space.free[dofs]]]


def test_cartesian_cell_matrix_matches_quadrature():
    m = cartesian_mesh(2, (1, 1), lengths=(2.0, 0.5))
    ref = reference_operators(4)
    g = cell_geometry(m, 0, npts=6)
    K = cell_matrix_cartesian(ref, g.mu)
    np.testing.assert_allclose(K.to_dense(), cell_matrix_quadrature(g, ref), atol=1e-12)


def test_cartesian_cell_matrix_3d_axis_order():
    ref = reference_operators(2)
    K = cell_matrix_cartesian(2, [1.0, 0.0, 0.0])  # only the x stiffness term
    expect = np.kron(np.kron(ref.B_hat, ref.B_hat), ref.A_hat)  # x is the fastest index
    np.testing.assert_allclose(K.to_dense(), expect, atol=1e-15)


def test_single_cell_value_against_symbolic_oracle():
    # unit square, one Q2 cell with Dirichlet data: only the bubble is free
    x = sympy.symbols("x")
    phi = 1 - x**2  # reference bubble, nodes -1, 0, 1
    a = sympy.integrate(sympy.diff(phi, x) ** 2, (x, -1, 1))
    b = sympy.integrate(phi**2, (x, -1, 1))
    expect = float(2 * a * b)  # half lengths 1/2 give unit surrogate coefficients
    V = scalar_space(cartesian_mesh(2, (1, 1)), 2)
    A = poisson_operator(V).free_matrix()
    assert A.shape == (1, 1)
    assert A[0, 0] == pytest.approx(expect, rel=1e-14)


@pytest.mark.parametrize("dim,p", [(2, 3), (2, 6), (3, 3)])
def test_constants_in_kernel_of_neumann_operator(dim, p):
    V = scalar_space(cartesian_mesh(dim, (2,) * dim, lengths=(1.0, 0.7, 1.3)[:dim]), p, dirichlet=False)
    A = poisson_operator(V).matrix()
    np.testing.assert_allclose(A @ np.ones(V.ndofs), 0.0, atol=1e-11)
    np.testing.assert_allclose((A - A.T).toarray(), 0.0, atol=1e-13)


@pytest.mark.parametrize("mesh", [parallelogram_mesh(2, np.pi / 3), ring_mesh(),
                                  Mesh(2, [[0, 0], [1, 0], [0, 1], [1.3, 1.1]], [[0, 1, 2, 3]])])
def test_operator_matches_elementwise_quadrature(mesh):
    p = 3
    V = scalar_space(mesh, p)
    ref = reference_operators(p)
    mats = [cell_matrix_quadrature(cell_geometry(mesh, K, npts=p + 2), ref) for K in range(mesh.num_cells)]
    A = assemble_global(V, mats, reduce=True)
    B = poisson_operator(V).free_matrix()
    np.testing.assert_allclose(A.toarray(), B.toarray(), atol=1e-11)


def test_elasticity_matches_elementwise_quadrature():
    p = 3
    for mesh in (cartesian_mesh(2, (2, 1), lengths=(1.0, 0.6)), parallelogram_mesh(2, 2 * np.pi / 5)):
        V = vector_space(mesh, p, dirichlet=False)
        ref = reference_operators(p)
        mats = [elasticity_primal_cell(cell_geometry(mesh, K, npts=p + 2), ref, 0.7, 2.5)
                for K in range(mesh.num_cells)]
        A = assemble_global(V, mats)
        B = elasticity_operator(V, 0.7, 2.5).matrix()
        np.testing.assert_allclose(A.toarray(), B.toarray(), atol=1e-11)


def test_elastic_energy_of_pure_strain():
    # u = (x, -y): eps = diag(1, -1), a(u, u) = 2 mu |eps|^2 |Omega| = 2 |Omega| for mu = 1/2
    mesh = cartesian_mesh(2, (3, 2), lengths=(2.0, 1.5))
    V = vector_space(mesh, 3, dirichlet=False)
    X = V.tabulate_nodes()
    u = np.where(V.dof_component == 0, X[:, 0], -X[:, 1])
    A = elasticity_operator(V, mu=0.5, lam=0.0).matrix()
    assert u @ A @ u == pytest.approx(2 * 3.0, rel=1e-12)
    # divergence free, so lambda adds nothing
    A2 = elasticity_operator(V, mu=0.5, lam=40.0).matrix()
    assert u @ A2 @ u == pytest.approx(6.0, rel=1e-12)


def test_rigid_motions_have_zero_energy():
    V = vector_space(parallelogram_mesh(2, np.pi / 4), 4, dirichlet=False)
    X = V.tabulate_nodes()
    rot = np.where(V.dof_component == 0, -X[:, 1], X[:, 0])
    A = elasticity_operator(V, 1.0, 3.0).matrix()
    np.testing.assert_allclose(A @ rot, 0.0, atol=1e-11)


@pytest.mark.parametrize("dim,p", [(2, 3), (2, 5), (3, 3)])
def test_fdm_transform_of_cartesian_operator(dim, p):
    V = scalar_space(cartesian_mesh(dim, (2,) * dim, lengths=(1.0, 1.4, 0.8)[:dim]), p)
    A = poisson_operator(V).free_matrix().toarray()
    At, S = transformed_assembly(poisson_surrogate(V))
    Sm = S.matrix()
    np.testing.assert_allclose(Sm.T @ A @ Sm, At.toarray(), atol=1e-10)
    # apply_T is the exact transpose of apply
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(V.nfree), rng.standard_normal(V.nfree)
    assert S.apply(x) @ y == pytest.approx(x @ S.apply_T(y), rel=1e-12)


@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("p", [3, 4])
def test_cg_stencils(dim, p):
    mesh = cartesian_mesh(dim, (3,) * dim)
    V = scalar_space(mesh, p, dirichlet=False)
    At = poisson_surrogate(V).free_matrix(transformed=True)
    rows = np.flatnonzero(V.dof_class[V.free_dofs] == 0)
    assert set(stencil_counts(At, rows)) == {2 * dim + 1}
    # patch around a vertex in the middle of the mesh
    v = int(np.argmin(np.linalg.norm(mesh.vertices - 1 / 3, axis=1)))
    dofs, classes, _ = V.patch_dofs(v)
    idx = V.reduced_index[dofs]
    assert set(stencil_counts(At[idx][:, idx])[classes == 0]) == {dim + 1}


@pytest.mark.parametrize("dim", [2, 3])
def test_dg_stencils(dim):
    p = 3
    V = scalar_space(cartesian_mesh(dim, (2,) * dim), p, disc="dg")
    At = poisson_surrogate(V).free_matrix(transformed=True)
    assert set(stencil_counts(At, interior_mode_rows(V))) == {3 * dim + 1}
    # on a bigger mesh cells away from the boundary see 2d neighbours
    big = scalar_space(cartesian_mesh(dim, (3,) * dim), p, disc="dg")
    counts = stencil_counts(poisson_surrogate(big).free_matrix(transformed=True), interior_mode_rows(big))
    assert counts.min() == 3 * dim + 1 and counts.max() == 4 * dim + 1


def test_dg_consistency_with_cg():
    mesh = cartesian_mesh(2, (2, 3), lengths=(1.0, 1.5))
    p = 4
    cg = scalar_space(mesh, p)
    dg = scalar_space(mesh, p, disc="dg")
    P = prolongation(cg, dg)[:, cg.free_dofs]
    Adg = poisson_operator(dg).matrix()
    Acg = poisson_operator(cg).free_matrix()
    np.testing.assert_allclose((P.T @ Adg @ P).toarray(), Acg.toarray(), atol=1e-10)


def test_prolongation_reproduces_polynomials():
    mesh = parallelogram_mesh(2, np.pi / 3)
    c, f = scalar_space(mesh, 1, dirichlet=False), scalar_space(mesh, 5, dirichlet=False)
    lin = lambda X: 1.0 + 2.0 * X[:, 0] - 0.5 * X[:, 1]
    np.testing.assert_allclose(prolongation(c, f) @ lin(c.tabulate_nodes()), lin(f.tabulate_nodes()), atol=1e-13)


def test_galerkin_projection_matches_triple_product():
    mesh = cartesian_mesh(2, (2, 2))
    V, C = scalar_space(mesh, 4), scalar_space(mesh, 1)
    A = poisson_operator(V)
    P = prolongation(C, V)
    np.testing.assert_allclose(A.galerkin(C, C).matrix().toarray(), (P.T @ A.matrix() @ P).toarray(), atol=1e-12)


@pytest.mark.parametrize("disc", ["cg", "dg"])
def test_poisson_solution_converges_spectrally(disc):
    u = lambda X: np.sin(np.pi * X[:, 0]) * np.sin(np.pi * X[:, 1])
    f = lambda X: 2 * np.pi**2 * u(X)
    mesh = cartesian_mesh(2, (2, 2))
    errs = []
    for p in (2, 4, 8):
        V = scalar_space(mesh, p, disc=disc)
        A, b = eliminate_dirichlet(V, poisson_operator(V).matrix(), load_vector(V, f))
        x = expand_free(V, spla.spsolve(A.tocsc(), b))
        vals = evaluate(V, x, p + 2)[0]
        pts = cell_points(mesh, p + 2)
        errs.append(np.abs(vals - u(pts.reshape(-1, 2)).reshape(vals.shape)).max())
    assert errs[1] < 0.05 * errs[0] and errs[2] < 1e-3 * errs[1]


def cell_points(mesh, npts):
    pts, _ = _tensor_rule(mesh.dim, npts)
    N, _ = _shape_functions(mesh.dim, pts)
    return np.einsum("qc,kci->kqi", N, mesh.vertices[mesh.cells])


def test_load_vector_integrates_constants():
    mesh = ring_mesh()
    V = scalar_space(mesh, 3)
    area = 2.5 * np.sin(2 * np.pi / 5)
    assert load_vector(V, 1.0).sum() == pytest.approx(area, rel=1e-12)
    W = vector_space(mesh, 2)
    b = load_vector(W, [0.0, -0.02])
    assert b[W.dof_component == 0].sum() == 0.0
    assert b[W.dof_component == 1].sum() == pytest.approx(-0.02 * area, rel=1e-12)


@pytest.mark.parametrize("p", [2, 3, 5])
def test_rt_divergence_lies_in_pressure_space(p):
    mesh = cartesian_mesh(2, (2, 2), lengths=(1.0, 0.8))
    V = rt_space(mesh, p)
    x = expand_free(V, np.random.default_rng(p).standard_normal(V.nfree))
    npts = p + 2
    div = divergence_values(V, x, npts)
    # fit a degree p-1 tensor polynomial on every cell: the residual is roundoff
    g = leg.leggauss(npts)[0]
    Y, X = np.meshgrid(g, g, indexing="ij")
    vander = leg.legvander2d(X.ravel(), Y.ravel(), [p - 1, p - 1])
    coef, *_ = np.linalg.lstsq(vander, div.T, rcond=None)
    np.testing.assert_allclose(vander @ coef, div.T, atol=1e-10 * np.abs(div).max())
    # and the discrete divergence of the pair is onto
    A, B, C, M = mixed_blocks(V, dq_space(mesh, p - 1), lam=np.inf)
    # clamped normal traces: div u has zero mean, so only the constants are missed
    assert np.linalg.matrix_rank(B.toarray()) == B.shape[0] - 1


def test_mixed_blocks_structure_and_validation():
    mesh = cartesian_mesh(2, (2, 2))
    U, Q = vector_space(mesh, 4), dq_space(mesh, 2)
    A, B, C, M = mixed_blocks(U, Q, mu=1.0, lam=np.inf)
    assert C is None and B.shape == (Q.nfree, U.nfree)
    _, _, C, M = mixed_blocks(U, Q, lam=10.0)
    np.testing.assert_allclose(C.toarray(), M.toarray() / 10.0)
    with pytest.raises(ValueError):
        mixed_blocks(U, dq_space(mesh, 3))
    with pytest.raises(ValueError):
        mixed_blocks(U, Q, lam=0.0)
    with pytest.raises(ValueError):
        mixed_blocks(rt_space(cartesian_mesh(3, (1, 1, 1)), 3), dq_space(cartesian_mesh(3, (1, 1, 1)), 2))


@given(st.floats(0.3, 3.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(0.3, 3.0),
       st.floats(-5, 5), st.floats(-5, 5))
@settings(max_examples=50, deadline=None)
def test_piola_preserves_normal_flux(a, b, c, dd, u0, u1):
    DF = np.array([[a, b], [c, dd]])
    det = np.linalg.det(DF)
    if det < 0.05:
        return
    uhat = np.array([u0, u1])
    u = piola_map(DF, uhat)
    for k in range(2):
        # physical normal times facet measure is det * DF^{-T} e_k
        n_ds = det * np.linalg.inv(DF).T[:, k]
        assert u @ n_ds == pytest.approx(uhat[k], abs=1e-10 * (1 + np.abs(uhat).max()))


def test_penalty_parameter():
    assert penalty_parameter(3, 2) == 20
    assert penalty_parameter(7, 3) == 80


def test_sipg_facet_matrices():
    ref = reference_operators(4, "gl")
    E = sipg_facet_dirichlet(ref, 1.5, 30.0, 1)
    np.testing.assert_allclose(E, E.T)
    F = sipg_facet_interior(ref, 1.0, 2.0, 30.0, (1, 0))
    np.testing.assert_allclose(F[0, 1], F[1, 0].T, atol=1e-13)
    # continuous constants do not see interior facets
    one = np.ones(ref.n)
    for r in range(2):
        np.testing.assert_allclose(F[r, 0] @ one + F[r, 1] @ one, 0.0, atol=1e-11)
    with pytest.raises(ValueError):
        sipg_facet_dirichlet(ref, 1.0, 0.0, 0)
    with pytest.raises(ValueError):
        sipg_facet_interior(ref, 1.0, 1.0, 5.0, (0, 0))


def test_dg_without_penalty_is_not_positive_definite():
    V = scalar_space(cartesian_mesh(2, (2, 2)), 3, disc="dg")
    with pytest.raises(NotSPDError):
        cholesky(poisson_operator(V, eta=0.0).free_matrix())
    cholesky(poisson_operator(V).free_matrix())


def test_assemble_global_rejects_wrong_shape():
    V = scalar_space(cartesian_mesh(2, (1, 1)), 2)
    with pytest.raises(ValueError):
        assemble_global(V, np.zeros((1, 4, 4)))
