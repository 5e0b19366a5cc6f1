import numpy as np
import pytest
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fdmstar.sparsela import (
    KronOperator,
    NotSPDError,
    block_diag_factor,
    cholesky,
    dense_sym_gen_eig,
    jacobi_eigh,
    kron_apply,
    nested_dissection_grid,
    patch_ordering,
    rcm_ordering,
    row_counts,
    spmv,
    symbolic_cholesky,
    write_matrix_market,
)


def laplace_2d(n):
    T = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(n, n))
    I = sp.identity(n)
    return (sp.kron(T, I) + sp.kron(I, T)).tocsr()


def random_spd(n, rng, density=0.3):
    A = sp.random(n, n, density=density, random_state=rng)
    A = A + A.T
    return (A + sp.identity(n) * (abs(A).sum(axis=1).max() + 1.0)).tocsr()


@given(st.integers(1, 17), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_jacobi_matches_lapack(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, n))
    A = X + X.T
    lam, V = jacobi_eigh(A)
    np.testing.assert_allclose(lam, np.linalg.eigvalsh(A), atol=1e-10 * max(1, abs(lam).max()))
    np.testing.assert_allclose(V.T @ V, np.eye(n), atol=1e-12)
    np.testing.assert_allclose(A @ V, V * lam, atol=1e-10 * max(1, abs(lam).max()))


def test_jacobi_rejects_nonsymmetric():
    with pytest.raises(ValueError):
        jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_jacobi_example():
    lam, _ = jacobi_eigh([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(lam, [1.0, 3.0], atol=1e-15)


def test_generalized_eigenproblem():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((9, 9))
    A = X + X.T
    B = X @ X.T + 9 * np.eye(9)
    lam, V = dense_sym_gen_eig(A, B)
    np.testing.assert_allclose(lam, scipy.linalg.eigh(A, B, eigvals_only=True), atol=1e-10)
    np.testing.assert_allclose(V.T @ B @ V, np.eye(9), atol=1e-10)
    np.testing.assert_allclose(A @ V, B @ V * lam, atol=1e-10)
    with pytest.raises(NotSPDError):
        dense_sym_gen_eig(A, -B)


@given(st.lists(st.integers(1, 5), min_size=1, max_size=3), st.integers(0, 1000), st.integers(1, 3))
@settings(max_examples=30, deadline=None)
def test_kron_apply_matches_explicit_product(sizes, seed, nterms):
    rng = np.random.default_rng(seed)
    terms = [[rng.standard_normal((m, m)) for m in sizes] for _ in range(nterms)]
    x = rng.standard_normal(int(np.prod(sizes)))
    K = KronOperator(terms, coefs=rng.standard_normal(nterms))
    dense = K.to_dense()
    np.testing.assert_allclose(kron_apply(K, x), dense @ x, atol=1e-12)
    M = np.ones((1, 1))
    for F in terms[0]:
        M = np.kron(M, F)
    np.testing.assert_allclose(kron_apply(terms[0], x), M @ x, atol=1e-12)


def test_kron_rectangular_and_errors():
    A, B = np.arange(6.0).reshape(2, 3), np.arange(8.0).reshape(4, 2)
    x = np.arange(6.0)
    np.testing.assert_allclose(kron_apply([A, B], x), np.kron(A, B) @ x)
    with pytest.raises(ValueError):
        kron_apply([A, B], np.ones(5))
    with pytest.raises(ValueError):
        KronOperator([[A, B], [B, A]])
    with pytest.raises(ValueError):
        KronOperator([])


def test_spmv_and_row_counts():
    A = laplace_2d(4)
    x = np.arange(16.0)
    np.testing.assert_allclose(spmv(A, x), A.toarray() @ x)
    with pytest.raises(ValueError):
        spmv(A, np.ones(3))
    counts = row_counts(A)
    assert counts.max() == 5 and counts.min() == 3


@pytest.mark.parametrize("n", [5, 12])
def test_cholesky_solves_like_superlu(n):
    A = laplace_2d(n)
    b = np.linspace(0, 1, n * n)
    for perm in (None, rcm_ordering(A).perm, nested_dissection_grid((n, n)).perm):
        F = cholesky(A, perm)
        np.testing.assert_allclose(F.solve(b), spla.spsolve(A.tocsc(), b), rtol=1e-10, atol=1e-12)
        Pm = F.perm
        Ap = A[Pm][:, Pm].toarray()
        np.testing.assert_allclose((F.L @ F.L.T).toarray(), Ap, atol=1e-12)


@given(st.integers(2, 25), st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_cholesky_random_spd(n, seed):
    rng = np.random.default_rng(seed)
    A = random_spd(n, rng)
    perm = rng.permutation(n)
    F = cholesky(A, perm)
    B = rng.standard_normal((n, 2))
    np.testing.assert_allclose(A @ F.solve(B), B, atol=1e-9)
    # column counts from the symbolic pass match the numeric factor
    parent, counts = symbolic_cholesky(A, perm)
    assert counts.sum() == F.nnz
    np.testing.assert_array_equal(np.diff(F.L.indptr), counts)
    np.testing.assert_array_equal(parent, F.parent)


def test_cholesky_reports_failing_pivot():
    A = sp.csr_matrix(np.diag([1.0, 2.0, -1.0, 4.0]))
    with pytest.raises(NotSPDError) as info:
        cholesky(A)
    assert info.value.index == 2
    with pytest.raises(NotSPDError) as info:
        cholesky(A, [2, 0, 1, 3])
    assert info.value.index == 2
    with pytest.raises(ValueError):
        cholesky(A, [0, 0, 1, 2])


def test_colcounts_arrow_matrix():
    # arrowhead with a dense first row and column: eliminating the hub first fills everything
    n = 6
    A = np.eye(n) * n
    A[0, :] = A[:, 0] = 1.0
    A[0, 0] = n
    A = sp.csr_matrix(A)
    assert cholesky(A).nnz == n * (n + 1) // 2
    assert cholesky(A, np.r_[1:n, 0]).nnz == 2 * n - 1


def test_block_diag_factor():
    rng = np.random.default_rng(5)
    mats = [random_spd(k, rng) for k in (3, 7, 4)]
    F = block_diag_factor([cholesky(M, rng.permutation(M.shape[0])) for M in mats])
    b = rng.standard_normal(14)
    np.testing.assert_allclose(sp.block_diag(mats) @ F.solve(b), b, atol=1e-10)


@pytest.mark.parametrize("dims", [(7,), (5, 6), (4, 3, 5), (9, 9)])
def test_nested_dissection_is_permutation(dims):
    o = nested_dissection_grid(dims)
    np.testing.assert_array_equal(np.sort(o.perm), np.arange(np.prod(dims)))
    inv = o.inverse()
    np.testing.assert_array_equal(inv[o.perm], np.arange(len(o.perm)))


def test_nested_dissection_reduces_fill():
    n = 31
    A = laplace_2d(n)
    natural = cholesky(A).nnz
    nd = cholesky(A, nested_dissection_grid((n, n)).perm).nnz
    assert nd < 0.6 * natural
    # the last separator is the middle line
    perm = nested_dissection_grid((n, n)).perm
    assert set(perm[-n:]) == {15 * n + j for j in range(n)} or set(perm[-n:]) == {i * n + 15 for i in range(n)}


def test_patch_ordering_groups():
    classes = np.array([2, 0, 1, 0, 1, 0])
    keys = np.array([0, 1, 0, 0, 1, 1])
    o = patch_ordering(classes, keys, dim=2)
    np.testing.assert_array_equal(o.perm, [3, 1, 5, 2, 4, 0])
    assert [g[0] for g in o.groups] == ["interior", "facet", "vertex"]
    assert o.groups[-1][1:] == (5, 6)


def test_matrix_market_round_trip(tmp_path):
    A = laplace_2d(3) * 1.25
    path = tmp_path / "a.mtx"
    write_matrix_market(A, path)
    B = scipy.io.mmread(str(path))
    np.testing.assert_array_equal(B.toarray(), A.toarray())
    assert path.read_text().startswith("%%MatrixMarket matrix coordinate real symmetric")


@given(arrays(float, 4, elements=st.floats(-1e3, 1e3)))
@settings(max_examples=30, deadline=None)
def test_cholesky_solve_residual(b):
    A = (laplace_2d(2) + sp.identity(4)).tocsr()
    x = cholesky(A).solve(b)
    np.testing.assert_allclose(A @ x, b, atol=1e-9 * (1 + np.abs(b).max()))
