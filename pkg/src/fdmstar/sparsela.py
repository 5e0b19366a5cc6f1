"""Small dense eigensolvers, Kronecker application, sparse symmetric storage
and an up-looking sparse Cholesky factorization with fill-reducing orderings.

The sparse storage is scipy's CSR format (full symmetric pattern, sorted
indices).  The Cholesky kernels are compiled with numba and work on the
upper triangle of the permuted matrix in CSC form, which is the lower
triangle in CSR form of the same matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

__all__ = [
    "NotSPDError",
    "jacobi_eigh",
    "dense_sym_gen_eig",
    "KronOperator",
    "kron_apply",
    "kron_apply_batched",
    "as_sparse_sym",
    "spmv",
    "row_counts",
    "write_matrix_market",
    "CholFactor",
    "cholesky",
    "symbolic_cholesky",
    "block_diag_factor",
    "Ordering",
    "nested_dissection_grid",
    "nested_dissection_structured",
    "patch_ordering",
    "rcm_ordering",
]


class NotSPDError(np.linalg.LinAlgError):
    """Raised when a pivot of a Cholesky factorization is not positive."""

    def __init__(self, index, value):
        super().__init__(f"matrix is not positive definite: pivot {value:.3e} at index {index}")
        self.index = index
        self.value = value


# --------------------------------------------------------------------------
# dense symmetric eigenproblems


def _round_robin(m):
    """Pairings of ``m`` (even) players so every pair meets once in m-1 rounds."""
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        half = m // 2
        top, bot = players[:half], players[half:][::-1]
        rounds.append((np.array(top), np.array(bot)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(A, tol=1e-12, max_sweeps=30):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits all index pairs in round-robin order; the n/2 disjoint
    rotations of one round are applied together.  Iteration stops when the
    off-diagonal Frobenius norm drops below ``tol * ||A||_F``.
    Once below, one more sweep is made to reach roundoff.
    Returns eigenvalues in ascending order and orthonormal eigenvectors.
    """
    A = np.array(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=1e-12, atol=1e-14 * max(1.0, np.abs(A).max(initial=0))):
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    m = n + (n % 2)
    M = np.zeros((m, m))
    M[:n, :n] = A
    V = np.eye(m)
    scale = max(np.linalg.norm(A), np.finfo(float).tiny)
    rounds = _round_robin(m) if m > 1 else []

    def off(X):
        O = X - np.diag(np.diag(X))
        return np.linalg.norm(O)

    polish = 1
    for _ in range(max_sweeps):
        if off(M) <= tol * scale:
            # quadratic convergence: one more sweep reaches roundoff
            if polish == 0:
                break
            polish -= 1
        for P, Q in rounds:
            apq = M[P, Q]
            app = M[P, P]
            aqq = M[Q, Q]
            # skip pairs that are already decoupled to working precision
            nz = np.abs(apq) > 1e-18 * np.sqrt(np.abs(app * aqq))
            c = np.ones_like(apq)
            s = np.zeros_like(apq)
            if np.any(nz):
                tau = (aqq[nz] - app[nz]) / (2.0 * apq[nz])
                big = np.abs(tau) > 1e150
                tau_s = np.where(big, 1.0, tau)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau_s) + np.sqrt(1.0 + tau_s * tau_s))
                t = np.where(big, 0.5 / np.where(big, tau, 1.0), t)
                c[nz] = 1.0 / np.sqrt(1.0 + t * t)
                s[nz] = t * c[nz]
            # rows, then columns
            Mp, Mq = M[P, :].copy(), M[Q, :].copy()
            M[P, :] = c[:, None] * Mp - s[:, None] * Mq
            M[Q, :] = s[:, None] * Mp + c[:, None] * Mq
            Mp, Mq = M[:, P].copy(), M[:, Q].copy()
            M[:, P] = Mp * c - Mq * s
            M[:, Q] = Mp * s + Mq * c
            M[P, Q] = 0.0
            M[Q, P] = 0.0
            Vp, Vq = V[:, P].copy(), V[:, Q].copy()
            V[:, P] = Vp * c - Vq * s
            V[:, Q] = Vp * s + Vq * c
    else:
        if off(M) > tol * scale:
            raise RuntimeError("Jacobi eigensolver did not converge")
    if off(M) > tol * scale:
        raise RuntimeError("Jacobi eigensolver did not converge")
    lam = np.diag(M)[:n].copy()
    V = V[:n, :n]
    # the padding index never couples (its rotations are identities)
    order = np.argsort(lam, kind="stable")
    return lam[order], V[:, order]


def dense_sym_gen_eig(A, B):
    """Solve ``A v = lam B v`` for symmetric A and symmetric positive definite B.

    Uses a Cholesky congruence followed by Jacobi rotations.  Eigenvectors are
    B-orthonormal and eigenvalues ascend.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    try:
        L = np.linalg.cholesky(0.5 * (B + B.T))
    except np.linalg.LinAlgError as exc:
        raise NotSPDError(-1, np.nan) from exc
    Linv = np.linalg.solve(L, np.eye(len(L)))
    C = Linv @ A @ Linv.T
    lam, Q = jacobi_eigh(0.5 * (C + C.T))
    V = Linv.T @ Q
    norms = np.sqrt(np.einsum("ik,ij,jk->k", V, B, V))
    return lam, V / norms


# --------------------------------------------------------------------------
# Kronecker products


@dataclass
class KronOperator:
    """Sum of Kronecker products ``sum_t coef[t] * kron(terms[t][0], ..., terms[t][-1])``.

    Factors are listed slowest index first.
    """

    terms: list
    coefs: list = None

    def __post_init__(self):
        self.terms = [tuple(np.asarray(F, float) for F in t) for t in self.terms]
        if not self.terms:
            raise ValueError("a Kronecker operator needs at least one term")
        self.coefs = [1.0] * len(self.terms) if self.coefs is None else [float(c) for c in self.coefs]
        shapes = {tuple(F.shape for F in t) for t in self.terms}
        if len(shapes) != 1:
            raise ValueError(f"terms have inconsistent factor shapes: {sorted(shapes)}")

    @property
    def shape(self):
        t = self.terms[0]
        return int(np.prod([F.shape[0] for F in t])), int(np.prod([F.shape[1] for F in t]))

    def apply(self, x):
        return sum(c * kron_apply(t, x) for c, t in zip(self.coefs, self.terms))

    __matmul__ = apply

    def to_dense(self):
        out = np.zeros(self.shape)
        for c, t in zip(self.coefs, self.terms):
            M = np.ones((1, 1))
            for F in t:
                M = np.kron(M, F)
            out += c * M
        return out


def kron_apply(factors, x):
    """Apply ``kron(factors[0], ..., factors[-1])`` to ``x`` without forming it.

    The last factor acts on the fastest-varying index.  A
    :class:`KronOperator` is applied term by term.
    """
    if isinstance(factors, KronOperator):
        return factors.apply(x)
    X = np.asarray(x)
    shape = tuple(F.shape[1] for F in factors)
    if X.size != int(np.prod(shape)):
        raise ValueError(f"vector of length {X.size} does not match factors {shape}")
    Y = kron_apply_batched(factors, X.reshape((1,) + shape))
    return Y.reshape(-1)


def kron_apply_batched(factors, X):
    """Apply the Kronecker product to a batch ``X`` of shape ``(b, n_1, .., n_d)``.

    ``factors`` may also hold a ``None`` entry for the identity.
    """
    Y = X
    for axis, F in enumerate(factors):
        if F is None:
            continue
        Y = np.moveaxis(np.tensordot(F, Y, axes=([1], [axis + 1])), 0, axis + 1)
    return Y


# --------------------------------------------------------------------------
# sparse symmetric storage


def as_sparse_sym(A, check=True):
    """Return ``A`` as CSR with sorted indices, checking structural symmetry."""
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.sort_indices()
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix is not square: {A.shape}")
    if check:
        P = (A != 0).astype(np.int8)
        if (P != P.T).nnz:
            raise ValueError("matrix is not structurally symmetric")
    return A


def spmv(A, x):
    x = np.asarray(x)
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {A.shape}, vector {x.shape}")
    return A @ x


def row_counts(A):
    """Number of stored nonzeros per row."""
    A = sp.csr_matrix(A)
    A.eliminate_zeros()
    return np.diff(A.indptr)


def write_matrix_market(A, path):
    """Write the lower triangle of a symmetric matrix in Matrix Market format."""
    L = sp.tril(sp.csr_matrix(A), format="coo")
    order = np.lexsort((L.row, L.col))
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
        fh.write(f"{A.shape[0]} {A.shape[1]} {L.nnz}\n")
        for i, j, v in zip(L.row[order], L.col[order], L.data[order]):
            fh.write(f"{i + 1} {j + 1} {v:.17g}\n")


# --------------------------------------------------------------------------
# sparse Cholesky


@numba.njit(cache=True, nogil=True)
def _etree(Cp, Ci, n):
    parent = -np.ones(n, dtype=np.int64)
    ancestor = -np.ones(n, dtype=np.int64)
    for k in range(n):
        for q in range(Cp[k], Cp[k + 1]):
            i = Ci[q]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@numba.njit(cache=True, nogil=True)
def _ereach(Cp, Ci, k, parent, s, w, mark):
    """Pattern of row k of L (excluding the diagonal) in s[top:n]."""
    n = len(parent)
    top = n
    w[k] = mark
    for q in range(Cp[k], Cp[k + 1]):
        i = Ci[q]
        if i > k:
            continue
        length = 0
        while w[i] != mark:
            s[length] = i
            length += 1
            w[i] = mark
            i = parent[i]
        while length > 0:
            length -= 1
            top -= 1
            s[top] = s[length]
    return top


@numba.njit(cache=True, nogil=True)
def _colcounts(Cp, Ci, parent, n):
    counts = np.ones(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    w = np.zeros(n, dtype=np.int64)
    for k in range(n):
        top = _ereach(Cp, Ci, k, parent, s, w, k + 1)
        for t in range(top, n):
            counts[s[t]] += 1
    return counts


@numba.njit(cache=True, nogil=True)
def _numeric(Cp, Ci, Cx, parent, Lp, n):
    nnz = Lp[n]
    Li = np.empty(nnz, dtype=np.int64)
    Lx = np.empty(nnz)
    c = Lp[:-1].copy()
    x = np.zeros(n)
    s = np.empty(n, dtype=np.int64)
    w = np.zeros(n, dtype=np.int64)
    for k in range(n):
        top = _ereach(Cp, Ci, k, parent, s, w, k + 1)
        x[k] = 0.0
        for q in range(Cp[k], Cp[k + 1]):
            if Ci[q] <= k:
                x[Ci[q]] = Cx[q]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            j = s[t]
            lki = x[j] / Lx[Lp[j]]
            x[j] = 0.0
            for q in range(Lp[j] + 1, c[j]):
                x[Li[q]] -= Lx[q] * lki
            d -= lki * lki
            q = c[j]
            c[j] += 1
            Li[q] = k
            Lx[q] = lki
        if not d > 0.0:
            return Li, Lx, k, d
        q = c[k]
        c[k] += 1
        Li[q] = k
        Lx[q] = np.sqrt(d)
    return Li, Lx, -1, 0.0


@numba.njit(cache=True, nogil=True)
def _solve_inplace(Lp, Li, Lx, y):
    n = len(Lp) - 1
    for j in range(n):
        y[j] /= Lx[Lp[j]]
        yj = y[j]
        for q in range(Lp[j] + 1, Lp[j + 1]):
            y[Li[q]] -= Lx[q] * yj
    for j in range(n - 1, -1, -1):
        acc = y[j]
        for q in range(Lp[j] + 1, Lp[j + 1]):
            acc -= Lx[q] * y[Li[q]]
        y[j] = acc / Lx[Lp[j]]


@numba.njit(cache=True, nogil=True)
def _solve_many(Lp, Li, Lx, Y):
    for r in range(Y.shape[1]):
        col = Y[:, r].copy()
        _solve_inplace(Lp, Li, Lx, col)
        Y[:, r] = col


def _upper_csc(A, perm):
    """Upper triangle of ``A[perm][:, perm]`` in CSC arrays (via lower CSR)."""
    C = sp.csr_matrix(A)[perm][:, perm]
    U = sp.triu(C, format="csc")
    U.sort_indices()
    return (U.indptr.astype(np.int64), U.indices.astype(np.int64), U.data.astype(float))


@dataclass
class CholFactor:
    """``P A P^T = L L^T`` with L stored column-wise, diagonal first."""

    perm: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    Lx: np.ndarray
    parent: np.ndarray
    colcounts: np.ndarray

    @property
    def n(self):
        return len(self.perm)

    @property
    def nnz(self):
        return int(self.Lp[-1])

    @property
    def flops(self):
        return int(np.sum(self.colcounts.astype(np.int64) ** 2))

    @property
    def L(self):
        return sp.csc_matrix((self.Lx, self.Li, self.Lp), shape=(self.n, self.n))

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side of length {b.shape[0]} for a factor of size {self.n}")
        y = b[self.perm].copy()
        if y.ndim == 1:
            _solve_inplace(self.Lp, self.Li, self.Lx, y)
        else:
            y = np.ascontiguousarray(y.reshape(self.n, -1))
            _solve_many(self.Lp, self.Li, self.Lx, y)
            y = y.reshape(b.shape)
        x = np.empty_like(y)
        x[self.perm] = y
        return x


def symbolic_cholesky(A, perm=None):
    """Elimination tree and column counts of L for ``A[perm][:, perm]``.

    Returns ``(parent, colcounts)``; ``colcounts.sum()`` is nnz(L) including
    the diagonal.  No numerical work is done.
    """
    n = A.shape[0]
    perm = np.arange(n) if perm is None else np.asarray(perm, dtype=np.int64)
    Cp, Ci, _ = _upper_csc(A, perm)
    parent = _etree(Cp, Ci, n)
    return parent, _colcounts(Cp, Ci, parent, n)


def cholesky(A, perm=None):
    """Sparse Cholesky factorization of an SPD matrix with optional ordering."""
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"matrix is not square: {A.shape}")
    perm = np.arange(n, dtype=np.int64) if perm is None else np.asarray(perm, dtype=np.int64)
    if len(perm) != n or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("ordering is not a permutation")
    Cp, Ci, Cx = _upper_csc(A, perm)
    parent = _etree(Cp, Ci, n)
    counts = _colcounts(Cp, Ci, parent, n)
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=Lp[1:])
    Li, Lx, bad, d = _numeric(Cp, Ci, Cx, parent, Lp, n)
    if bad >= 0:
        raise NotSPDError(int(perm[bad]), float(d))
    return CholFactor(perm, Lp, Li, Lx, parent, counts)


def block_diag_factor(factors):
    """Stack independent factors into one block-diagonal factor."""
    offs = np.cumsum([0] + [f.n for f in factors])
    loffs = np.cumsum([0] + [f.nnz for f in factors])
    perm = np.concatenate([f.perm + o for f, o in zip(factors, offs[:-1])])
    Lp = np.concatenate([[0]] + [f.Lp[1:] + lo for f, lo in zip(factors, loffs[:-1])])
    Li = np.concatenate([f.Li + o for f, o in zip(factors, offs[:-1])])
    Lx = np.concatenate([f.Lx for f in factors])
    parent = np.concatenate([np.where(f.parent >= 0, f.parent + o, -1)
                             for f, o in zip(factors, offs[:-1])])
    counts = np.concatenate([f.colcounts for f in factors])
    return CholFactor(perm.astype(np.int64), Lp.astype(np.int64), Li.astype(np.int64),
                      Lx, parent, counts)


# --------------------------------------------------------------------------
# orderings


@dataclass
class Ordering:
    """Permutation ``perm`` (new position -> old index) with named groups."""

    perm: np.ndarray
    groups: list

    def inverse(self):
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm))
        return inv


def nested_dissection_grid(dims):
    """Nested dissection of a structured grid, flattened in C order.

    The box is split across its longest axis (ties: the slowest axis) by a
    plane of nodes which is numbered after both halves.  Boxes that are a
    single line of nodes are numbered naturally.
    """
    dims = tuple(int(n) for n in dims)
    index = np.arange(int(np.prod(dims))).reshape(dims)
    out = []

    def visit(lo, hi):
        ext = [h - l for l, h in zip(lo, hi)]
        if min(ext) <= 0:
            return
        if sum(e > 1 for e in ext) <= 1 or max(ext) <= 2:
            out.append(index[tuple(slice(l, h) for l, h in zip(lo, hi))].ravel())
            return
        ax = int(np.argmax(ext))
        mid = (lo[ax] + hi[ax]) // 2
        left_hi = list(hi)
        left_hi[ax] = mid
        right_lo = list(lo)
        right_lo[ax] = mid + 1
        visit(lo, left_hi)
        visit(right_lo, hi)
        sep_lo, sep_hi = list(lo), list(hi)
        sep_lo[ax], sep_hi[ax] = mid, mid + 1
        out.append(index[tuple(slice(l, h) for l, h in zip(sep_lo, sep_hi))].ravel())

    visit([0] * len(dims), list(dims))
    perm = np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
    return Ordering(perm.astype(np.int64), [("nd", 0, len(perm))])


_CLASS_NAMES = {0: "interior", 1: "facet", 2: "edge", 3: "vertex"}


def patch_ordering(classes, keys=None, dim=None):
    """Order patch DOFs by topological class, then by a secondary key.

    ``classes`` holds the number of constrained axes of each DOF's entity:
    0 for cell interiors, 1 for facets, ..., ``dim`` for the patch vertex.
    ``keys`` (e.g. the cell of an interior DOF or the separator plane of a
    facet) breaks ties; the original index breaks the rest.
    """
    classes = np.asarray(classes)
    n = len(classes)
    keys = np.zeros(n, dtype=np.int64) if keys is None else np.asarray(keys)
    perm = np.lexsort((np.arange(n), keys, classes)).astype(np.int64)
    groups = []
    sc = classes[perm]
    dim = int(classes.max(initial=0)) if dim is None else dim
    for c in np.unique(sc):
        idx = np.flatnonzero(sc == c)
        name = "vertex" if c == dim and c > 0 else _CLASS_NAMES.get(int(c), str(c))
        groups.append((name, int(idx[0]), int(idx[-1]) + 1))
    return Ordering(perm, groups)


def rcm_ordering(A):
    """Reverse Cuthill-McKee ordering of a symmetric sparse matrix."""
    from scipy.sparse.csgraph import reverse_cuthill_mckee

    perm = reverse_cuthill_mckee(sp.csr_matrix(A), symmetric_mode=True)
    return Ordering(np.asarray(perm, dtype=np.int64), [("rcm", 0, len(perm))])


nested_dissection_structured = nested_dissection_grid
