"""One-dimensional reference interval: nodes, quadrature, shape functions,
reference stiffness/mass matrices and the numerically computed FDM basis.

Everything lives on the reference interval [-1, 1].  Nodal bases are stored
in their natural node order ``0..p``, so the interface modes are the first
and the last entry and the interior modes are ``1..p-1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .sparsela import dense_sym_gen_eig

__all__ = [
    "BASIS_KINDS",
    "QuadratureRule",
    "ReferenceInterval",
    "FdmBasis",
    "legendre",
    "gll_nodes",
    "gauss_legendre_rule",
    "reference_operators",
    "fdm_basis",
    "interpolate_to_gl",
]

BASIS_KINDS = ("gll", "lobatto", "gl")

_NEWTON_TOL = 1e-14
_NEWTON_MAXIT = 100


def _readonly(*arrays):
    for a in arrays:
        a.flags.writeable = False


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        _readonly(self.points, self.weights)

    def __len__(self):
        return len(self.points)


def legendre(n, x):
    """Legendre polynomials ``P_0..P_n`` and their first derivatives at ``x``.

    Returns two arrays of shape ``(len(x), n + 1)``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    P = np.zeros((x.size, n + 1))
    dP = np.zeros((x.size, n + 1))
    P[:, 0] = 1.0
    if n >= 1:
        P[:, 1] = x
        dP[:, 1] = 1.0
    for k in range(2, n + 1):
        P[:, k] = ((2 * k - 1) * x * P[:, k - 1] - (k - 1) * P[:, k - 2]) / k
        # P'_k = P'_{k-2} + (2k-1) P_{k-1}
        dP[:, k] = dP[:, k - 2] + (2 * k - 1) * P[:, k - 1]
    return P, dP


def gll_nodes(p):
    """Gauss-Lobatto-Legendre nodes, the roots of ``(1 - x^2) P'_p(x)``.

    The interior nodes are found by Newton iteration on ``P'_p`` starting from
    the Chebyshev-Gauss-Lobatto points.
    """
    if p < 1:
        raise ValueError(f"degree must be >= 1, got {p}")
    x = -np.cos(np.pi * np.arange(p + 1) / p)
    if p >= 2:
        xi = x[1:-1].copy()
        for _ in range(_NEWTON_MAXIT):
            P, dP = legendre(p, xi)
            # (1 - x^2) P''_p = 2x P'_p - p(p+1) P_p
            d2P = (2 * xi * dP[:, p] - p * (p + 1) * P[:, p]) / (1 - xi**2)
            step = dP[:, p] / d2P
            xi -= step
            if np.max(np.abs(step)) <= _NEWTON_TOL:
                break
        else:
            raise RuntimeError(f"GLL Newton iteration did not converge for p={p}")
        x[1:-1] = np.sort(xi)
    x[0], x[-1] = -1.0, 1.0
    # enforce exact symmetry of the node set
    x = 0.5 * (x - x[::-1])
    return x


@lru_cache(maxsize=None)
def gauss_legendre_rule(n):
    """``n``-point Gauss-Legendre rule, exact up to degree ``2n - 1``."""
    if n < 1:
        raise ValueError(f"need at least one point, got {n}")
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    return QuadratureRule(x, w)


def _nodal_coefficients(nodes):
    """Legendre coefficients of the Lagrange polynomials on ``nodes``."""
    P, _ = legendre(len(nodes) - 1, nodes)
    return np.linalg.inv(P)


def _lobatto_coefficients(p):
    # l_0 = (1-x)/2, l_p = (1+x)/2, l_j = (P_{j+1} - P_{j-1}) / (2j+1)
    C = np.zeros((p + 1, p + 1))
    C[0, 0], C[1, 0] = 0.5, -0.5
    C[0, p], C[1, p] = 0.5, 0.5
    for j in range(1, p):
        C[j + 1, j] += 1.0 / (2 * j + 1)
        C[j - 1, j] -= 1.0 / (2 * j + 1)
    return C


@dataclass(frozen=True, eq=False)
class ReferenceInterval:
    """All one-dimensional operators for one degree and basis kind."""

    degree: int
    kind: str
    nodes: np.ndarray
    coefficients: np.ndarray  # Legendre coefficients, column j <-> basis j
    A_hat: np.ndarray
    B_hat: np.ndarray
    trace_values: np.ndarray  # rows: x=-1, x=+1
    trace_derivatives: np.ndarray  # outward normal derivatives, rows as above

    def __post_init__(self):
        _readonly(self.nodes, self.coefficients, self.A_hat, self.B_hat,
                  self.trace_values, self.trace_derivatives)

    @property
    def n(self):
        return self.degree + 1

    def tabulate(self, x, derivative=False):
        """Basis values (or derivatives) at points ``x``, shape ``(len(x), p+1)``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if (self.kind != "lobatto" and not derivative and x.shape == self.nodes.shape
                and np.array_equal(x, self.nodes)):
            return np.eye(self.n)
        P, dP = legendre(self.degree, x)
        return (dP if derivative else P) @ self.coefficients


@lru_cache(maxsize=None)
def reference_operators(p, kind="gll"):
    """Build the reference interval operators of degree ``p``.

    ``kind`` is one of ``"gll"`` (Lagrange on GLL nodes), ``"lobatto"``
    (hierarchical integrated Legendre) or ``"gl"`` (Lagrange on the p+1
    Gauss-Legendre points, the usual DG nodal basis).
    """
    if kind not in BASIS_KINDS:
        raise ValueError(f"unknown basis kind {kind!r}, expected one of {BASIS_KINDS}")
    if p < 1 and kind != "gl":
        raise ValueError(f"degree must be >= 1, got {p}")
    if p < 0:
        raise ValueError(f"degree must be >= 0, got {p}")
    if kind == "gll":
        nodes = gll_nodes(p)
        C = _nodal_coefficients(nodes)
    elif kind == "gl":
        nodes = np.array(gauss_legendre_rule(p + 1).points)
        C = _nodal_coefficients(nodes)
    else:
        nodes = gll_nodes(p)
        C = _lobatto_coefficients(p)

    rule = gauss_legendre_rule(p + 1)
    P, dP = legendre(p, rule.points)
    phi, dphi = P @ C, dP @ C
    A = dphi.T @ (rule.weights[:, None] * dphi)
    B = phi.T @ (rule.weights[:, None] * phi)
    A = 0.5 * (A + A.T)
    B = 0.5 * (B + B.T)

    Pe, dPe = legendre(p, np.array([-1.0, 1.0]))
    tv = Pe @ C
    td = dPe @ C
    td[0] *= -1.0
    if kind != "gl":
        # interface property of the basis: exact zeros away from the endpoint
        tv = np.zeros_like(tv)
        tv[0, 0] = tv[1, p] = 1.0
    return ReferenceInterval(p, kind, nodes, C, A, B, tv, td)


@dataclass(frozen=True, eq=False)
class FdmBasis:
    """Interval basis that diagonalizes the interior blocks of A_hat and B_hat.

    ``S_hat`` holds the coefficients of the new basis with respect to the GLL
    nodal basis, in natural order: column 0 and column p are the interface
    modes, columns 1..p-1 the interior modes sorted by eigenvalue.
    ``A_tilde``/``B_tilde`` are the transformed matrices with every entry
    outside their symbolic patterns set to exactly zero.
    """

    degree: int
    S_hat: np.ndarray
    eigenvalues: np.ndarray
    A_tilde: np.ndarray
    B_tilde: np.ndarray
    A_pattern: np.ndarray
    B_pattern: np.ndarray
    parity: np.ndarray  # mode k is even (+1) or odd (-1) under x -> -x

    def __post_init__(self):
        _readonly(self.S_hat, self.eigenvalues, self.A_tilde, self.B_tilde,
                  self.A_pattern, self.B_pattern, self.parity)

    @property
    def interior(self):
        return np.arange(1, self.degree)

    @property
    def interface(self):
        return np.array([0, self.degree])

    @property
    def S_II(self):
        return self.S_hat[1:-1, 1:-1]

    @property
    def S_IG(self):
        return self.S_hat[1:-1][:, [0, -1]]


def mass_pattern(p):
    """Symbolic pattern of the transformed mass matrix: diagonal interior,
    dense 2x2 interface block, no interior-interface coupling."""
    pat = np.eye(p + 1, dtype=bool)
    pat[np.ix_([0, p], [0, p])] = True
    return pat


def stiffness_pattern(p):
    """Symbolic pattern of the transformed stiffness matrix: diagonal
    interior, dense interior-interface rows/columns and interface block."""
    pat = mass_pattern(p)
    pat[:, [0, p]] = True
    pat[[0, p], :] = True
    return pat


def _fix_signs(V):
    for k in range(V.shape[1]):
        col = V[:, k]
        m = np.max(np.abs(col))
        i = np.flatnonzero(np.abs(col) >= m * (1 - 1e-8))[0]
        if col[i] < 0:
            V[:, k] = -col
    return V


def fdm_basis(p):
    """FDM basis of degree ``p`` built from the GLL-nodal reference operators.

    ``p`` may also be a GLL :class:`ReferenceInterval`.
    """
    if isinstance(p, ReferenceInterval):
        if p.kind != "gll":
            raise ValueError(f"the FDM basis is built on the gll interval, got {p.kind!r}")
        p = p.degree
    return _fdm_basis(int(p))


@lru_cache(maxsize=None)
def _fdm_basis(p):
    ref = reference_operators(p, "gll")
    A, B = ref.A_hat, ref.B_hat
    I = np.arange(1, p)
    G = np.array([0, p])
    S = np.eye(p + 1)
    lam = np.zeros(0)
    if p >= 2:
        lam, V = dense_sym_gen_eig(A[np.ix_(I, I)], B[np.ix_(I, I)])
        V = _fix_signs(V)
        S[np.ix_(I, I)] = V
        S[np.ix_(I, G)] = -V @ (V.T @ B[np.ix_(I, G)])

    A_pat = stiffness_pattern(p)
    B_pat = mass_pattern(p)
    At = np.where(A_pat, S.T @ A @ S, 0.0)
    Bt = np.where(B_pat, S.T @ B @ S, 0.0)
    At = 0.5 * (At + At.T)
    Bt = 0.5 * (Bt + Bt.T)

    parity = np.ones(p + 1)
    if p >= 2:
        V = S[np.ix_(I, I)]
        # mirror image of each interior mode expressed in the same modes
        flip = V.T @ B[np.ix_(I, I)] @ V[::-1]
        parity[1:-1] = np.sign(np.diag(flip))
    return FdmBasis(p, S, lam, At, Bt, A_pat, B_pat, parity)


def interpolate_to_gl(fdm, p=None):
    """Coefficients of the FDM basis with respect to the GL-nodal basis.

    The GL-nodal coefficients of a polynomial are its values at the GL points,
    so this is ``V @ S_hat`` with ``V[a, j]`` the j-th GLL Lagrange polynomial
    evaluated at the a-th Gauss-Legendre point.
    """
    p = fdm.degree if p is None else p
    if p != fdm.degree:
        raise ValueError(f"FDM basis has degree {fdm.degree}, not {p}")
    gll = reference_operators(p, "gll")
    V = gll.tabulate(gauss_legendre_rule(p + 1).points)
    return V @ fdm.S_hat
