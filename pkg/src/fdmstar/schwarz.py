"""Vertex-star additive Schwarz relaxation in the FDM basis, the hybrid
two-level p-multigrid/Schwarz V(1,1)-cycle and block preconditioners for
saddle-point systems.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .assembly import ChangeOfBasis, FormOperator, Space, elasticity_surrogate, prolongation
from .krylov import lanczos_extremes
from .sparsela import block_diag_factor, cholesky, patch_ordering, rcm_ordering

__all__ = [
    "PatchSolver",
    "TwoLevel",
    "BlockPrecond",
    "asm_apply",
    "estimate_damping",
    "twolevel_apply",
    "sdc_split",
    "block_precond_apply",
    "SEED",
    "DAMPING_FORMULAS",
]

SEED = 0x5EED


class PatchSolver:
    """Exact solves on vertex-star patches of a (transformed) free-DOF matrix.

    Patch matrices are extracted from ``A_tilde`` and factored under the
    interior-first patch ordering.  All factors are stacked into one
    block-diagonal factor so a sweep is a single gather, solve and scatter.
    """

    def __init__(self, space: Space, A_tilde, skip_boundary=False, threads=1):
        A_tilde = sp.csr_matrix(A_tilde)
        self.space = space
        self.n = A_tilde.shape[0]
        self.patches = []
        self.orderings = []
        verts = range(space.mesh.num_vertices)
        bverts = set(space.mesh.boundary_vertices.tolist()) if skip_boundary else set()
        jobs = []
        for v in verts:
            if v in bverts:
                continue
            dofs, classes, keys = space.patch_dofs(v)
            if len(dofs) == 0:
                continue
            idx = space.reduced_index[dofs]
            order = patch_ordering(classes, keys, dim=space.dim)
            jobs.append((v, idx, order))

        def factor(job):
            v, idx, order = job
            Aj = A_tilde[idx][:, idx]
            return cholesky(Aj, order.perm)

        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                factors = list(ex.map(factor, jobs))
        else:
            factors = [factor(j) for j in jobs]
        self.vertices = [j[0] for j in jobs]
        self.patches = [j[1] for j in jobs]
        self.orderings = [j[2] for j in jobs]
        self.factors = factors
        self._gather = np.concatenate(self.patches) if jobs else np.zeros(0, np.int64)
        self._stacked = block_diag_factor(factors) if factors else None

    @property
    def nnz_L(self):
        return sum(f.nnz for f in self.factors)

    def apply(self, r):
        if self._stacked is None:
            return np.zeros_like(r)
        z = self._stacked.solve(r[self._gather])
        return np.bincount(self._gather, z, minlength=self.n)


def asm_apply(patches: PatchSolver, r):
    """Sum of patch corrections ``sum_j R_j^T A_j^{-1} R_j r``."""
    return patches.apply(np.asarray(r, dtype=float))


DAMPING_FORMULAS = ("chebyshev", "standard", "mean")


def estimate_damping(P, A, n, steps=10, seed=SEED, formula="chebyshev"):
    """Damping weight from the extremal eigenvalues of ``P^{-1} A``.

    Runs ``steps`` preconditioned CG iterations on a fixed-seed random
    right-hand side and takes the extreme eigenvalues of the Lanczos matrix.
    Returns ``(omega, (lambda_min, lambda_max))``.

    ``formula`` selects the weight:

    * ``"chebyshev"``: one Chebyshev step on the smoothing interval
      ``[0.1, 1.1] * lambda_max``, i.e. ``omega = 1 / (0.6 lambda_max)``;
    * ``"standard"``: optimal Richardson weight ``2 / (lambda_max + lambda_min)``;
    * ``"mean"``: ``(lambda_max + lambda_min) / 2`` taken literally.
    """
    if formula not in DAMPING_FORMULAS:
        raise ValueError(f"unknown damping formula {formula!r}; choose from {DAMPING_FORMULAS}")
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(n)
    r = b.copy()
    z = P(r)
    p = z.copy()
    rz = r @ z
    alphas, betas = [], []
    for k in range(steps):
        Ap = A(p)
        pAp = p @ Ap
        if not pAp > 0 or not rz > 0:
            break
        alpha = rz / pAp
        alphas.append(alpha)
        r -= alpha * Ap
        if k + 1 == steps:
            break
        z = P(r)
        rz_new = r @ z
        if not rz_new > 0:
            break
        betas.append(rz_new / rz)
        p = z + betas[-1] * p
        rz = rz_new
    if not alphas:
        warnings.warn("Lanczos breakdown in damping estimate; using omega = 1")
        return 1.0, (np.nan, np.nan)
    lo, hi = lanczos_extremes(alphas, betas[:len(alphas) - 1])
    if formula == "mean":
        return 0.5 * (hi + lo), (lo, hi)
    if formula == "standard":
        return 2.0 / (hi + lo), (lo, hi)
    return 2.0 / (0.1 * hi + 1.1 * hi), (lo, hi)


def sdc_split(space: Space, mu=1.0, lam=0.0, eta=None):
    """Per-component blocks of the separable elasticity surrogate.

    Component ``j`` keeps ``mu grad v_j . grad u_j + (mu + lam) d_j v_j d_j u_j``
    with cell-averaged metric coefficients (plus its interior penalty terms
    for broken components).  Returns one operator per component.
    """
    full = elasticity_surrogate(space, mu, lam, eta)
    return [FormOperator(space, space, [t for t in full.kron if t.test_comp == j])
            for j in range(space.ncomp)]


class TwoLevel:
    """Hybrid two-level V(1,1)-cycle.

    Fine level: damped vertex-star Schwarz relaxation built from the
    separable ``surrogate`` in the FDM basis.  Coarse level: direct solve of
    the Galerkin projection of the true form ``A`` onto ``coarse_space``.
    """

    def __init__(self, A: FormOperator, surrogate: FormOperator, coarse_space: Space,
                 damping="auto", lanczos_steps=10, damping_formula="chebyshev",
                 skip_boundary=False, assemble=None, threads=1, seed=SEED):
        space = A.trial
        self.space = space
        self.A_op = A
        assemble = space.dim == 2 if assemble is None else assemble
        if assemble:
            self.A_mat = A.free_matrix()
            self.A = lambda x: self.A_mat @ x
        else:
            self.A_mat = None
            self.A = lambda x: A.apply_free(x)
        self.S = ChangeOfBasis(space)
        self.A_tilde = surrogate.free_matrix(transformed=True)
        self.patches = PatchSolver(space, self.A_tilde, skip_boundary, threads)
        # coarse level
        self.coarse_space = coarse_space
        Pfull = prolongation(coarse_space, space)
        self.P = Pfull[space.free_dofs][:, coarse_space.free_dofs].tocsr()
        self.Ac = A.galerkin(coarse_space, coarse_space).free_matrix()
        self.coarse_factor = cholesky(self.Ac, rcm_ordering(self.Ac).perm) if self.Ac.shape[0] else None
        n = space.nfree
        if damping == "auto":
            self.omega, self.spectrum = estimate_damping(self.smooth_unscaled, self.A, n,
                                                         lanczos_steps, seed, damping_formula)
        else:
            self.omega, self.spectrum = float(damping), (np.nan, np.nan)

    @property
    def n(self):
        return self.space.nfree

    def smooth_unscaled(self, r):
        """``S A_asm^{-1} S^T r``."""
        return self.S.apply(self.patches.apply(self.S.apply_T(r)))

    def coarse_correct(self, r):
        if self.coarse_factor is None:
            return np.zeros_like(r)
        return self.P @ self.coarse_factor.solve(self.P.T @ r)

    def apply(self, r):
        r = np.asarray(r, dtype=float)
        z = self.omega * self.smooth_unscaled(r)
        z = z + self.coarse_correct(r - self.A(z))
        z = z + self.omega * self.smooth_unscaled(r - self.A(z))
        return z

    __call__ = apply


def twolevel_apply(tl: TwoLevel, r):
    return tl.apply(r)


@dataclass
class BlockPrecond:
    """Block preconditioners for ``[[A, B^T], [B, -C]]``.

    ``P1`` approximates ``A^{-1}``; ``P2_diag`` is the diagonal of the
    pressure mass matrix scaled by ``1/mu + 1/lam``.
    """

    kind: str
    P1: object
    P2_diag: np.ndarray
    B: object = None  # sparse divergence block on free DOFs

    def __post_init__(self):
        if self.kind not in ("diag", "full"):
            raise ValueError(f"unknown block preconditioner kind {self.kind!r}")
        if self.kind == "full" and self.B is None:
            raise ValueError("the full block preconditioner needs the coupling block B")

    @property
    def nu(self):
        return self.P1.n if hasattr(self.P1, "n") else None

    def apply(self, ru, rp):
        if self.kind == "diag":
            return self.P1(ru), rp / self.P2_diag
        t = self.P1(ru)
        yp = rp - self.B @ t
        wp = -yp / self.P2_diag
        zu = t - self.P1(self.B.T @ wp)
        return zu, wp

    def __call__(self, r):
        nu = len(r) - len(self.P2_diag)
        zu, zp = self.apply(r[:nu], r[nu:])
        return np.concatenate([zu, zp])


def block_precond_apply(bp: BlockPrecond, ru, rp):
    return bp.apply(ru, rp)
