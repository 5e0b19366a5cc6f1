"""Sparsity of a vertex-star patch matrix in the FDM basis.

Builds the 2^d-cell patch around one vertex, transforms the stiffness matrix
to the fast-diagonalization basis and compares the Cholesky fill with a
low-order (Q1) matrix on the same GLL sub-grid under nested dissection.
"""
import sys

import numpy as np

from fdmstar.expcli import fdm_patch, femsem_patch_matrix
from fdmstar.sparsela import cholesky, nested_dissection_grid


def main(d=2, degrees=(3, 7, 15, 31)):
    print(f"{'p':>3} {'ndofs':>7} {'nnz(A~)':>9} {'nnz(L)':>9} {'nnz(L_Q1)':>10} {'ratio':>6}")
    for p in degrees:
        A, order, classes = fdm_patch(d, p)
        L = cholesky(A, order.perm)
        Q, dims = femsem_patch_matrix(d, p)
        Lq = cholesky(Q, nested_dissection_grid(dims).perm)
        print(f"{p:3d} {A.shape[0]:7d} {A.nnz:9d} {L.nnz:9d} {Lq.nnz:10d} {L.nnz / Lq.nnz:6.3f}")
        # rows of cell-interior modes only touch themselves and one facet per axis
        rows = np.flatnonzero(classes == 0)
        assert set(np.diff(A.indptr)[rows]) == {d + 1}


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 2)
