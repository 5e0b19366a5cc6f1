"""Two-level Schwarz preconditioned CG for the Poisson equation.

Compares a Cartesian mesh with a parallelogram mesh, where the patch
problems use the separable surrogate instead of the true metric.
"""
import numpy as np

from fdmstar.assembly import load_vector, poisson_operator, poisson_surrogate, scalar_space
from fdmstar.krylov import pcg
from fdmstar.meshgeo import cartesian_mesh, parallelogram_mesh
from fdmstar.schwarz import TwoLevel

meshes = {"cartesian": cartesian_mesh(2, (4, 4)),
          "parallelogram": parallelogram_mesh(4, np.pi / 3)}

for name, mesh in meshes.items():
    for p in (3, 7, 15):
        V = scalar_space(mesh, p)
        tl = TwoLevel(poisson_operator(V), poisson_surrogate(V), scalar_space(mesh, 1))
        b = load_vector(V, 1.0)[V.free_dofs]
        x, rep = pcg(tl.A, tl, b, rtol=1e-8)
        print(f"{name:13s} p={p:2d} n={V.nfree:6d} iterations={rep.iterations:3d} "
              f"kappa={rep.kappa:5.2f} omega={tl.omega:.3f}")
