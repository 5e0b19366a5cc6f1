"""Function spaces, DOF maps and operator assembly.

A space is a list of components; each component is a tensor product of
one-dimensional families, one per reference axis.  A family is either
continuous (``cg``, Lagrange on GLL nodes, shared across cells) or
discontinuous (``dg``, Lagrange on Gauss-Legendre points).  Q_p, DQ_p,
[Q_p]^d and RT_p all fit this scheme.

Global DOFs are attached to mesh entities (vertices, edges, facets, cell
interiors).  Each entity is numbered in the frame of the first cell that
visits it; other cells map into that frame through an axis permutation and
reflections.  Next to the nodal numbering every space carries an FDM
numbering: the same slots, but holding coefficients with respect to the
fast-diagonalization basis, with a sign for reflected odd modes.

Operators are sums of Kronecker terms (cell or cell-pair coupling with one
1D factor per axis) and dense cell terms (quadrature on non-Cartesian
cells).  They can be applied matrix-free, assembled, transformed to the FDM
basis with exact symbolic sparsity and projected onto coarse spaces.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from itertools import product

import numpy as np
import scipy.sparse as sp

from .meshgeo import Mesh, entity_corners, mesh_geometry, _shape_functions, _tensor_rule
from .refelem import (fdm_basis, gauss_legendre_rule, interpolate_to_gl, mass_pattern,
                      reference_operators, stiffness_pattern)

__all__ = [
    "Family",
    "Space",
    "scalar_space",
    "vector_space",
    "rt_space",
    "dq_space",
    "Factor",
    "KronTerm",
    "DenseTerm",
    "FormOperator",
    "interval_matrix",
    "poisson_operator",
    "poisson_surrogate",
    "elasticity_operator",
    "elasticity_surrogate",
    "divergence_operator",
    "pressure_mass",
    "load_vector",
    "prolongation",
    "ChangeOfBasis",
    "penalty_parameter",
    "piola_map",
    "stencil_counts",
    "cell_matrix_cartesian",
    "cell_matrix_quadrature",
    "elasticity_primal_cell",
    "sipg_facet_dirichlet",
    "sipg_facet_interior",
    "assemble_global",
    "eliminate_dirichlet",
    "transformed_assembly",
    "mixed_blocks",
    "expand_free",
    "evaluate",
    "divergence_values",
]


# --------------------------------------------------------------------------
# 1D families


@dataclass(frozen=True)
class Family:
    kind: str  # "cg" or "dg"
    degree: int

    def __post_init__(self):
        if self.kind not in ("cg", "dg"):
            raise ValueError(f"unknown family kind {self.kind!r}")
        if self.degree < (1 if self.kind == "cg" else 0):
            raise ValueError(f"degree {self.degree} too low for a {self.kind} family")

    @property
    def n(self):
        return self.degree + 1

    @property
    def ref(self):
        return reference_operators(self.degree, "gll" if self.kind == "cg" else "gl")

    @property
    def nodes(self):
        return self.ref.nodes

    @property
    def fdm(self):
        """FDM basis coefficients in this family's nodal basis."""
        return _family_fdm(self)

    @property
    def parity(self):
        return _family_parity(self)


@lru_cache(maxsize=None)
def _family_fdm(fam):
    if fam.degree == 0:
        return np.ones((1, 1))
    S = fdm_basis(fam.degree).S_hat
    return S if fam.kind == "cg" else interpolate_to_gl(fdm_basis(fam.degree))


@lru_cache(maxsize=None)
def _family_parity(fam):
    if fam.degree == 0:
        return np.ones(1)
    return fdm_basis(fam.degree).parity


@lru_cache(maxsize=None)
def interval_matrix(test, trial, dtest=False, dtrial=False):
    """``int_{-1}^{1} D^a phi_i D^b psi_j`` for families ``test``/``trial``."""
    if test == trial and test.kind == "cg" and dtest == dtrial:
        ref = test.ref
        return ref.A_hat if dtest else ref.B_hat
    rule = gauss_legendre_rule(max(test.degree, trial.degree) + 1)
    Pt = test.ref.tabulate(rule.points, dtest)
    Ps = trial.ref.tabulate(rule.points, dtrial)
    M = Pt.T @ (rule.weights[:, None] * Ps)
    M.flags.writeable = False
    return M


# --------------------------------------------------------------------------
# spaces and DOF maps


@dataclass
class _Entity:
    comp: int
    base: int
    size: int
    ext: tuple  # extents along the owner's free axes (ascending axes)
    fams: tuple  # families along the owner's free axes
    coords: dict  # vertex -> corner coordinates in the owner frame
    nfixed: int
    vertices: tuple
    owner: int


class Space:
    """DOF layout of a (vector) tensor-product space on a mesh.

    ``components`` is a sequence of per-axis family tuples (x first).
    With ``dirichlet=True`` the DOFs of continuous entities that lie on a
    boundary facet tagged ``dirichlet`` are marked as constrained.
    """

    def __init__(self, mesh: Mesh, components, dirichlet=True, name="space", degree=None):
        self.mesh = mesh
        self.components = tuple(tuple(c) for c in components)
        self.name = name
        self.degree = degree
        d = mesh.dim
        for c in self.components:
            if len(c) != d:
                raise ValueError(f"component needs {d} families, got {len(c)}")
        self.shapes = [tuple(f.n for f in c[::-1]) for c in self.components]  # (z, y, x)
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.nloc = int(self.offsets[-1])
        self._build()
        self._apply_dirichlet(dirichlet)

    @property
    def dim(self):
        return self.mesh.dim

    @property
    def ncomp(self):
        return len(self.components)

    def __repr__(self):
        return f"Space({self.name}, ndofs={self.ndofs}, free={int(self.free.sum())})"

    # -- construction --------------------------------------------------------

    def _patterns(self, comp):
        fams = self.components[comp]
        d = len(fams)
        shape = self.shapes[comp][::-1]  # x, y, z
        strides = np.cumprod((1,) + shape[:-1])
        options = [(0, 1, None) if f.kind == "cg" else (None,) for f in fams]
        pats = []
        for combo in product(*options):
            fixed = {a: s for a, s in enumerate(combo) if s is not None}
            free = [a for a in range(d) if a not in fixed]
            ranges = []
            for a in range(d):
                f = fams[a]
                if a in fixed:
                    ranges.append(np.array([0 if fixed[a] == 0 else f.degree]))
                elif f.kind == "cg":
                    ranges.append(np.arange(1, f.degree))
                else:
                    ranges.append(np.arange(f.n))
            if any(len(r) == 0 for r in ranges):
                continue
            # enumerate with the highest free axis slowest
            grids = np.meshgrid(*[ranges[a] for a in reversed(range(d))], indexing="ij")
            flat = sum(g.ravel() * strides[a] for a, g in zip(reversed(range(d)), grids))
            ext = tuple(len(ranges[a]) for a in free)
            jloc = np.meshgrid(*[np.arange(e) for e in reversed(ext)], indexing="ij")
            jloc = [g.ravel() for g in reversed(jloc)]  # per free axis, ascending
            pats.append(dict(fixed=fixed, free=free, flat=flat.astype(np.int64), ext=ext,
                             j=jloc, corners=entity_corners(d, fixed)))
        return pats

    def _build(self):
        mesh = self.mesh
        nc = mesh.num_cells
        cell_dofs = np.full((nc, self.nloc), -1, dtype=np.int64)
        cell_fdm = np.full((nc, self.nloc), -1, dtype=np.int64)
        cell_sgn = np.ones((nc, self.nloc))
        entities = []
        table = {}
        n = 0
        for comp in range(self.ncomp):
            fams = self.components[comp]
            off = self.offsets[comp]
            for pat in self._patterns(comp):
                free = pat["free"]
                nb = len(free)
                for K in range(nc):
                    corner_v = mesh.cells[K, pat["corners"]]
                    if pat["fixed"]:
                        key = (comp, frozenset(int(v) for v in corner_v))
                    else:
                        key = (comp, "cell", K)
                    ent = table.get(key)
                    loc = off + pat["flat"]
                    if ent is None:
                        size = len(pat["flat"])
                        coords = {}
                        for i, v in enumerate(corner_v):
                            coords[int(v)] = tuple((i >> k) & 1 for k in range(nb))
                        ent = _Entity(comp, n, size, pat["ext"], tuple(fams[a] for a in free),
                                      coords, len(pat["fixed"]),
                                      tuple(sorted(int(v) for v in corner_v) if pat["fixed"]
                                            else sorted(int(v) for v in mesh.cells[K])), K)
                        table[key] = ent
                        entities.append(ent)
                        n += size
                        g = ent.base + np.arange(size)
                        cell_dofs[K, loc] = g
                        cell_fdm[K, loc] = g
                        continue
                    nodal, fdm, sgn = self._map_to_owner(ent, pat, corner_v, fams)
                    cell_dofs[K, loc] = ent.base + nodal
                    cell_fdm[K, loc] = ent.base + fdm
                    cell_sgn[K, loc] = sgn
        self.ndofs = n
        self.cell_dofs = cell_dofs
        self.cell_fdm_dofs = cell_fdm
        self.cell_fdm_sign = cell_sgn
        self.entities = entities
        self.multiplicity = np.bincount(cell_dofs.ravel(), minlength=n).astype(float)
        cls = np.empty(n, dtype=np.int64)
        comp = np.empty(n, dtype=np.int64)
        ent_of = np.empty(n, dtype=np.int64)
        for i, e in enumerate(entities):
            cls[e.base:e.base + e.size] = e.nfixed
            comp[e.base:e.base + e.size] = e.comp
            ent_of[e.base:e.base + e.size] = i
        self.dof_class = cls
        self.dof_component = comp
        self.dof_entity = ent_of

    def _map_to_owner(self, ent, pat, corner_v, fams):
        free = pat["free"]
        nb = len(free)
        o0 = np.array(ent.coords[int(corner_v[0])])
        perm = np.empty(nb, dtype=np.int64)
        flip = np.zeros(nb, dtype=bool)
        for k in range(nb):
            diff = np.array(ent.coords[int(corner_v[1 << k])]) - o0
            nzk = np.flatnonzero(diff)
            if len(nzk) != 1:
                raise ValueError("cells do not share the entity conformingly")
            perm[k] = nzk[0]
            flip[k] = diff[nzk[0]] < 0
        strides = np.cumprod((1,) + tuple(ent.ext[:-1])).astype(np.int64) if nb else np.zeros(0, np.int64)
        nodal = np.zeros(len(pat["flat"]), dtype=np.int64)
        fdm = np.zeros(len(pat["flat"]), dtype=np.int64)
        sgn = np.ones(len(pat["flat"]))
        for k in range(nb):
            f = fams[free[k]]
            if ent.fams[perm[k]] != f or ent.ext[perm[k]] != pat["ext"][k]:
                raise ValueError("cells disagree on the family of a shared entity")
            j = pat["j"][k]
            e = pat["ext"][k]
            if not flip[k]:
                jn, jf, s = j, j, np.ones(len(j))
            elif f.kind == "cg":
                jn, jf, s = e - 1 - j, j, f.parity[j + 1]
            else:
                q = f.degree
                jn = q - j
                ends = (j == 0) | (j == q)
                jf = np.where(ends, q - j, j)
                s = np.where(ends, 1.0, f.parity[j])
            nodal += jn * strides[perm[k]]
            fdm += jf * strides[perm[k]]
            sgn *= s
        return nodal, fdm, sgn

    def _apply_dirichlet(self, dirichlet):
        free = np.ones(self.ndofs, dtype=bool)
        if dirichlet:
            dfacets = [frozenset(fc.vertices) for fc in self.mesh.facets
                       if fc.is_boundary and fc.tag == "dirichlet"]
            by_vertex = {}
            for F in dfacets:
                for v in F:
                    by_vertex.setdefault(v, []).append(F)
            for e in self.entities:
                if e.nfixed == 0:
                    continue
                vs = frozenset(e.vertices)
                cands = by_vertex.get(e.vertices[0], [])
                if any(vs <= F for F in cands):
                    free[e.base:e.base + e.size] = False
        self.free = free
        self.free_dofs = np.flatnonzero(free)
        self.reduced_index = np.full(self.ndofs, -1, dtype=np.int64)
        self.reduced_index[self.free_dofs] = np.arange(len(self.free_dofs))

    # -- queries ---------------------------------------------------------------

    @property
    def nfree(self):
        return len(self.free_dofs)

    def component_dofs(self, comp, fdm=False):
        sl = slice(self.offsets[comp], self.offsets[comp + 1])
        return (self.cell_fdm_dofs if fdm else self.cell_dofs)[:, sl]

    @cached_property
    def _vertex_entities(self):
        out = [[] for _ in range(self.mesh.num_vertices)]
        for i, e in enumerate(self.entities):
            for v in e.vertices:
                out[v].append(i)
        return out

    def patch_dofs(self, v, free_only=True):
        """DOFs of the vertex star of ``v``: all entities whose closure holds ``v``.

        Returns ``(dofs, classes, keys)`` where ``classes`` counts constrained
        axes (0 interior, d vertex) and ``keys`` groups DOFs of one entity.
        """
        ents = self._vertex_entities[v]
        dofs = np.concatenate([np.arange(self.entities[i].base,
                                         self.entities[i].base + self.entities[i].size)
                               for i in ents]) if ents else np.zeros(0, np.int64)
        if free_only:
            dofs = dofs[self.free[dofs]]
        return dofs, self.dof_class[dofs], self.dof_entity[dofs]

    def tabulate_nodes(self):
        """Physical coordinates of every nodal DOF, shape ``(ndofs, d)``."""
        X = np.zeros((self.ndofs, self.dim))
        verts = self.mesh.vertices[self.mesh.cells]
        for c, fams in enumerate(self.components):
            grids = np.meshgrid(*[f.nodes for f in fams[::-1]], indexing="ij")
            xhat = np.stack([g.ravel() for g in grids[::-1]], axis=1)
            N, _ = _shape_functions(self.dim, xhat)
            pts = np.einsum("qc,kci->kqi", N, verts)
            X[self.component_dofs(c)] = pts
        return X


def _tag_name(kind, p, d):
    return f"{kind}{p}^{d}"


def scalar_space(mesh, p, disc="cg", dirichlet=True):
    fam = Family("cg" if disc == "cg" else "dg", p)
    return Space(mesh, [(fam,) * mesh.dim], dirichlet=dirichlet and disc == "cg",
                 name=("Q" if disc == "cg" else "DQ") + str(p), degree=p)


def vector_space(mesh, p, dirichlet=True):
    fam = Family("cg", p)
    return Space(mesh, [(fam,) * mesh.dim] * mesh.dim, dirichlet=dirichlet,
                 name=f"[Q{p}]^{mesh.dim}", degree=p)


def rt_space(mesh, p, dirichlet=True):
    """Raviart-Thomas space of degree p on Cartesian cells: component i is
    continuous of degree p along axis i and discontinuous of degree p-1
    along the other axes."""
    d = mesh.dim
    comps = []
    for i in range(d):
        comps.append(tuple(Family("cg", p) if a == i else Family("dg", p - 1) for a in range(d)))
    return Space(mesh, comps, dirichlet=dirichlet, name=f"RT{p}", degree=p)


def dq_space(mesh, q):
    return Space(mesh, [(Family("dg", q),) * mesh.dim], dirichlet=False, name=f"DQ{q}", degree=q)


# --------------------------------------------------------------------------
# operators


@dataclass(frozen=True, eq=False)
class Factor:
    """1D factor of a Kronecker term.

    ``kind`` selects the symbolic pattern after the FDM change of basis:
    ``mass``/``stiff`` (same family on both sides), ``trace`` (outer product
    of endpoint values or derivatives, with ``ends``/``derivs`` recorded)
    or ``dense``.
    """

    matrix: np.ndarray
    kind: str
    test: Family
    trial: Family
    ends: tuple = ()
    derivs: tuple = ()

    def transformed(self):
        return _transform_factor(self)

    def pattern(self, transformed=False):
        if not transformed:
            return self.matrix != 0
        return _transform_factor(self) != 0


def _fdm_end_pattern(fam, end, deriv):
    n = fam.n
    if deriv:
        return np.ones(n, dtype=bool)
    pat = np.zeros(n, dtype=bool)
    pat[0 if end == 0 else n - 1] = True
    if fam.degree == 0:
        pat[:] = True
    return pat


_TCACHE = {}


def _transform_factor(F):
    key = id(F)
    hit = _TCACHE.get(key)
    if hit is not None and hit[0] is F:
        return hit[1]
    T = F.test.fdm.T @ F.matrix @ F.trial.fdm
    if F.kind in ("mass", "stiff") and F.test == F.trial and F.test.degree >= 1:
        p = F.test.degree
        pat = mass_pattern(p) if F.kind == "mass" else stiffness_pattern(p)
        if F.test.kind == "cg":
            ref = fdm_basis(p)
            T = (ref.B_tilde if F.kind == "mass" else ref.A_tilde)
        T = np.where(pat, T, 0.0)
    elif F.kind == "trace":
        pr = _fdm_end_pattern(F.test, F.ends[0], F.derivs[0])
        pc = _fdm_end_pattern(F.trial, F.ends[1], F.derivs[1])
        T = np.where(np.outer(pr, pc), T, 0.0)
    T = np.asarray(T)
    _TCACHE[key] = (F, T)
    return T


@lru_cache(maxsize=None)
def _mass_factor(fam):
    return Factor(interval_matrix(fam, fam), "mass", fam, fam)


@lru_cache(maxsize=None)
def _stiff_factor(fam):
    return Factor(interval_matrix(fam, fam, True, True), "stiff", fam, fam)


@lru_cache(maxsize=None)
def _generic_factor(test, trial, dt, ds):
    if test == trial and dt == ds:
        return _stiff_factor(test) if dt else _mass_factor(test)
    return Factor(interval_matrix(test, trial, dt, ds), "dense", test, trial)


@lru_cache(maxsize=None)
def _trace_factor(test, trial, end_t, end_s, dt, ds):
    vt = (test.ref.trace_derivatives if dt else test.ref.trace_values)[end_t]
    vs = (trial.ref.trace_derivatives if ds else trial.ref.trace_values)[end_s]
    M = np.outer(vt, vs)
    M.flags.writeable = False
    return Factor(M, "trace", test, trial, (end_t, end_s), (dt, ds))


@dataclass
class KronTerm:
    """``sum_t coef[t] * R_{rows[t]}^T (F_z x F_y x F_x) R_{cols[t]}``."""

    test_comp: int
    trial_comp: int
    factors: tuple  # per axis, x first
    rows: np.ndarray
    cols: np.ndarray
    coef: np.ndarray

    def scaled(self, c):
        return KronTerm(self.test_comp, self.trial_comp, self.factors, self.rows, self.cols,
                        self.coef * c)


def _kron_local(factors, transformed):
    mats = [np.where(f.pattern(transformed), f.transformed() if transformed else f.matrix, 0.0)
            for f in factors]
    M = sp.csr_matrix(mats[-1])
    for A in mats[-2::-1]:
        M = sp.kron(M, sp.csr_matrix(A), format="csr")
    return M.tocoo()


@dataclass
class DenseTerm:
    """Dense cell matrices acting on all components of a cell."""

    cells: np.ndarray
    mats: np.ndarray  # (nt, nloc_test, nloc_trial)

    def scaled(self, c):
        return DenseTerm(self.cells, self.mats * c)


def _local_S(space):
    """Block-diagonal cell change of basis (dense), all components."""
    blocks = []
    for fams in space.components:
        M = np.ones((1, 1))
        for f in fams[::-1]:
            M = np.kron(M, f.fdm)
        blocks.append(M)
    return _blockdiag(blocks)


def _blockdiag(blocks):
    n = sum(b.shape[0] for b in blocks)
    m = sum(b.shape[1] for b in blocks)
    out = np.zeros((n, m))
    i = j = 0
    for b in blocks:
        out[i:i + b.shape[0], j:j + b.shape[1]] = b
        i += b.shape[0]
        j += b.shape[1]
    return out


class FormOperator:
    """Bilinear form between two spaces as a sum of Kronecker and dense terms.

    Vectors live on the full (unconstrained) DOF numbering; use
    :meth:`restrict` helpers to act on free DOFs only.
    """

    def __init__(self, test: Space, trial: Space, kron=(), dense=()):
        self.test = test
        self.trial = trial
        self.kron = list(kron)
        self.dense = list(dense)

    @property
    def shape(self):
        return (self.test.ndofs, self.trial.ndofs)

    def __add__(self, other):
        if other.test is not self.test or other.trial is not self.trial:
            raise ValueError("operators act on different spaces")
        return FormOperator(self.test, self.trial, self.kron + other.kron, self.dense + other.dense)

    def scaled(self, c):
        return FormOperator(self.test, self.trial, [t.scaled(c) for t in self.kron],
                            [t.scaled(c) for t in self.dense])

    # -- application -----------------------------------------------------------

    def _maps(self, space, transformed):
        if transformed:
            return space.cell_fdm_dofs, space.cell_fdm_sign
        return space.cell_dofs, None

    def apply(self, x, transformed=False):
        """Matrix-free product on the full DOF vector ``x``."""
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.trial.ndofs:
            raise ValueError(f"vector of length {x.shape[0]}, expected {self.trial.ndofs}")
        tdofs, tsgn = self._maps(self.test, transformed)
        sdofs, ssgn = self._maps(self.trial, transformed)
        y = np.zeros(self.test.ndofs)
        for t in self.kron:
            so, se = self.trial.offsets[t.trial_comp], self.trial.offsets[t.trial_comp + 1]
            to, te = self.test.offsets[t.test_comp], self.test.offsets[t.test_comp + 1]
            X = x[sdofs[t.cols, so:se]]
            if ssgn is not None:
                X = X * ssgn[t.cols, so:se]
            X = X.reshape((len(t.cols),) + self.trial.shapes[t.trial_comp])
            mats = [f.transformed() if transformed else f.matrix for f in t.factors]
            Y = _batched(mats[::-1], X) * t.coef.reshape((-1,) + (1,) * self.test.dim)
            Y = Y.reshape(len(t.rows), -1)
            if tsgn is not None:
                Y = Y * tsgn[t.rows, to:te]
            y += np.bincount(tdofs[t.rows, to:te].ravel(), Y.ravel(), minlength=len(y))
        for t in self.dense:
            Xl = x[sdofs[t.cells]]
            if ssgn is not None:
                Xl = Xl * ssgn[t.cells]
            mats = t.mats
            if transformed:
                St, Ss = _local_S(self.test), _local_S(self.trial)
                mats = np.einsum("ai,kab,bj->kij", St, mats, Ss)
            Y = np.einsum("kij,kj->ki", mats, Xl)
            if tsgn is not None:
                Y = Y * tsgn[t.cells]
            y += np.bincount(tdofs[t.cells].ravel(), Y.ravel(), minlength=len(y))
        return y

    def matrix(self, transformed=False):
        """Assemble into a sparse CSR matrix on the full DOF numbering.

        In the FDM basis only the entries in the symbolic pattern of each
        factor are generated.
        """
        tdofs, tsgn = self._maps(self.test, transformed)
        sdofs, ssgn = self._maps(self.trial, transformed)
        R, C, V = [], [], []
        for t in self.kron:
            so = self.trial.offsets[t.trial_comp]
            to = self.test.offsets[t.test_comp]
            L = _kron_local(t.factors, transformed)
            li, lj, lv = to + L.row, so + L.col, L.data
            rows = tdofs[t.rows][:, li]
            cols = sdofs[t.cols][:, lj]
            vals = t.coef[:, None] * lv[None, :]
            if transformed:
                vals = vals * tsgn[t.rows][:, li] * ssgn[t.cols][:, lj]
            R.append(rows.ravel())
            C.append(cols.ravel())
            V.append(vals.ravel())
        for t in self.dense:
            mats = t.mats
            if transformed:
                St, Ss = _local_S(self.test), _local_S(self.trial)
                mats = np.einsum("ai,kab,bj->kij", St, mats, Ss)
                mats = mats * tsgn[t.cells][:, :, None] * ssgn[t.cells][:, None, :]
            nt, ni, nj = mats.shape
            R.append(np.repeat(tdofs[t.cells], nj, axis=1).ravel())
            C.append(np.tile(sdofs[t.cells], (1, ni)).ravel())
            V.append(mats.ravel())
        if not R:
            return sp.csr_matrix(self.shape)
        A = sp.coo_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))),
                          shape=self.shape).tocsr()
        A.sum_duplicates()
        A.sort_indices()
        return A

    def free_matrix(self, transformed=False):
        A = self.matrix(transformed)
        return A[self.test.free_dofs][:, self.trial.free_dofs].tocsr()

    def apply_free(self, x, transformed=False):
        full = np.zeros(self.trial.ndofs)
        full[self.trial.free_dofs] = x
        return self.apply(full, transformed)[self.test.free_dofs]

    # -- coarse projection -----------------------------------------------------

    def galerkin(self, coarse_test: Space, coarse_trial: Space):
        """Galerkin projection onto nested coarse spaces on the same mesh."""
        kron = []
        for t in self.kron:
            facs = []
            for a, f in enumerate(t.factors):
                ct = coarse_test.components[t.test_comp][a]
                cs = coarse_trial.components[t.trial_comp][a]
                Pt = _interp_1d(ct, f.test)
                Ps = _interp_1d(cs, f.trial)
                facs.append(Factor(Pt.T @ f.matrix @ Ps, "dense", ct, cs))
            kron.append(KronTerm(t.test_comp, t.trial_comp, tuple(facs), t.rows, t.cols, t.coef))
        dense = []
        if self.dense:
            Pt = _local_interp(coarse_test, self.test)
            Ps = _local_interp(coarse_trial, self.trial)
            for t in self.dense:
                dense.append(DenseTerm(t.cells, np.einsum("ai,kab,bj->kij", Pt, t.mats, Ps)))
        return FormOperator(coarse_test, coarse_trial, kron, dense)


def _batched(mats_slow_first, X):
    Y = X
    for axis, F in enumerate(mats_slow_first):
        Y = np.moveaxis(np.tensordot(F, Y, axes=([1], [axis + 1])), 0, axis + 1)
    return Y


# --------------------------------------------------------------------------
# geometry helpers


def _geometry(mesh, npts=4):
    key = (id(mesh), npts)
    hit = _GEOM.get(key)
    if hit is not None and hit[0] is mesh:
        return hit[1]
    g = mesh_geometry(mesh, npts)
    _GEOM[key] = (mesh, g)
    return g


_GEOM = {}


def penalty_parameter(p, d):
    """Interior penalty coefficient ``(p+1)(p+d)``."""
    return (p + 1) * (p + d)


# --------------------------------------------------------------------------
# Kronecker builders (Cartesian cells)


def _kron_diffusion(space, comp, mu, cells, test_space=None, test_comp=None):
    """``sum_a mu[:, a] * (mass x .. stiff_a .. x mass)`` on the given cells."""
    fams = space.components[comp]
    terms = []
    for a in range(space.dim):
        facs = tuple(_stiff_factor(f) if b == a else _mass_factor(f) for b, f in enumerate(fams))
        terms.append(KronTerm(comp, comp, facs, cells, cells, np.asarray(mu[:, a], float)))
    return terms


def _kron_products(test, trial, items, cells, L):
    """Volume terms ``sum c * int D_alpha v_i D_beta u_j`` on Cartesian cells.

    ``items`` holds tuples ``(i, alpha, j, beta, c)``, derivative index
    ``None`` meaning the function value.  ``L`` are the cells' half lengths.
    """
    acc = {}
    for i, al, j, be, c in items:
        key = (i, al, j, be)
        acc[key] = acc.get(key, 0.0) + c
    d = test.dim
    vol = np.prod(L, axis=1)
    terms = []
    for (i, al, j, be), c in acc.items():
        if c == 0:
            continue
        coef = c * vol
        if al is not None:
            coef = coef / L[:, al]
        if be is not None:
            coef = coef / L[:, be]
        facs = tuple(_generic_factor(test.components[i][a], trial.components[j][a], al == a, be == a)
                     for a in range(d))
        terms.append(KronTerm(i, j, facs, cells, cells, coef))
    return terms


def _cartesian_cells(mesh):
    g = _geometry(mesh)
    cart = np.flatnonzero(g["kind"] == "cartesian")
    return cart, g["half_lengths"][cart]


def _facet_pairs(mesh):
    """Interior facets as (K0, side0, K1, side1, axis) on aligned cells and
    boundary facets as (K, side, axis, tag)."""
    inner, bnd = [], []
    for fc in mesh.facets:
        if fc.is_boundary:
            K, f = fc.cells[0]
            bnd.append((K, f % 2, f // 2, fc.tag))
        else:
            (K0, f0), (K1, f1) = fc.cells
            if f0 // 2 != f1 // 2 or f0 % 2 == f1 % 2:
                raise NotImplementedError("facet terms need cells with aligned reference axes")
            inner.append((K0, f0 % 2, K1, f1 % 2, f0 // 2))
    return inner, bnd


def _sipg_terms(space, comp, kappa, mu, eta, cells_ok=None):
    """Symmetric interior penalty terms of ``kappa * grad u . grad v`` for a
    component that is discontinuous across the facets normal to some axes.

    ``mu`` holds per-cell axis coefficients; the penalty uses half of
    ``eta`` because ``h_e^{-1}`` on the reference interval is ``1/2``.
    """
    mesh = space.mesh
    fams = space.components[comp]
    inner, bnd = _facet_pairs(mesh)
    eta_ref = 0.5 * eta
    groups = {}

    def add(a, Kr, sr, Ks, ss, kind, c):
        groups.setdefault((a, sr, ss, kind), ([], [], []))
        g = groups[(a, sr, ss, kind)]
        g[0].append(Kr)
        g[1].append(Ks)
        g[2].append(c)

    for K0, s0, K1, s1, a in inner:
        if fams[a].kind != "dg":
            continue
        m = (kappa * mu[K0, a], kappa * mu[K1, a])
        Ks, sides = (K0, K1), (s0, s1)
        for r in range(2):
            for s in range(2):
                sg = 0.5 * (1.0 if r == s else -1.0)
                add(a, Ks[r], sides[r], Ks[s], sides[s], "vv", sg * eta_ref * (m[0] + m[1]))
                add(a, Ks[r], sides[r], Ks[s], sides[s], "vd", -sg * m[s])
                add(a, Ks[r], sides[r], Ks[s], sides[s], "dv", -sg * m[r])
    for K, s, a, tag in bnd:
        if fams[a].kind != "dg" or tag != "dirichlet":
            continue
        m = kappa * mu[K, a]
        add(a, K, s, K, s, "vv", eta_ref * m)
        add(a, K, s, K, s, "vd", -m)
        add(a, K, s, K, s, "dv", -m)
    terms = []
    for (a, sr, ss, kind), (rows, cols, coef) in sorted(groups.items()):
        dt, ds = kind == "dv", kind == "vd"
        facs = tuple(_trace_factor(f, f, sr, ss, dt, ds) if b == a else _mass_factor(f)
                     for b, f in enumerate(fams))
        terms.append(KronTerm(comp, comp, facs, np.array(rows), np.array(cols), np.array(coef)))
    return terms


def _rt_cross_terms(space, kappa):
    """Facet terms ``-kappa([v_t]{d_t u_n} + {d_t v_n}[u_t])`` of the symmetric
    interior penalty form of ``2 kappa eps(u):eps(v)`` on 2D Cartesian cells."""
    mesh = space.mesh
    if mesh.dim != 2:
        raise NotImplementedError("RT facet coupling terms are implemented in 2D")
    inner, _ = _facet_pairs(mesh)
    groups = {}
    for K0, s0, K1, s1, a in inner:
        t = 1 - a
        Ks, sides = (K0, K1), (s0, s1)
        for r in range(2):
            for s in range(2):
                # jump sign of cell r seen from the cell whose outward normal is +e_a
                sr = 1.0 if sides[r] == 1 else -1.0
                ss = 1.0 if sides[s] == 1 else -1.0
                key1 = (a, t, a, sides[r], sides[s])  # test tangential, trial normal
                groups.setdefault(key1, ([], [], []))
                g = groups[key1]
                g[0].append(Ks[r]), g[1].append(Ks[s]), g[2].append(-0.5 * kappa * sr)
                key2 = (a, a, t, sides[r], sides[s])  # test normal, trial tangential
                groups.setdefault(key2, ([], [], []))
                g = groups[key2]
                g[0].append(Ks[r]), g[1].append(Ks[s]), g[2].append(-0.5 * kappa * ss)
    terms = []
    for (a, i, j, er, es), (rows, cols, coef) in sorted(groups.items()):
        t = 1 - a
        facs = [None, None]
        ft, fs = space.components[i], space.components[j]
        facs[a] = _trace_factor(ft[a], fs[a], er, es, False, False)
        # tangential derivative sits on the normal component
        facs[t] = _generic_factor(ft[t], fs[t], i == a, j == a)
        terms.append(KronTerm(i, j, tuple(facs), np.array(rows), np.array(cols), np.array(coef)))
    return terms


# --------------------------------------------------------------------------
# dense quadrature builders (general multilinear cells)


def _tabulate_space(space, comp, pts, deriv_axis=None):
    """Values (or reference derivatives) of a component's basis at tensor points."""
    fams = space.components[comp]
    d = space.dim
    cols = []
    for a, f in enumerate(fams):
        cols.append(f.ref.tabulate(pts, deriv_axis == a))
    M = np.ones((1, 1))
    for T in cols[::-1]:
        M = np.kron(M, T)
    return M  # (nq, nloc_comp), points z-major


def _dense_gradients(space, npts):
    d = space.dim
    rule = gauss_legendre_rule(npts)
    phi = _tabulate_space(space, 0, rule.points)
    dphi = np.stack([_tabulate_space(space, 0, rule.points, a) for a in range(d)], axis=-1)
    return phi, dphi  # (nq, n), (nq, n, d)


def _cell_jacobians(mesh, cells, npts):
    d = mesh.dim
    pts, w = _tensor_rule(d, npts)
    _, dN = _shape_functions(d, pts)
    X = mesh.vertices[mesh.cells[cells]]
    DF = np.einsum("kci,qca->kqia", X, dN)
    return DF, w


def _dense_laplace(space, cells, kappa=1.0):
    if space.ncomp != 1 or any(f.kind != "cg" for f in space.components[0]):
        raise NotImplementedError("quadrature assembly supports continuous Q_p spaces")
    p = space.components[0][0].degree
    npts = p + 2
    _, dphi = _dense_gradients(space, npts)
    DF, w = _cell_jacobians(space.mesh, cells, npts)
    det = np.linalg.det(DF)
    inv = np.linalg.inv(DF)
    G = np.abs(det)[..., None, None] * np.einsum("kqai,kqbi->kqab", inv, inv)
    mats = kappa * np.einsum("q,qia,kqab,qjb->kij", w, dphi, G, dphi)
    return DenseTerm(np.asarray(cells), mats)


def _dense_elasticity(space, cells, mu, lam):
    p = space.components[0][0].degree
    d = space.dim
    npts = p + 2
    _, dphi = _dense_gradients(_scalar_view(space), npts)
    DF, w = _cell_jacobians(space.mesh, cells, npts)
    det = np.linalg.det(DF)
    inv = np.linalg.inv(DF)  # inv[k,q,a,i] = dxhat_a/dx_i
    grad = np.einsum("qna,kqai->kqni", dphi, inv)  # physical gradients
    wd = w[None, :] * np.abs(det)
    n = dphi.shape[1]
    mats = np.zeros((len(cells), d * n, d * n))
    for i in range(d):
        for j in range(d):
            blk = np.zeros((len(cells), n, n))
            if i == j:
                blk += mu * np.einsum("kq,kqma,kqna->kmn", wd, grad, grad)
            blk += mu * np.einsum("kq,kqm,kqn->kmn", wd, grad[..., j], grad[..., i])
            blk += lam * np.einsum("kq,kqm,kqn->kmn", wd, grad[..., i], grad[..., j])
            mats[:, i * n:(i + 1) * n, j * n:(j + 1) * n] = blk
    return DenseTerm(np.asarray(cells), mats)


class _ScalarView:
    def __init__(self, space):
        self.components = (space.components[0],)
        self.dim = space.dim
        self.mesh = space.mesh
        self.ncomp = 1


def _scalar_view(space):
    return _ScalarView(space)


# --------------------------------------------------------------------------
# public builders


def poisson_operator(space, kappa=1.0, eta=None):
    """Stiffness form of ``kappa * grad u . grad v`` (plus SIPG for DG)."""
    mesh = space.mesh
    g = _geometry(mesh)
    cart = g["kind"] == "cartesian"
    cells = np.flatnonzero(cart)
    kron = []
    if len(cells):
        mu = np.zeros((mesh.num_cells, mesh.dim))
        mu[cells] = g["mu"][cells]
        kron = _kron_diffusion(space, 0, kappa * mu[cells], cells)
    dense = []
    if (~cart).any():
        dense.append(_dense_laplace(space, np.flatnonzero(~cart), kappa))
    if any(f.kind == "dg" for f in space.components[0]):
        if (~cart).any():
            raise NotImplementedError("DG facet terms are implemented for Cartesian cells")
        eta = penalty_parameter(space.components[0][0].degree, mesh.dim) if eta is None else eta
        kron += _sipg_terms(space, 0, kappa, g["mu"], eta)
    return FormOperator(space, space, kron, dense)


def poisson_surrogate(space, kappa=1.0, eta=None):
    """Separable Kronecker surrogate with cell-averaged metric coefficients.

    Identical to :func:`poisson_operator` on Cartesian cells.
    """
    mesh = space.mesh
    mu = _geometry(mesh)["mu"]
    cells = np.arange(mesh.num_cells)
    kron = _kron_diffusion(space, 0, kappa * mu, cells)
    if any(f.kind == "dg" for f in space.components[0]):
        eta = penalty_parameter(space.components[0][0].degree, mesh.dim) if eta is None else eta
        kron += _sipg_terms(space, 0, kappa, mu, eta)
    return FormOperator(space, space, kron)


def _check_lambda(lam):
    if not np.isfinite(lam):
        raise ValueError("the primal elasticity form needs a finite lambda")


def _is_rt(space):
    return any(f.kind == "dg" for c in space.components for f in c)


def elasticity_operator(space, mu=1.0, lam=0.0, eta=None):
    """``2 mu eps(u):eps(v) + lam div u div v`` on a vector Q_p or RT_p space.

    On RT_p the tangential discontinuity is handled by symmetric interior
    penalty with coefficient ``eta`` (default ``(p+1)(p+d)``).
    """
    _check_lambda(lam)
    mesh = space.mesh
    d = mesh.dim
    g = _geometry(mesh)
    cart = g["kind"] == "cartesian"
    cells = np.flatnonzero(cart)
    kron, dense = [], []
    if len(cells):
        items = []
        for i in range(d):
            for j in range(d):
                items.append((i, j, i, j, mu))
                items.append((i, j, j, i, mu))
                items.append((i, i, j, j, lam))
        kron = _kron_products(space, space, items, cells, g["half_lengths"][cells])
    if (~cart).any():
        if _is_rt(space):
            raise NotImplementedError("RT spaces are implemented on Cartesian cells")
        dense.append(_dense_elasticity(space, np.flatnonzero(~cart), mu, lam))
    if _is_rt(space):
        p = space.degree
        eta = penalty_parameter(p, d) if eta is None else eta
        for c in range(d):
            kron += _sipg_terms(space, c, mu, g["mu"], eta)
        kron += _rt_cross_terms(space, mu)
    return FormOperator(space, space, kron, dense)


def elasticity_surrogate(space, mu=1.0, lam=0.0, eta=None):
    """Separable displacement-component (SDC) surrogate.

    Component ``j`` keeps ``mu grad v_j . grad u_j + (mu + lam) d_j v_j d_j u_j``
    with cell-averaged metric coefficients; couplings between components are
    dropped.
    """
    _check_lambda(lam)
    mesh = space.mesh
    d = mesh.dim
    geo = _geometry(mesh)["mu"]
    cells = np.arange(mesh.num_cells)
    kron = []
    for j in range(space.ncomp):
        coef = mu * geo.copy()
        coef[:, j] += (mu + lam) * geo[:, j]
        kron += _kron_diffusion(space, j, coef, cells)
    if _is_rt(space):
        p = space.degree
        eta = penalty_parameter(p, d) if eta is None else eta
        for c in range(d):
            kron += _sipg_terms(space, c, mu, geo, eta)
    return FormOperator(space, space, kron)


def divergence_operator(pspace, uspace):
    """``b(q, u) = int q div u`` (rows: pressure, columns: displacement)."""
    mesh = uspace.mesh
    cart, L = _cartesian_cells(mesh)
    if len(cart) != mesh.num_cells:
        raise NotImplementedError("mixed forms are implemented on Cartesian cells")
    items = [(0, None, i, i, 1.0) for i in range(uspace.ncomp)]
    return FormOperator(pspace, uspace, _kron_products(pspace, uspace, items, cart, L))


def pressure_mass(pspace, scale=1.0):
    mesh = pspace.mesh
    cart, L = _cartesian_cells(mesh)
    if len(cart) != mesh.num_cells:
        raise NotImplementedError("mixed forms are implemented on Cartesian cells")
    items = [(0, None, 0, None, scale)]
    return FormOperator(pspace, pspace, _kron_products(pspace, pspace, items, cart, L))


def load_vector(space, f, npts=None):
    """``int f . v`` for a callable ``f(x) -> (nq, ncomp)`` or a constant vector."""
    mesh = space.mesh
    d = space.dim
    p = max(fm.degree for c in space.components for fm in c)
    npts = p + 2 if npts is None else npts
    pts, w = _tensor_rule(d, npts)
    N, dN = _shape_functions(d, pts)
    X = mesh.vertices[mesh.cells]
    xq = np.einsum("qc,kci->kqi", N, X)
    det = np.abs(np.linalg.det(np.einsum("kci,qca->kqia", X, dN)))
    if callable(f):
        vals = np.asarray(f(xq.reshape(-1, d)), float).reshape(len(X), len(w), -1)
    else:
        vals = np.broadcast_to(np.asarray(f, float).reshape(1, 1, -1), (len(X), len(w), space.ncomp))
    rule = gauss_legendre_rule(npts)
    b = np.zeros(space.ndofs)
    for c in range(space.ncomp):
        T = _tabulate_space(space, c, rule.points)
        loc = np.einsum("qn,kq->kn", T, vals[:, :, c] * det * w)
        b += np.bincount(space.component_dofs(c).ravel(), loc.ravel(), minlength=space.ndofs)
    return b


# --------------------------------------------------------------------------
# transfer between nested spaces


@lru_cache(maxsize=None)
def _interp_1d(coarse, fine):
    """Coefficients of the coarse family basis in the fine nodal basis."""
    if fine.kind == "cg" and coarse.kind == "dg":
        raise ValueError("cannot interpolate a discontinuous family into a continuous one")
    M = coarse.ref.tabulate(fine.nodes)
    M.flags.writeable = False
    return M


def _local_interp(coarse, fine):
    blocks = []
    for cf, ff in zip(coarse.components, fine.components):
        M = np.ones((1, 1))
        for a in reversed(range(len(cf))):
            M = np.kron(M, _interp_1d(cf[a], ff[a]))
        blocks.append(M)
    return _blockdiag(blocks)


def prolongation(coarse: Space, fine: Space):
    """Sparse interpolation from ``coarse`` to ``fine`` (full DOF numbering)."""
    if coarse.mesh is not fine.mesh:
        raise ValueError("spaces live on different meshes")
    P = _local_interp(coarse, fine)
    li, lj = np.nonzero(np.abs(P) > 0)
    rows = fine.cell_dofs[:, li].ravel()
    cols = coarse.cell_dofs[:, lj].ravel()
    vals = np.broadcast_to(P[li, lj], (fine.mesh.num_cells, len(li))).ravel()
    key = rows * coarse.ndofs + cols
    _, first = np.unique(key, return_index=True)
    return sp.csr_matrix((vals[first], (rows[first], cols[first])),
                         shape=(fine.ndofs, coarse.ndofs))


# --------------------------------------------------------------------------
# FDM change of basis


class ChangeOfBasis:
    """Global FDM change of basis ``S = W^{-1} sum_K R_K^T (x S_hat) R~_K``.

    ``apply`` maps FDM coefficients to nodal values, ``apply_T`` is the exact
    transpose.  Both act on free DOFs when ``free=True``.
    """

    def __init__(self, space: Space):
        self.space = space
        self._factors = [[f.fdm for f in fams[::-1]] for fams in space.components]

    def _cellwise(self, x, forward):
        sp_ = self.space
        src, dst = (sp_.cell_fdm_dofs, sp_.cell_dofs) if forward else (sp_.cell_dofs, sp_.cell_fdm_dofs)
        y = np.zeros(sp_.ndofs)
        nc = sp_.mesh.num_cells
        for c in range(sp_.ncomp):
            sl = slice(sp_.offsets[c], sp_.offsets[c + 1])
            X = x[src[:, sl]]
            if forward:
                X = X * sp_.cell_fdm_sign[:, sl]
                mats = self._factors[c]
            else:
                mats = [M.T for M in self._factors[c]]
            Y = _batched(mats, X.reshape((nc,) + sp_.shapes[c])).reshape(nc, -1)
            if not forward:
                Y = Y * sp_.cell_fdm_sign[:, sl]
            y += np.bincount(dst[:, sl].ravel(), Y.ravel(), minlength=sp_.ndofs)
        return y

    def apply(self, xt, free=True):
        sp_ = self.space
        if free:
            full = np.zeros(sp_.ndofs)
            full[sp_.free_dofs] = xt
            xt = full
        y = self._cellwise(xt, True) / sp_.multiplicity
        return y[sp_.free_dofs] if free else y

    def apply_T(self, y, free=True):
        sp_ = self.space
        if free:
            full = np.zeros(sp_.ndofs)
            full[sp_.free_dofs] = y
            y = full
        x = self._cellwise(y / sp_.multiplicity, False)
        return x[sp_.free_dofs] if free else x

    def matrix(self, free=True):
        n = self.space.nfree if free else self.space.ndofs
        cols = [self.apply(e, free) for e in np.eye(n)]
        return np.array(cols).T


# --------------------------------------------------------------------------
# misc


def piola_map(DF, uhat):
    """Contravariant Piola transform ``u = DF uhat / det DF`` at points."""
    DF = np.asarray(DF)
    uhat = np.asarray(uhat)
    det = np.linalg.det(DF)
    return np.einsum("...ij,...j->...i", DF, uhat) / det[..., None]


def stencil_counts(A, rows=None):
    """Nonzeros per row of a sparse matrix, optionally restricted to rows."""
    A = sp.csr_matrix(A)
    A.eliminate_zeros()
    counts = np.diff(A.indptr)
    return counts if rows is None else counts[rows]


# --------------------------------------------------------------------------
# element-level kernels and thin global drivers


def _as_ref(ref):
    return reference_operators(int(ref), "gll") if np.isscalar(ref) else ref


def cell_matrix_cartesian(ref, mu):
    """Kronecker cell stiffness ``sum_j mu[j] * (B x .. A_j .. x B)``.

    Factors are listed slowest axis first, so the axis-0 factor is last.
    """
    from .sparsela import KronOperator

    ref = _as_ref(ref)
    mu = np.atleast_1d(np.asarray(mu, float))
    d = len(mu)
    terms = []
    for j in range(d):
        terms.append(tuple(ref.A_hat if a == j else ref.B_hat for a in range(d - 1, -1, -1)))
    return KronOperator(terms, list(mu))


def _tensor_tabulate(ref, pts, deriv_axis=None):
    pts = np.atleast_2d(pts)
    out = np.ones((len(pts), 1))
    for a in range(pts.shape[1] - 1, -1, -1):
        T = ref.tabulate(pts[:, a], derivative=deriv_axis == a)
        out = (out[:, :, None] * T[:, None, :]).reshape(len(pts), -1)
    return out


def cell_matrix_quadrature(geom, ref, form="poisson", mu=1.0, lam=0.0):
    """Dense cell matrix of the true form by quadrature on ``geom``'s rule.

    ``form`` is ``"poisson"`` (``mu grad u . grad v``) or ``"elasticity"``
    (``2 mu eps(u):eps(v) + lam div u div v``, component-major blocks).
    The rule stored in ``geom`` should have at least ``p + 2`` points per
    axis for general cells.
    """
    ref = _as_ref(ref)
    if np.any(geom.detJ <= 0):
        raise ValueError(f"cell {geom.cell} has a non-positive Jacobian")
    d = geom.points.shape[1]
    dphi = np.stack([_tensor_tabulate(ref, geom.points, a) for a in range(d)], axis=-1)
    w = geom.weights
    if form == "poisson":
        return mu * np.einsum("q,qia,qab,qjb->ij", w, dphi, geom.metric, dphi)
    if form != "elasticity":
        raise ValueError(f"unknown form {form!r}")
    inv = np.linalg.inv(geom.jacobian)
    grad = np.einsum("qna,qai->qni", dphi, inv)
    wd = w * np.abs(geom.detJ)
    n = dphi.shape[1]
    K = np.zeros((d * n, d * n))
    for i in range(d):
        for j in range(d):
            blk = mu * np.einsum("q,qm,qn->mn", wd, grad[..., j], grad[..., i])
            blk += lam * np.einsum("q,qm,qn->mn", wd, grad[..., i], grad[..., j])
            if i == j:
                blk += mu * np.einsum("q,qma,qna->mn", wd, grad, grad)
            K[i * n:(i + 1) * n, j * n:(j + 1) * n] = blk
    return K


def elasticity_primal_cell(geom, ref, mu=1.0, lam=0.0):
    """Vector-valued cell matrix of ``2 mu eps(u):eps(v) + lam div u div v``."""
    return cell_matrix_quadrature(geom, ref, "elasticity", mu, lam)


def sipg_facet_dirichlet(ref, mu_e, eta, side):
    """Boundary facet matrix ``mu_e (eta phi phi^T - phi dphi^T - dphi phi^T)``.

    ``side`` is 0 for the facet at -1 and 1 for +1; derivatives are outward
    normal derivatives on the reference interval and ``eta`` already
    includes the reciprocal reference facet length.
    """
    if eta <= 0:
        raise ValueError("the penalty must be positive")
    ref = _as_ref(ref)
    phi = ref.trace_values[side]
    dphi = ref.trace_derivatives[side]
    return mu_e * (eta * np.outer(phi, phi) - np.outer(phi, dphi) - np.outer(dphi, phi))


def sipg_facet_interior(ref, mu0, mu1, eta, sides):
    """Interior facet blocks ``E[r, s]`` coupling test cell r and trial cell s."""
    if eta <= 0:
        raise ValueError("the penalty must be positive")
    ref = _as_ref(ref)
    if sides[0] == sides[1]:
        raise ValueError("neighbouring cells must meet at opposite reference sides")
    m = (mu0, mu1)
    n = ref.n
    E = np.zeros((2, 2, n, n))
    for r in range(2):
        for s in range(2):
            sg = 0.5 if r == s else -0.5
            pr, ps = ref.trace_values[sides[r]], ref.trace_values[sides[s]]
            dr, ds = ref.trace_derivatives[sides[r]], ref.trace_derivatives[sides[s]]
            E[r, s] = sg * (eta * (m[0] + m[1]) * np.outer(pr, ps)
                            - m[s] * np.outer(pr, ds) - m[r] * np.outer(dr, ps))
    return E


def assemble_global(space, cell_mats, facet_mats=(), reduce=False):
    """Direct stiffness summation of per-cell (and per-facet) matrices.

    ``cell_mats`` has shape ``(ncells, nloc, nloc)`` in the local order of
    ``space.cell_dofs``; ``facet_mats`` holds ``(row_dofs, col_dofs, M)``
    triples.  With ``reduce=True`` the Dirichlet rows and columns are
    dropped.
    """
    cd = space.cell_dofs
    cell_mats = np.asarray(cell_mats, float)
    if cell_mats.shape != (cd.shape[0], cd.shape[1], cd.shape[1]):
        raise ValueError(f"cell matrices of shape {cell_mats.shape} do not match the DOF map {cd.shape}")
    n = cd.shape[1]
    rows = [np.repeat(cd, n, axis=1).ravel()]
    cols = [np.tile(cd, (1, n)).ravel()]
    vals = [cell_mats.ravel()]
    for r, c, M in facet_mats:
        r, c = np.asarray(r), np.asarray(c)
        rows.append(np.repeat(r, len(c)))
        cols.append(np.tile(c, len(r)))
        vals.append(np.asarray(M, float).ravel())
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(space.ndofs, space.ndofs)).tocsr()
    A.sum_duplicates()
    if reduce:
        f = space.free_dofs
        return A[f][:, f].tocsr()
    return A


def eliminate_dirichlet(space, A, f, u0=None):
    """Reduce ``A u = f`` to the free DOFs, lifting Dirichlet values ``u0``."""
    A = sp.csr_matrix(A)
    fr, fx = space.free_dofs, np.flatnonzero(~space.free)
    rhs = np.asarray(f, float)[fr]
    if u0 is not None:
        u0 = np.asarray(u0, float)
        rhs = rhs - A[fr][:, fx] @ u0[fx]
    return A[fr][:, fr].tocsr(), rhs


def transformed_assembly(surrogate):
    """Transformed surrogate matrix on the free DOFs and the change of basis."""
    return surrogate.free_matrix(transformed=True), ChangeOfBasis(surrogate.trial)


def mixed_blocks(uspace, pspace, mu=1.0, lam=np.inf, eta=None):
    """Blocks ``(A, B, C, M_p)`` of the mixed elasticity system on free DOFs.

    ``A`` is ``2 mu eps:eps``, ``B`` the divergence (pressure rows), ``C``
    the pressure mass divided by ``lam`` (``None`` when ``lam`` is infinite)
    and ``M_p`` the pressure mass matrix.
    """
    d = uspace.dim
    if _is_rt(uspace):
        if d != 2:
            raise ValueError("the RT x DQ pair is supported in 2D only")
        want = uspace.degree - 1
    else:
        want = uspace.degree - 2
    if pspace.degree != want:
        raise ValueError(f"pressure degree {pspace.degree} does not match the pair (expected {want})")
    if not lam > 0:
        raise ValueError("lambda must be positive in the mixed form")
    A = elasticity_operator(uspace, mu, 0.0, eta).free_matrix()
    B = divergence_operator(pspace, uspace).free_matrix()
    M = pressure_mass(pspace).free_matrix()
    C = None if np.isinf(lam) else (M / lam).tocsr()
    return A, B, C, M


def expand_free(space, xf):
    """Full coefficient vector from free-DOF values (zeros on Dirichlet DOFs)."""
    x = np.zeros(space.ndofs)
    x[space.free_dofs] = xf
    return x


def evaluate(space, x, npts, deriv_axis=None):
    """Component values (or reference derivatives) at tensor Gauss points.

    Returns an array ``(ncomp, ncells, npts**d)``.
    """
    pts = gauss_legendre_rule(npts).points
    x = np.asarray(x, float)
    out = []
    for c in range(space.ncomp):
        T = _tabulate_space(space, c, pts, deriv_axis)
        out.append(x[space.component_dofs(c)] @ T.T)
    return np.array(out)


def divergence_values(space, x, npts=None):
    """Pointwise divergence of a vector field on Cartesian cells, ``(ncells, nq)``."""
    mesh = space.mesh
    cart, L = _cartesian_cells(mesh)
    if len(cart) != mesh.num_cells:
        raise NotImplementedError("pointwise divergence is implemented on Cartesian cells")
    npts = space.degree + 1 if npts is None else npts
    pts = gauss_legendre_rule(npts).points
    div = 0.0
    for i in range(space.ncomp):
        T = _tabulate_space(space, i, pts, deriv_axis=i)
        div = div + (np.asarray(x, float)[space.component_dofs(i)] @ T.T) / L[:, [i]]
    return div
