"""Conforming quadrilateral/hexahedral meshes with multilinear cell maps.

Cells list their ``2**d`` corner vertices in tensor order: corner ``c`` sits
at reference coordinates ``x_a = -1 + 2 * ((c >> a) & 1)``, so in 2D the
order is (0,0), (1,0), (0,1), (1,1).  Local facet ``2*a + side`` is the facet
normal to reference axis ``a`` at ``x_a = -1`` (side 0) or ``+1`` (side 1).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np

from .refelem import gauss_legendre_rule

__all__ = [
    "Mesh",
    "Facet",
    "PatchTopology",
    "CellGeometry",
    "entity_corners",
    "cartesian_mesh",
    "parallelogram_mesh",
    "pentagon_mesh",
    "ring_mesh",
    "refine_uniform",
    "vertex_star",
    "cell_geometry",
    "mesh_geometry",
    "surrogate_coeffs",
    "reciprocal_facet_length",
    "load_mesh",
    "save_mesh",
    "mesh_from_dict",
    "mesh_to_dict",
]

DEFAULT_TAG = "dirichlet"
TAGS = ("dirichlet", "neumann")


def entity_corners(dim, fixed):
    """Local corner numbers of the entity with constrained axes ``fixed``.

    ``fixed`` maps axis -> side.  Corners are listed in the tensor order of
    the remaining free axes (lowest free axis fastest).
    """
    free = [a for a in range(dim) if a not in fixed]
    out = []
    for bits in product((0, 1), repeat=len(free)):
        c = 0
        for a, s in fixed.items():
            c |= s << a
        for a, b in zip(free, reversed(bits)):
            c |= b << a
        out.append(c)
    return out


@dataclass
class Facet:
    vertices: tuple
    cells: list  # [(cell, local_facet), ...], one or two entries
    tag: str | None = None  # boundary tag, None for interior facets

    @property
    def is_boundary(self):
        return len(self.cells) == 1


@dataclass(eq=False)
class Mesh:
    dim: int
    vertices: np.ndarray
    cells: np.ndarray
    facet_tags: dict = field(default_factory=dict)  # (cell, local_facet) -> tag

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.cells = np.asarray(self.cells, dtype=np.int64)
        d = self.dim
        if d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {d}")
        if self.vertices.ndim != 2 or self.vertices.shape[1] != d:
            raise ValueError(f"vertices must have shape (n, {d})")
        if self.cells.ndim != 2 or self.cells.shape[1] != 2**d:
            raise ValueError(f"cells must have shape (n, {2**d})")
        nv = len(self.vertices)
        bad = np.flatnonzero((self.cells < 0).any(1) | (self.cells >= nv).any(1))
        if len(bad):
            raise ValueError(f"cell {bad[0]} references a vertex that does not exist")
        for (c, f), tag in self.facet_tags.items():
            if tag not in TAGS:
                raise ValueError(f"unknown boundary tag {tag!r} on cell {c} facet {f}")
        det = _corner_jacobians(self)
        bad = np.flatnonzero(det.min(axis=1) <= 0)
        if len(bad):
            raise ValueError(f"cell {bad[0]} has a non-positive Jacobian determinant")
        for (c, f) in self.facet_tags:
            if (c, f) not in self._boundary_lookup:
                raise ValueError(f"cell {c} facet {f} is tagged but is not a boundary facet")

    @property
    def num_cells(self):
        return len(self.cells)

    @property
    def num_vertices(self):
        return len(self.vertices)

    @cached_property
    def facets(self):
        d = self.dim
        table = {}
        order = []
        for K in range(self.num_cells):
            for f in range(2 * d):
                a, side = divmod(f, 2)
                key = frozenset(int(v) for v in self.cells[K, entity_corners(d, {a: side})])
                if key not in table:
                    table[key] = Facet(tuple(sorted(key)), [])
                    order.append(key)
                table[key].cells.append((K, f))
        out = []
        for key in order:
            fc = table[key]
            if len(fc.cells) > 2:
                raise ValueError(f"facet {fc.vertices} is shared by more than two cells")
            if len(fc.cells) == 1:
                fc.tag = self.facet_tags.get(fc.cells[0], DEFAULT_TAG)
            out.append(fc)
        return out

    @cached_property
    def _boundary_lookup(self):
        return {fc.cells[0]: i for i, fc in enumerate(self.facets) if fc.is_boundary}

    @cached_property
    def vertex_cells(self):
        star = [[] for _ in range(self.num_vertices)]
        for K, row in enumerate(self.cells):
            for v in row:
                star[v].append(K)
        return [np.array(sorted(set(s)), dtype=np.int64) for s in star]

    @cached_property
    def boundary_vertices(self):
        out = set()
        for fc in self.facets:
            if fc.is_boundary:
                out.update(fc.vertices)
        return np.array(sorted(out), dtype=np.int64)

    def tag_boundary(self, predicate, tag):
        """Tag every boundary facet whose vertices all satisfy ``predicate``."""
        tags = dict(self.facet_tags)
        for fc in self.facets:
            if fc.is_boundary and all(predicate(self.vertices[v]) for v in fc.vertices):
                tags[fc.cells[0]] = tag
        return Mesh(self.dim, self.vertices, self.cells, tags)


def _shape_functions(dim, x):
    """Multilinear corner functions and reference gradients at points ``x``."""
    x = np.atleast_2d(x)
    n = x.shape[0]
    N = np.ones((n, 2**dim))
    dN = np.ones((n, 2**dim, dim))
    for c in range(2**dim):
        for a in range(dim):
            s = 2 * ((c >> a) & 1) - 1
            fa = 0.5 * (1 + s * x[:, a])
            N[:, c] *= fa
            for b in range(dim):
                dN[:, c, b] *= (0.5 * s) if a == b else fa
    return N, dN


def _corner_jacobians(mesh):
    d = mesh.dim
    corners = np.array([[2 * ((c >> a) & 1) - 1 for a in range(d)] for c in range(2**d)], float)
    _, dN = _shape_functions(d, corners)
    X = mesh.vertices[mesh.cells]  # (nc, 2^d, d)
    DF = np.einsum("kci,qcj->kqij", X, dN)
    return np.linalg.det(DF)


# --------------------------------------------------------------------------
# generators


def _grid_cells(counts):
    d = len(counts)
    nv = [n + 1 for n in counts]
    idx = np.arange(int(np.prod(nv))).reshape(nv[::-1])  # (z, y, x)
    cells = []
    for ijk in product(*[range(n) for n in counts[::-1]]):
        ijk = ijk[::-1]  # x, y, z
        row = []
        for c in range(2**d):
            pos = [ijk[a] + ((c >> a) & 1) for a in range(d)]
            row.append(idx[tuple(pos[::-1])])
        cells.append(row)
    return np.array(cells, dtype=np.int64)


def cartesian_mesh(dim, counts, lengths=None, origin=None):
    """Axis-aligned box split into ``counts`` cells per axis (x fastest)."""
    counts = tuple(int(n) for n in counts)
    if len(counts) != dim or min(counts) < 1:
        raise ValueError(f"need {dim} positive cell counts, got {counts}")
    lengths = (1.0,) * dim if lengths is None else tuple(float(v) for v in lengths)
    origin = (0.0,) * dim if origin is None else tuple(origin)
    axes = [origin[a] + lengths[a] * np.arange(counts[a] + 1) / counts[a] for a in range(dim)]
    grids = np.meshgrid(*axes[::-1], indexing="ij")
    verts = np.stack([g.ravel() for g in grids[::-1]], axis=1)
    return Mesh(dim, verts, _grid_cells(counts))


def parallelogram_mesh(n, theta, side=1.0):
    """``n`` x ``n`` congruent parallelogram cells with interior angle ``theta``
    and edge length ``side``."""
    if not 0 < theta < np.pi:
        raise ValueError(f"angle must lie in (0, pi), got {theta}")
    e1 = np.array([side, 0.0])
    e2 = side * np.array([np.cos(theta), np.sin(theta)])
    j, i = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    verts = i.ravel()[:, None] * e1 + j.ravel()[:, None] * e2
    return Mesh(2, verts, _grid_cells((n, n)))


def _quad(v0, v1, v2, v3):
    # counter-clockwise corners to tensor order
    return [v0, v1, v3, v2]


def pentagon_mesh(radius=1.0):
    """Regular pentagon split into five quadrilaterals meeting at the center,
    whose center vertex is shared by five cells."""
    ang = np.pi / 2 + 2 * np.pi * np.arange(5) / 5
    P = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    M = 0.5 * (P + np.roll(P, -1, axis=0))
    verts = np.vstack([[0.0, 0.0], P, M])
    cells = [_quad(0, 6 + (i - 1) % 5, 1 + i, 6 + i) for i in range(5)]
    return Mesh(2, verts, cells)


def ring_mesh(radius=1.0):
    """Unstructured quadrilateral mesh of a pentagon.

    The pentagon is split into five triangles around its center and each
    triangle into three quadrilaterals, so the center vertex has five cells
    and every triangle centroid has three.
    """
    ang = np.pi / 2 + 2 * np.pi * np.arange(5) / 5
    P = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    verts = [np.zeros(2)] + list(P)
    index = {}

    def vid(key, x):
        if key not in index:
            index[key] = len(verts)
            verts.append(np.asarray(x, float))
        return index[key]

    cells = []
    for i in range(5):
        j = (i + 1) % 5
        c, a, b = 0, 1 + i, 1 + j
        Xc, Xa, Xb = verts[c], verts[a], verts[b]
        g = vid(("g", i), (Xc + Xa + Xb) / 3)
        mca = vid(("s", i), 0.5 * (Xc + Xa))
        mab = vid(("o", i), 0.5 * (Xa + Xb))
        mbc = vid(("s", j), 0.5 * (Xb + Xc))
        cells.append(_quad(c, mca, g, mbc))
        cells.append(_quad(a, mab, g, mca))
        cells.append(_quad(b, mbc, g, mab))
    return Mesh(2, np.array(verts), cells)


def refine_uniform(mesh, levels=1):
    """Split every cell into ``2**d`` children through its reference midpoints."""
    for _ in range(levels):
        mesh = _refine_once(mesh)
    return mesh


def _refine_once(mesh):
    d = mesh.dim
    verts = list(mesh.vertices)
    index = {}

    def point(K, t):
        # t in {0, 1, 2}^d -> vertex id; shared points are keyed by the
        # corner set of the entity they are the midpoint of
        fixed = {a: t[a] // 2 for a in range(d) if t[a] != 1}
        corners = mesh.cells[K, entity_corners(d, fixed)]
        if len(corners) == 1:
            return int(corners[0])
        key = frozenset(int(v) for v in corners)
        if len(fixed) == 0:
            key = ("cell", K)
        if key not in index:
            x = np.array([2 * (ta / 2) - 1 for ta in t], dtype=float)
            N, _ = _shape_functions(d, x[None])
            index[key] = len(verts)
            verts.append(N[0] @ mesh.vertices[mesh.cells[K]])
        return index[key]

    cells = []
    tags = {}
    for K in range(mesh.num_cells):
        for child in range(2**d):
            cb = [(child >> a) & 1 for a in range(d)]
            row = []
            for c in range(2**d):
                t = [cb[a] + ((c >> a) & 1) for a in range(d)]
                row.append(point(K, t))
            newK = len(cells)
            cells.append(row)
            for f in range(2 * d):
                a, side = divmod(f, 2)
                if cb[a] == side and (K, f) in mesh.facet_tags:
                    tags[(newK, f)] = mesh.facet_tags[(K, f)]
    return Mesh(d, np.array(verts), cells, tags)


# --------------------------------------------------------------------------
# vertex stars


@dataclass
class PatchTopology:
    vertex: int
    cells: np.ndarray
    interior_facets: list  # facet indices through the vertex shared by two patch cells
    boundary_facets: list  # all other facets of the patch cells


def vertex_star(mesh, v):
    """Cells around vertex ``v`` and the classification of their facets."""
    if not 0 <= v < mesh.num_vertices:
        raise ValueError(f"vertex {v} does not exist")
    cells = mesh.vertex_cells[v]
    cellset = set(cells.tolist())
    inner, outer = [], []
    for i, fc in enumerate(mesh.facets):
        owners = [K for K, _ in fc.cells]
        if not any(K in cellset for K in owners):
            continue
        if v in fc.vertices and len(owners) == 2 and all(K in cellset for K in owners):
            inner.append(i)
        else:
            outer.append(i)
    return PatchTopology(int(v), cells, inner, outer)


# --------------------------------------------------------------------------
# geometry


@dataclass
class CellGeometry:
    cell: int
    kind: str  # "cartesian", "affine" or "multilinear"
    points: np.ndarray  # reference quadrature points (nq, d)
    weights: np.ndarray  # reference weights (nq,)
    jacobian: np.ndarray  # (nq, d, d), jacobian[q, i, a] = dx_i / dxhat_a
    detJ: np.ndarray
    metric: np.ndarray  # |det DF| DF^{-1} DF^{-T}, (nq, d, d)
    mu: np.ndarray  # surrogate axis coefficients
    half_lengths: np.ndarray | None  # only for Cartesian cells


def _tensor_rule(dim, npts):
    rule = gauss_legendre_rule(npts)
    grids = np.meshgrid(*([rule.points] * dim), indexing="ij")
    wgrids = np.meshgrid(*([rule.weights] * dim), indexing="ij")
    # slowest index is the last axis, matching (z, y, x) array layout
    pts = np.stack([g.ravel() for g in grids[::-1]], axis=1)
    w = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return pts, w


def mesh_geometry(mesh, npts=2, cells=None):
    """Vectorized geometry of many cells on an ``npts``-per-axis Gauss rule.

    Returns a dict with jacobian, detJ, metric, mu, kind and half_lengths.
    Two points per axis integrate the metric of affine cells exactly; more
    points are needed for the metric of general multilinear cells.
    """
    d = mesh.dim
    cells = np.arange(mesh.num_cells) if cells is None else np.asarray(cells)
    pts, w = _tensor_rule(d, npts)
    _, dN = _shape_functions(d, pts)
    X = mesh.vertices[mesh.cells[cells]]
    DF = np.einsum("kci,qca->kqia", X, dN)
    det = np.linalg.det(DF)
    inv = np.linalg.inv(DF)
    G = np.abs(det)[..., None, None] * np.einsum("kqai,kqbi->kqab", inv, inv)
    mu = np.einsum("q,kqaa->ka", w, G) / 2.0**d

    scale = np.abs(DF).max(axis=(1, 2, 3))[:, None, None, None]
    constant = np.all(np.abs(DF - DF[:, :1]) <= 1e-12 * scale, axis=(1, 2, 3))
    offdiag = DF[:, 0] - np.einsum("kaa->ka", DF[:, 0])[:, :, None] * np.eye(d)
    diagonal = np.all(np.abs(offdiag) <= 1e-12 * scale[:, 0], axis=(1, 2))
    kind = np.where(constant & diagonal, "cartesian", np.where(constant, "affine", "multilinear"))

    half = np.full((len(cells), d), np.nan)
    cart = kind == "cartesian"
    if cart.any():
        L = np.einsum("kaa->ka", DF[cart, 0])
        half[cart] = L
        # exact closed form of the surrogate coefficients
        mu[cart] = np.prod(L, axis=1)[:, None] / L**2
    return dict(cells=cells, points=pts, weights=w, jacobian=DF, detJ=det, metric=G,
                mu=mu, kind=kind, half_lengths=half)


def cell_geometry(mesh, cell, npts=None):
    """Jacobian, metric tensor and surrogate coefficients of one cell."""
    if not 0 <= cell < mesh.num_cells:
        raise ValueError(f"cell {cell} does not exist")
    npts = 4 if npts is None else npts
    g = mesh_geometry(mesh, npts, [cell])
    kind = str(g["kind"][0])
    return CellGeometry(int(cell), kind, g["points"], g["weights"], g["jacobian"][0],
                        g["detJ"][0], g["metric"][0], g["mu"][0],
                        g["half_lengths"][0] if kind == "cartesian" else None)


def surrogate_coeffs(mesh, cells=None, npts=None):
    """Cell-averaged diagonal of the metric tensor, one row per cell.

    Given a :class:`CellGeometry` instead of a mesh, returns that cell's
    coefficients.

    Cartesian cells get the exact closed form ``prod(L) / L_j**2`` with L the
    half edge lengths.  Other cells are averaged with an ``npts``-point rule
    per axis (default 4).
    """
    if isinstance(mesh, CellGeometry):
        return mesh.mu
    npts = 4 if npts is None else npts
    return mesh_geometry(mesh, npts, cells)["mu"]


def _measure(mesh, K, fixed=None, npts=4):
    """Measure of cell K, or of its entity with constrained axes ``fixed``."""
    d = mesh.dim
    fixed = fixed or {}
    free = [a for a in range(d) if a not in fixed]
    pts, w = _tensor_rule(len(free), npts)
    x = np.zeros((len(w), d))
    for k, a in enumerate(free):
        x[:, a] = pts[:, k]
    for a, s in fixed.items():
        x[:, a] = 2 * s - 1
    _, dN = _shape_functions(d, x)
    DF = np.einsum("ci,qca->qia", mesh.vertices[mesh.cells[K]], dN)
    T = DF[:, :, free]
    if len(free) == d:
        jac = np.abs(np.linalg.det(T))
    else:
        jac = np.sqrt(np.abs(np.linalg.det(np.einsum("qia,qib->qab", T, T))))
    return float(w @ jac)


def reciprocal_facet_length(mesh, facet):
    """Inverse facet length scale: ``|e|/|K|`` averaged over the cells of the facet."""
    fc = mesh.facets[facet] if not isinstance(facet, Facet) else facet
    vals = []
    for K, f in fc.cells:
        a, side = divmod(f, 2)
        vals.append(_measure(mesh, K, {a: side}) / _measure(mesh, K))
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# serialization


def mesh_to_dict(mesh):
    tags = [dict(cell=int(K), local_facet=int(f), tag=t)
            for (K, f), t in sorted(mesh.facet_tags.items())]
    return dict(dim=mesh.dim, vertices=mesh.vertices.tolist(),
                cells=mesh.cells.tolist(), facet_tags=tags)


def mesh_from_dict(data):
    for key in ("dim", "vertices", "cells"):
        if key not in data:
            raise ValueError(f"mesh description lacks the {key!r} field")
    tags = {}
    for i, t in enumerate(data.get("facet_tags", [])):
        try:
            tags[(int(t["cell"]), int(t["local_facet"]))] = t["tag"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed facet tag entry {i}: {t!r}") from exc
    return Mesh(int(data["dim"]), np.array(data["vertices"], dtype=float),
                np.array(data["cells"], dtype=np.int64), tags)


def save_mesh(mesh, path):
    """Write a mesh as JSON with every coordinate at 17 significant digits."""
    d = mesh_to_dict(mesh)
    lines = ["{", f'  "dim": {d["dim"]},', '  "vertices": [']
    lines += ["    [" + ", ".join(f"{x:.17g}" for x in row) + "]" + ("," if i < len(d["vertices"]) - 1 else "")
              for i, row in enumerate(mesh.vertices)]
    lines += ["  ],", '  "cells": [']
    lines += ["    " + json.dumps(row) + ("," if i < len(d["cells"]) - 1 else "")
              for i, row in enumerate(d["cells"])]
    lines += ["  ],", '  "facet_tags": ' + json.dumps(d["facet_tags"]), "}"]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path):
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed mesh file at line {exc.lineno}: {exc.msg}") from exc
    return mesh_from_dict(data)
