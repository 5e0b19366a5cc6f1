"""Experiment driver and command line interface.

Subcommands build a problem from a configuration, run the two-level
solver and write one row per run as CSV or JSON::

    fdmstar poisson --dim 2 --degree 3,7,15 --refine 0,1
    fdmstar elasticity-primal --degree 3 --lambda 0,1,10,100,1000
    fdmstar elasticity-mixed --pair rt-dq --krylov gmres30 --lambda inf
    fdmstar report-nnz --dim 3 --degree 7,15
    fdmstar bench --degree 15,31,63
    fdmstar dump-operators --degree 4 --output ops/

Settings can also come from a flat ``key = value`` file passed with
``--config``; command line flags override it.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import platform
import subprocess
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp

from . import __version__
from .assembly import (ChangeOfBasis, divergence_operator, divergence_values, dq_space,
                       elasticity_operator, elasticity_surrogate, expand_free, load_vector,
                       poisson_operator, poisson_surrogate, pressure_mass, rt_space, scalar_space,
                       stencil_counts, vector_space)
from .krylov import gmres_restarted, minres, pcg
from .meshgeo import (cartesian_mesh, load_mesh, parallelogram_mesh, pentagon_mesh, refine_uniform,
                      ring_mesh)
from .refelem import fdm_basis, reference_operators
from .schwarz import DAMPING_FORMULAS, SEED, BlockPrecond, TwoLevel
from .sparsela import cholesky, nested_dissection_grid, patch_ordering, write_matrix_market

__all__ = [
    "ExperimentConfig",
    "ReportRow",
    "NnzRow",
    "BenchRow",
    "ConfigError",
    "parse_config_text",
    "load_config",
    "build_mesh",
    "run_poisson",
    "run_primal_elasticity",
    "run_mixed_elasticity",
    "report_nnz",
    "bench_runtime",
    "dump_operators",
    "femsem_patch_matrix",
    "write_rows",
    "main",
]

PROBLEMS = ("poisson-cg", "poisson-dg", "elasticity-primal", "elasticity-mixed")
KRYLOV = ("pcg", "minres", "gmres30")
PAIRS = ("qp-dq", "rt-dq")
MESHES = ("cartesian", "parallelogram", "pentagon", "ring")


class ConfigError(ValueError):
    pass


def _floats(text):
    out = []
    for tok in str(text).split(","):
        tok = tok.strip().lower()
        if not tok:
            continue
        out.append(math.inf if tok in ("inf", "infinity", "∞") else float(tok))
    return out


def _ints(text):
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma separated list of integers, got {text!r}") from exc


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _fmt_float(x):
    if x is None:
        return ""
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(float(x), ".17g")


@dataclass
class ExperimentConfig:
    problem: str = "poisson-cg"
    dim: int = 2
    degrees: list = field(default_factory=lambda: [3])
    refinements: list = field(default_factory=lambda: [0])
    mesh: str = "cartesian"
    cells: int | None = None  # cells per axis of the base mesh
    theta: float = 2 * math.pi / 6  # parallelogram angle
    mu: float = 1.0
    lambdas: list | None = None
    pair: str = "qp-dq"
    krylov: str | None = None
    rtol: float = 1e-8
    maxit: int = 2000
    threads: int = 1
    seed: int = SEED
    damping: str = "auto"
    damping_formula: str = "chebyshev"
    lanczos_steps: int = 10
    coarse_degree: int | None = None
    skip_boundary: bool = False
    repetitions: int = 5
    warmup: int = 1
    timings: bool = True
    output: str | None = None
    format: str = "csv"

    # file key -> (attribute, parser, serializer)
    _KEYS = {
        "problem": ("problem", str, str),
        "dim": ("dim", int, str),
        "degree": ("degrees", _ints, lambda v: ",".join(map(str, v))),
        "refine": ("refinements", _ints, lambda v: ",".join(map(str, v))),
        "mesh": ("mesh", str, str),
        "cells": ("cells", int, str),
        "theta": ("theta", float, _fmt_float),
        "mu": ("mu", float, _fmt_float),
        "lambda": ("lambdas", _floats, lambda v: ",".join(_fmt_float(x) for x in v)),
        "pair": ("pair", str, str),
        "krylov": ("krylov", str, str),
        "rtol": ("rtol", float, _fmt_float),
        "maxit": ("maxit", int, str),
        "threads": ("threads", int, str),
        "seed": ("seed", lambda s: int(s, 0), str),
        "smoother.damping": ("damping", str, str),
        "smoother.damping_formula": ("damping_formula", str, str),
        "smoother.lanczos_steps": ("lanczos_steps", int, str),
        "coarse.degree": ("coarse_degree", int, str),
        "patch.skip_boundary": ("skip_boundary", _bool, lambda v: "true" if v else "false"),
        "bench.repetitions": ("repetitions", int, str),
        "bench.warmup": ("warmup", int, str),
        "timings": ("timings", _bool, lambda v: "true" if v else "false"),
        "output": ("output", str, str),
        "format": ("format", str, str),
    }

    @classmethod
    def from_mapping(cls, mapping, base=None):
        cfg = dataclasses.replace(base) if base is not None else cls()
        for key, value in mapping.items():
            if value is None:
                continue
            if key not in cls._KEYS:
                raise ConfigError(f"unknown configuration key {key!r}; known keys: {', '.join(sorted(cls._KEYS))}")
            attr, parse, _ = cls._KEYS[key]
            try:
                setattr(cfg, attr, parse(value) if isinstance(value, str) else value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value {value!r} for {key}: {exc}") from exc
        cfg.validate()
        return cfg

    def to_text(self):
        lines = []
        for key, (attr, _, dump) in self._KEYS.items():
            v = getattr(self, attr)
            if v is None:
                continue
            lines.append(f"{key} = {dump(v)}")
        return "\n".join(lines) + "\n"

    def as_dict(self):
        return {k: getattr(self, a) for k, (a, _, _) in self._KEYS.items()}

    def validate(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}, got {self.problem!r}")
        if self.dim not in (2, 3):
            raise ConfigError(f"dim must be 2 or 3, got {self.dim}")
        if not self.degrees or min(self.degrees) < 2:
            raise ConfigError("every degree must be at least 2 so patches have interior modes")
        if not self.refinements or min(self.refinements) < 0:
            raise ConfigError("refinement levels must be non-negative")
        if self.pair not in PAIRS:
            raise ConfigError(f"pair must be one of {PAIRS}, got {self.pair!r}")
        if self.krylov is not None and self.krylov not in KRYLOV:
            raise ConfigError(f"krylov must be one of {KRYLOV}, got {self.krylov!r}")
        if not 0 < self.rtol < 1:
            raise ConfigError(f"rtol must lie in (0, 1), got {self.rtol}")
        if self.mu <= 0:
            raise ConfigError("mu must be positive")
        if self.lambdas is not None and any(lam < 0 for lam in self.lambdas):
            raise ConfigError("lambda must be non-negative")
        if self.format not in ("csv", "json"):
            raise ConfigError(f"format must be csv or json, got {self.format!r}")
        if self.damping != "auto":
            try:
                if float(self.damping) <= 0:
                    raise ValueError
            except ValueError as exc:
                raise ConfigError(f"smoother.damping must be 'auto' or a positive number, got {self.damping!r}") from exc
        if self.damping_formula not in DAMPING_FORMULAS:
            raise ConfigError(f"smoother.damping_formula must be one of {DAMPING_FORMULAS}")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.problem == "elasticity-mixed" and self.dim != 2:
            raise ConfigError("mixed elasticity is supported in 2D only (3D mixed is out of scope)")
        return self


def parse_config_text(text):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def load_config(path, **overrides):
    with open(path) as fh:
        mapping = parse_config_text(fh.read())
    mapping.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_mapping(mapping)


# --------------------------------------------------------------------------
# rows


@dataclass
class ReportRow:
    problem: str
    d: int
    p: int
    l: int
    lam: float
    ndofs: int
    iterations: int
    kappa: float
    nnz_A_tilde: int
    nnz_L: int
    factor_time: float
    solve_time: float
    converged: bool = True
    omega: float = float("nan")
    div_ratio: float = float("nan")
    history: list = field(default_factory=list, repr=False)

    COLUMNS = ("problem", "d", "p", "l", "lam", "ndofs", "iterations", "kappa", "nnz_A_tilde",
               "nnz_L", "factor_time", "solve_time", "converged", "omega", "div_ratio")


@dataclass
class NnzRow:
    d: int
    p: int
    ndofs: int
    nnz_A_tilde: int
    nnz_L_fdm: int
    nnz_L_femsem: int
    ratio: float
    interior_row_nnz: int

    COLUMNS = ("d", "p", "ndofs", "nnz_A_tilde", "nnz_L_fdm", "nnz_L_femsem", "ratio", "interior_row_nnz")


@dataclass
class BenchRow:
    d: int
    p: int | None
    phase: str
    repetitions: int
    median: float
    minimum: float
    maximum: float
    slope: float = float("nan")

    COLUMNS = ("d", "p", "phase", "repetitions", "median", "minimum", "maximum", "slope")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else _fmt_float(v)
    return "" if v is None else str(v)


def _json_value(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v) or math.isinf(v):
            return str(v)
        return v
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _git_revision():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def write_rows(rows, fmt="csv", stream=None, config=None):
    """Write rows as CSV (17 significant digits) or as a JSON run manifest."""
    stream = sys.stdout if stream is None else stream
    if not rows:
        return
    cols = type(rows[0]).COLUMNS
    if fmt == "csv":
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(getattr(r, c)) for c in cols])
        return
    import numba
    import scipy

    doc = {
        "config": None if config is None else {k: _json_value(v) if not isinstance(v, list) else
                                               [_json_value(x) for x in v]
                                               for k, v in config.as_dict().items()},
        "environment": {"python": platform.python_version(), "numpy": np.__version__,
                        "scipy": scipy.__version__, "numba": numba.__version__,
                        "platform": platform.platform(), "package": __version__},
        "git_revision": _git_revision(),
        "rows": [{c: _json_value(getattr(r, c)) for c in cols} for r in rows],
    }
    json.dump(doc, stream, indent=2)
    stream.write("\n")


# --------------------------------------------------------------------------
# problem construction


def build_mesh(cfg, default_cells=4):
    n = cfg.cells if cfg.cells is not None else default_cells
    if cfg.mesh == "cartesian":
        return cartesian_mesh(cfg.dim, [n] * cfg.dim)
    if cfg.mesh == "parallelogram":
        if cfg.dim != 2:
            raise ConfigError("the parallelogram mesh is two-dimensional")
        return parallelogram_mesh(n, cfg.theta)
    if cfg.mesh == "pentagon":
        return pentagon_mesh()
    if cfg.mesh == "ring":
        return ring_mesh()
    if os.path.exists(cfg.mesh):
        mesh = load_mesh(cfg.mesh)
        if mesh.dim != cfg.dim:
            raise ConfigError(f"mesh file {cfg.mesh} is {mesh.dim}D but dim = {cfg.dim}")
        return mesh
    raise ConfigError(f"mesh must be one of {MESHES} or an existing file, got {cfg.mesh!r}")


def _clamped(mesh):
    """Dirichlet on the face x_1 = min, natural conditions elsewhere."""
    x0 = mesh.vertices[:, 0].min()
    return (mesh.tag_boundary(lambda x: True, "neumann")
            .tag_boundary(lambda x: abs(x[0] - x0) < 1e-12, "dirichlet"))


def _body_force(d):
    f = np.zeros(d)
    f[1] = -0.02
    return f


def _damping(cfg):
    return "auto" if cfg.damping == "auto" else float(cfg.damping)


def _twolevel(cfg, A, S, coarse):
    return TwoLevel(A, S, coarse, damping=_damping(cfg), lanczos_steps=cfg.lanczos_steps,
                    damping_formula=cfg.damping_formula, skip_boundary=cfg.skip_boundary,
                    threads=cfg.threads, seed=cfg.seed)


def _timed(cfg, t):
    return t if cfg.timings else float("nan")


def _krylov(cfg, default):
    return cfg.krylov or default


def run_poisson(cfg):
    """Poisson with f = 1 and homogeneous Dirichlet conditions, PCG on the
    two-level cycle; one row per (degree, refinement)."""
    disc = "dg" if cfg.problem == "poisson-dg" else "cg"
    if _krylov(cfg, "pcg") != "pcg":
        raise ConfigError("the Poisson driver uses pcg")
    base = build_mesh(cfg, 4)
    rows = []
    for l in cfg.refinements:
        mesh = refine_uniform(base, l) if l else base
        for p in cfg.degrees:
            V = scalar_space(mesh, p, disc)
            t0 = time.perf_counter()
            A = poisson_operator(V)
            S = poisson_surrogate(V)
            coarse = scalar_space(mesh, cfg.coarse_degree or 1, "cg")
            tl = _twolevel(cfg, A, S, coarse)
            t1 = time.perf_counter()
            b = load_vector(V, 1.0)[V.free_dofs]
            x, rep = pcg(tl.A, tl, b, rtol=cfg.rtol, maxit=cfg.maxit)
            rows.append(ReportRow(cfg.problem, mesh.dim, p, l, 0.0, V.nfree, rep.iterations, rep.kappa,
                                  tl.A_tilde.nnz, tl.patches.nnz_L, _timed(cfg, t1 - t0),
                                  _timed(cfg, rep.wall_time), rep.converged, tl.omega,
                                  history=rep.history))
    return rows


def run_primal_elasticity(cfg):
    """Primal elasticity clamped at x_1 = 0 under the body force -0.02 e_2,
    PCG on the two-level cycle with the separate-displacement-component
    relaxation; one row per (degree, refinement, lambda)."""
    if _krylov(cfg, "pcg") != "pcg":
        raise ConfigError("the primal elasticity driver uses pcg")
    lambdas = cfg.lambdas if cfg.lambdas is not None else [0.0, 1.0, 10.0, 100.0, 1000.0]
    if any(math.isinf(lam) for lam in lambdas):
        raise ConfigError("lambda = inf needs the mixed formulation (elasticity-mixed)")
    base = build_mesh(cfg, 8)
    if cfg.mesh in MESHES:
        base = _clamped(base)
    rows = []
    for l in cfg.refinements:
        mesh = refine_uniform(base, l) if l else base
        for p in cfg.degrees:
            V = vector_space(mesh, p)
            coarse = vector_space(mesh, cfg.coarse_degree or 1)
            b = load_vector(V, _body_force(mesh.dim))[V.free_dofs]
            for lam in lambdas:
                t0 = time.perf_counter()
                A = elasticity_operator(V, cfg.mu, lam)
                S = elasticity_surrogate(V, cfg.mu, lam)
                tl = _twolevel(cfg, A, S, coarse)
                t1 = time.perf_counter()
                x, rep = pcg(tl.A, tl, b, rtol=cfg.rtol, maxit=cfg.maxit)
                rows.append(ReportRow("elasticity-primal", mesh.dim, p, l, lam, V.nfree, rep.iterations,
                                      rep.kappa, tl.A_tilde.nnz, tl.patches.nnz_L, _timed(cfg, t1 - t0),
                                      _timed(cfg, rep.wall_time), rep.converged, tl.omega,
                                      history=rep.history))
    return rows


def mixed_system(cfg, mesh, p, lam, kind):
    """Saddle-point matrix, right-hand side and block preconditioner."""
    if cfg.pair == "rt-dq":
        V, Q = rt_space(mesh, p), dq_space(mesh, p - 1)
        coarse = rt_space(mesh, cfg.coarse_degree or 2)
    else:
        V, Q = vector_space(mesh, p), dq_space(mesh, p - 2)
        coarse = vector_space(mesh, cfg.coarse_degree or 1)
    A = elasticity_operator(V, cfg.mu, 0.0)
    S = elasticity_surrogate(V, cfg.mu, 0.0)
    tl = _twolevel(cfg, A, S, coarse)
    B = divergence_operator(Q, V).free_matrix()
    M = pressure_mass(Q).free_matrix()
    inv_lam = 0.0 if math.isinf(lam) else 1.0 / lam
    blocks = [[tl.A_mat if tl.A_mat is not None else A.free_matrix(), B.T], [B, None]]
    if inv_lam:
        blocks[1][1] = -inv_lam * M
    K = sp.bmat(blocks, format="csr")
    P2 = (1.0 / cfg.mu + inv_lam) * M.diagonal()
    bp = BlockPrecond(kind, tl, P2, B)
    rhs = np.concatenate([load_vector(V, _body_force(mesh.dim))[V.free_dofs], np.zeros(Q.nfree)])
    return V, Q, K, rhs, bp, tl, B


def run_mixed_elasticity(cfg):
    """Mixed elasticity (Q_p x DQ_{p-2} or RT_p x DQ_{p-1}) with the diagonal
    block preconditioner and MINRES or the full one and GMRES(30)."""
    if cfg.dim != 2:
        raise ConfigError("mixed elasticity is supported in 2D only (3D mixed is out of scope)")
    method = _krylov(cfg, "minres")
    if method == "pcg":
        raise ConfigError("the mixed system is indefinite: use minres or gmres30")
    kind = "diag" if method == "minres" else "full"
    lambdas = cfg.lambdas if cfg.lambdas is not None else [1.0, 10.0, 100.0, 1000.0, math.inf]
    base = build_mesh(cfg, 8)
    if cfg.mesh in MESHES:
        base = _clamped(base)
    rows = []
    for l in cfg.refinements:
        mesh = refine_uniform(base, l) if l else base
        for p in cfg.degrees:
            if cfg.pair == "qp-dq" and p < 2:
                raise ConfigError("the Q_p x DQ_{p-2} pair needs p >= 2")
            for lam in lambdas:
                t0 = time.perf_counter()
                V, Q, K, rhs, bp, tl, B = mixed_system(cfg, mesh, p, lam, kind)
                t1 = time.perf_counter()
                if method == "minres":
                    x, rep = minres(K, bp, rhs, rtol=cfg.rtol, maxit=cfg.maxit)
                else:
                    x, rep = gmres_restarted(K, bp, rhs, restart=30, rtol=cfg.rtol, maxit=cfg.maxit)
                u = x[:V.nfree]
                scale = max(np.abs(u).max(), np.finfo(float).tiny)
                if cfg.pair == "rt-dq":
                    div = np.abs(divergence_values(V, expand_free(V, u))).max()
                else:
                    div = np.abs(B @ u).max()
                rows.append(ReportRow(f"elasticity-mixed-{cfg.pair}-{method}", mesh.dim, p, l, lam,
                                      V.nfree + Q.nfree, rep.iterations, float("nan"), tl.A_tilde.nnz,
                                      tl.patches.nnz_L, _timed(cfg, t1 - t0), _timed(cfg, rep.wall_time),
                                      rep.converged, tl.omega, div / scale, history=rep.history))
    return rows


# --------------------------------------------------------------------------
# patch studies


def fdm_patch(d, p):
    """Transformed surrogate matrix of a Cartesian vertex-star patch of 2^d
    cells with its patch ordering."""
    mesh = cartesian_mesh(d, [2] * d, lengths=[2.0] * d, origin=[-1.0] * d)
    V = scalar_space(mesh, p)
    At = poisson_surrogate(V).free_matrix(transformed=True)
    center = int(np.argmin(np.linalg.norm(mesh.vertices, axis=1)))
    dofs, classes, keys = V.patch_dofs(center)
    idx = V.reduced_index[dofs]
    Aj = At[idx][:, idx].tocsr()
    return Aj, patch_ordering(classes, keys, dim=d), classes


def femsem_patch_matrix(d, p):
    """Q1 stiffness on the GLL sub-grid of the 2^d-cell patch (interior nodes)."""
    ref = reference_operators(p, "gll")
    x = np.concatenate([0.5 * (ref.nodes - 1.0), 0.5 * (ref.nodes[1:] + 1.0)])
    h = np.diff(x)
    n = len(x)
    K = sp.diags([np.r_[1 / h, 0] + np.r_[0, 1 / h], -1 / h, -1 / h], [0, 1, -1], shape=(n, n))
    M = sp.diags([np.r_[h, 0] / 3 + np.r_[0, h] / 3, h / 6, h / 6], [0, 1, -1], shape=(n, n))
    K = K.tocsr()[1:-1, 1:-1]
    M = M.tocsr()[1:-1, 1:-1]
    A = None
    for a in range(d):
        term = None
        for b in range(d):
            F = K if a == b else M
            term = F if term is None else sp.kron(term, F, format="csr")
        A = term if A is None else A + term
    return A.tocsr(), (n - 2,) * d


def report_nnz(cfg):
    rows = []
    for p in cfg.degrees:
        d = cfg.dim
        Aj, order, classes = fdm_patch(d, p)
        Lf = cholesky(Aj, order.perm)
        Af, dims = femsem_patch_matrix(d, p)
        Lq = cholesky(Af, nested_dissection_grid(dims).perm)
        interior = np.flatnonzero(classes == 0)
        counts = stencil_counts(Aj, interior)
        rows.append(NnzRow(d, p, Aj.shape[0], Aj.nnz, Lf.nnz, Lq.nnz, Lf.nnz / Lq.nnz,
                           int(counts.max()) if len(counts) else 0))
    return rows


def _median_time(fn, reps, warmup):
    for _ in range(warmup):
        fn()
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts)), float(min(ts)), float(max(ts))


def fit_slope(ps, ts):
    """Least-squares slope of log t against log p over the top half of the degrees."""
    ps, ts = np.asarray(ps, float), np.asarray(ts, float)
    k = len(ps) // 2 if len(ps) > 3 else 0
    return float(np.polyfit(np.log(ps[k:]), np.log(ts[k:]), 1)[0])


def bench_runtime(cfg):
    """Median timings of the patch factorization, patch solve and FDM basis
    application on 2^d-cell patches, with fitted log-log slopes."""
    if cfg.repetitions < 5 or cfg.warmup < 1:
        raise ConfigError("bench needs at least 5 repetitions and 1 warmup run")
    d = cfg.dim
    rows = []
    per_phase = {"chol_setup": [], "chol_solve": [], "fdm_apply": []}
    rng = np.random.default_rng(cfg.seed)
    for p in cfg.degrees:
        Aj, order, _ = fdm_patch(d, p)
        F = cholesky(Aj, order.perm)
        b = rng.standard_normal(Aj.shape[0])
        mesh = cartesian_mesh(d, [2] * d)
        V = scalar_space(mesh, p)
        S = ChangeOfBasis(V)
        xv = rng.standard_normal(V.nfree)
        stats = {
            "chol_setup": _median_time(lambda: cholesky(Aj, order.perm), cfg.repetitions, cfg.warmup),
            "chol_solve": _median_time(lambda: F.solve(b), cfg.repetitions, cfg.warmup),
            "fdm_apply": _median_time(lambda: S.apply(xv), cfg.repetitions, cfg.warmup),
        }
        for phase, (med, lo, hi) in stats.items():
            per_phase[phase].append(med)
            rows.append(BenchRow(d, p, phase, cfg.repetitions, med, lo, hi))
    if len(cfg.degrees) >= 2:
        for phase, ts in per_phase.items():
            rows.append(BenchRow(d, None, phase, cfg.repetitions, float("nan"), float("nan"), float("nan"),
                                 fit_slope(cfg.degrees, ts)))
    return rows


def dump_operators(cfg, outdir):
    """Write reference matrices as CSV and assembled operators as Matrix Market."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    for p in cfg.degrees:
        ref = reference_operators(p, "gll")
        fdm = fdm_basis(p)
        for name, M in (("A_hat", ref.A_hat), ("B_hat", ref.B_hat), ("S_hat", fdm.S_hat)):
            path = os.path.join(outdir, f"{name}_p{p}.csv")
            np.savetxt(path, M, delimiter=",", fmt="%.17g")
            written.append(path)
    mesh = build_mesh(cfg, 4)
    l = cfg.refinements[0]
    mesh = refine_uniform(mesh, l) if l else mesh
    p = cfg.degrees[0]
    V = scalar_space(mesh, p, "dg" if cfg.problem == "poisson-dg" else "cg")
    A = poisson_operator(V)
    mats = {"A": A.free_matrix(), "A_tilde": poisson_surrogate(V).free_matrix(transformed=True),
            "S": ChangeOfBasis(V).matrix()}
    for name, M in mats.items():
        path = os.path.join(outdir, f"{name}_p{p}_l{l}.mtx")
        if name == "S":
            scipy.io.mmwrite(path, sp.csr_matrix(M), precision=17)
        else:
            write_matrix_market(M, path)
        written.append(path)
    return written


# --------------------------------------------------------------------------
# command line


def _parser():
    ap = argparse.ArgumentParser(prog="fdmstar", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp_):
        sp_.add_argument("--config", help="flat key = value settings file; flags override it")
        sp_.add_argument("--dim", type=int)
        sp_.add_argument("--degree", help="comma separated polynomial degrees")
        sp_.add_argument("--refine", help="comma separated uniform refinement levels")
        sp_.add_argument("--mesh", help=f"one of {', '.join(MESHES)} or a mesh file")
        sp_.add_argument("--cells", type=int, help="cells per axis of the generated base mesh")
        sp_.add_argument("--disc", choices=("cg", "dg"))
        sp_.add_argument("--pair", choices=PAIRS)
        sp_.add_argument("--lambda", dest="lam", help="comma separated Lame lambda values, inf allowed")
        sp_.add_argument("--mu", type=float)
        sp_.add_argument("--krylov", choices=KRYLOV)
        sp_.add_argument("--rtol", type=float)
        sp_.add_argument("--maxit", type=int)
        sp_.add_argument("--threads", type=int)
        sp_.add_argument("--seed", help="seed of the damping probe vector")
        sp_.add_argument("--damping", help="'auto' or a fixed relaxation weight")
        sp_.add_argument("--damping-formula", choices=DAMPING_FORMULAS,
                         help="rule turning the Lanczos eigenvalue estimates into a weight")
        sp_.add_argument("--no-timings", action="store_true",
                         help="leave timing columns empty for byte-identical output")
        sp_.add_argument("--history", help="write convergence histories (CSV) to this path")
        sp_.add_argument("--output", help="output path (directory for dump-operators)")
        sp_.add_argument("--format", choices=("csv", "json"))

    for name in ("poisson", "elasticity-primal", "elasticity-mixed", "report-nnz", "bench", "dump-operators"):
        common(sub.add_parser(name))
    return ap


def _config_from_args(args):
    mapping = {}
    if args.config:
        with open(args.config) as fh:
            mapping.update(parse_config_text(fh.read()))
    flags = {
        "dim": args.dim, "degree": args.degree, "refine": args.refine, "mesh": args.mesh,
        "cells": args.cells, "pair": args.pair, "lambda": args.lam, "mu": args.mu,
        "krylov": args.krylov, "rtol": args.rtol, "maxit": args.maxit, "threads": args.threads,
        "seed": args.seed, "smoother.damping": args.damping,
        "smoother.damping_formula": args.damping_formula, "output": args.output, "format": args.format,
    }
    if args.no_timings:
        flags["timings"] = "false"
    mapping.update({k: v for k, v in flags.items() if v is not None})
    problem = {"poisson": None, "elasticity-primal": "elasticity-primal",
               "elasticity-mixed": "elasticity-mixed"}.get(args.command)
    if args.command in ("poisson", "dump-operators", "report-nnz", "bench"):
        disc = args.disc or ("dg" if mapping.get("problem") == "poisson-dg" else "cg")
        problem = f"poisson-{disc}"
    mapping["problem"] = problem
    return ExperimentConfig.from_mapping(mapping)


def _write_history(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("problem", "p", "l", "lam", "iteration", "relative_residual"))
        for r in rows:
            for k, res in enumerate(r.history):
                w.writerow((r.problem, r.p, r.l, _cell(float(r.lam)), k, _fmt_float(res)))


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "dump-operators":
            for path in dump_operators(cfg, cfg.output or "operators"):
                print(path)
            return 0
        runner = {"poisson": run_poisson, "elasticity-primal": run_primal_elasticity,
                  "elasticity-mixed": run_mixed_elasticity, "report-nnz": report_nnz,
                  "bench": bench_runtime}[args.command]
        rows = runner(cfg)
    except (ConfigError, OSError, NotImplementedError) as exc:
        print(f"fdmstar: error: {exc}", file=sys.stderr)
        return 2
    except ArithmeticError as exc:
        print(f"fdmstar: solver failure: {exc}", file=sys.stderr)
        return 1
    if args.history and rows and hasattr(rows[0], "history"):
        _write_history(rows, args.history)
    if cfg.output:
        with open(cfg.output, "w", newline="") as fh:
            write_rows(rows, cfg.format, fh, cfg)
    else:
        buf = io.StringIO()
        write_rows(rows, cfg.format, buf, cfg)
        sys.stdout.write(buf.getvalue())
    return 0


if __name__ == "__main__":
    sys.exit(main())
