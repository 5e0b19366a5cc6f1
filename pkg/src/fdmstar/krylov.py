"""Krylov solvers with convergence telemetry.

All solvers start from a zero initial guess and stop once the Euclidean norm
of the true (unpreconditioned) residual has dropped by ``rtol`` relative to
the right-hand side.  The iteration that first meets the tolerance is
counted.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

__all__ = ["KrylovReport", "IndefiniteError", "pcg", "minres", "gmres_restarted",
           "lanczos_tridiagonal", "lanczos_extremes"]


class IndefiniteError(ArithmeticError):
    pass


@dataclass
class KrylovReport:
    iterations: int = 0
    history: list = field(default_factory=list)  # relative residuals, entry 0 is 1.0
    kappa: float | None = None
    lambda_min: float | None = None
    lambda_max: float | None = None
    converged: bool = False
    wall_time: float = 0.0

    @property
    def final_residual(self):
        return self.history[-1] if self.history else np.nan


def _as_apply(M):
    if M is None:
        return lambda r: r.copy()
    if callable(M):
        return M
    return lambda r: M @ r


def lanczos_tridiagonal(alphas, betas):
    """Lanczos matrix from CG step lengths ``alpha_k`` and ratios ``beta_k``."""
    k = len(alphas)
    T = np.zeros((k, k))
    for i in range(k):
        T[i, i] = 1.0 / alphas[i] + (betas[i - 1] / alphas[i - 1] if i > 0 else 0.0)
        if i + 1 < k:
            T[i, i + 1] = T[i + 1, i] = np.sqrt(betas[i]) / alphas[i]
    return T


def lanczos_extremes(alphas, betas):
    if not alphas:
        return np.nan, np.nan
    ev = np.linalg.eigvalsh(lanczos_tridiagonal(alphas, betas))
    return float(ev[0]), float(ev[-1])


def pcg(A, P, b, rtol=1e-8, maxit=1000, callback=None):
    """Preconditioned conjugate gradients with a CG-Lanczos condition estimate."""
    t0 = time.perf_counter()
    Aop, Pop = _as_apply(A), _as_apply(P)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    nb = np.linalg.norm(b)
    rep = KrylovReport(history=[1.0])
    if nb == 0:
        rep.converged = True
        rep.kappa = 1.0
        rep.wall_time = time.perf_counter() - t0
        return x, rep
    z = Pop(r)
    p = z.copy()
    rz = r @ z
    if not rz > 0:
        raise IndefiniteError("preconditioner is not positive definite")
    alphas, betas = [], []
    for k in range(1, maxit + 1):
        Ap = Aop(p)
        pAp = p @ Ap
        if not pAp > 0:
            raise IndefiniteError(f"p^T A p = {pAp:.3e} <= 0 at iteration {k}")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        alphas.append(alpha)
        res = np.linalg.norm(r) / nb
        rep.history.append(res)
        rep.iterations = k
        if callback is not None:
            callback(k, res)
        if res <= rtol:
            rep.converged = True
            break
        z = Pop(r)
        rz_new = r @ z
        if not rz_new > 0:
            raise IndefiniteError(f"preconditioner is not positive definite at iteration {k}")
        beta = rz_new / rz
        betas.append(beta)
        rz = rz_new
        p = z + beta * p
    lo, hi = lanczos_extremes(alphas, betas)
    rep.lambda_min, rep.lambda_max = lo, hi
    rep.kappa = hi / lo if lo > 0 else np.inf
    rep.wall_time = time.perf_counter() - t0
    return x, rep


def minres(A, P, b, rtol=1e-8, maxit=1000, callback=None):
    """Preconditioned MINRES for symmetric (indefinite) systems with an SPD
    preconditioner.  The true residual is carried along by a recurrence on
    ``A w`` so no extra operator applications are needed.
    """
    t0 = time.perf_counter()
    Aop, Pop = _as_apply(A), _as_apply(P)
    b = np.asarray(b, dtype=float)
    n = len(b)
    x = np.zeros(n)
    nb = np.linalg.norm(b)
    rep = KrylovReport(history=[1.0])
    if nb == 0:
        rep.converged = True
        rep.wall_time = time.perf_counter() - t0
        return x, rep
    r_true = b.copy()
    r1 = b.copy()
    y = Pop(r1)
    beta1 = r1 @ y
    if beta1 < 0:
        raise IndefiniteError("preconditioner is not positive definite")
    beta1 = np.sqrt(beta1)
    oldb, beta, dbar, epsln, phibar = 0.0, beta1, 0.0, 0.0, beta1
    cs, sn = -1.0, 0.0
    w = np.zeros(n)
    w2 = np.zeros(n)
    Aw = np.zeros(n)
    Aw2 = np.zeros(n)
    r2 = r1.copy()
    for k in range(1, maxit + 1):
        s = 1.0 / beta
        v = s * y
        Av = Aop(v)
        y = Av.copy()
        if k >= 2:
            y = y - (beta / oldb) * r1
        alfa = v @ y
        y = y - (alfa / beta) * r2
        r1 = r2
        r2 = y
        y = Pop(r2)
        oldb = beta
        beta = r2 @ y
        if beta < 0:
            raise IndefiniteError(f"preconditioner is not positive definite at iteration {k}")
        beta = np.sqrt(beta)
        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        gamma = max(np.hypot(gbar, beta), np.finfo(float).tiny)
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        phibar = sn * phibar
        denom = 1.0 / gamma
        w1, w2 = w2, w
        Aw1, Aw2 = Aw2, Aw
        w = (v - oldeps * w1 - delta * w2) * denom
        Aw = (Av - oldeps * Aw1 - delta * Aw2) * denom
        x += phi * w
        r_true -= phi * Aw
        res = np.linalg.norm(r_true) / nb
        rep.history.append(res)
        rep.iterations = k
        if callback is not None:
            callback(k, res)
        if res <= rtol:
            rep.converged = True
            break
        if beta == 0:
            break
    rep.wall_time = time.perf_counter() - t0
    return x, rep


def gmres_restarted(A, P, b, restart=30, rtol=1e-8, maxit=1000, callback=None):
    """Right-preconditioned restarted GMRES with modified Gram-Schmidt."""
    t0 = time.perf_counter()
    Aop, Pop = _as_apply(A), _as_apply(P)
    b = np.asarray(b, dtype=float)
    n = len(b)
    x = np.zeros(n)
    nb = np.linalg.norm(b)
    rep = KrylovReport(history=[1.0])
    if nb == 0:
        rep.converged = True
        rep.wall_time = time.perf_counter() - t0
        return x, rep
    total = 0
    while total < maxit:
        r = b - Aop(x)
        beta = np.linalg.norm(r)
        if beta / nb <= rtol:
            rep.converged = True
            break
        m = min(restart, maxit - total)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        j_done = 0
        start_res = beta / nb
        for j in range(m):
            Z[j] = Pop(V[j])
            w = Aop(Z[j])
            for i in range(j + 1):
                H[i, j] = w @ V[i]
                w = w - H[i, j] * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            if H[j + 1, j] > 0:
                V[j + 1] = w / H[j + 1, j]
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            den = np.hypot(H[j, j], H[j + 1, j])
            cs[j] = H[j, j] / den if den > 0 else 1.0
            sn[j] = H[j + 1, j] / den if den > 0 else 0.0
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            total += 1
            j_done = j + 1
            res = abs(g[j + 1]) / nb
            rep.history.append(res)
            if callback is not None:
                callback(total, res)
            if res <= rtol or H[j, j] == 0 or den == 0:
                break
        yk = np.linalg.solve(np.triu(H[:j_done, :j_done]), g[:j_done]) if j_done else np.zeros(0)
        x = x + Z[:j_done].T @ yk
        rep.iterations = total
        if rep.history[-1] <= rtol:
            rep.converged = True
            break
        if rep.history[-1] >= start_res * (1 - 1e-14):
            break  # stagnation over a full cycle
    rep.iterations = total
    rep.wall_time = time.perf_counter() - t0
    return x, rep
