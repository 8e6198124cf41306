"""Discrete optimal transport between support and query embeddings.

The solver minimises ``beta * <C, pi> + (1 - beta) * sum(pi log pi)`` over couplings
with marginals (a, b). Dividing by beta gives standard entropic OT with
``lam = (1 - beta) / beta``, solved by log-domain Sinkhorn with warm-started
annealing of ``lam`` from 1 down to its target.
"""

from __future__ import annotations

import csv
import itertools
import os
from dataclasses import dataclass

import numpy as np

LAMBDA_MIN = 1e-4
MAX_BRUTE_SQUARE = 6
MAX_BRUTE_CELLS = 12


class DegenerateRowError(ValueError):
    pass


class SizeError(ValueError):
    pass


@dataclass
class TransportPlan:
    pi: np.ndarray
    a: np.ndarray
    b: np.ndarray
    converged: bool = True
    n_iter: int = 0
    lam: float = 0.0
    cost: float = float("nan")  # <C, pi> on the unscaled costs

    def marginal_violation(self) -> float:
        return float(max(np.abs(self.pi.sum(1) - self.a).max(), np.abs(self.pi.sum(0) - self.b).max()))


def cost_matrix(s_emb, q_emb) -> np.ndarray:
    """Squared Euclidean distances, shape (n_s, n_q)."""
    s = np.atleast_2d(np.asarray(s_emb, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q_emb, dtype=np.float64))
    if s.shape[1] != q.shape[1]:
        raise ValueError(f"embedding dimensions differ: {s.shape[1]} vs {q.shape[1]}")
    # direct differences: exact zeros for equal points and c(s, q) == c(q, s).T bitwise
    return ((s[:, None, :] - q[None, :, :]) ** 2).sum(axis=2)


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def beta_to_lambda(beta: float) -> float:
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    return max((1.0 - beta) / beta, LAMBDA_MIN)


def _check_marginals(a, b, n, m):
    a = uniform(n) if a is None else np.asarray(a, dtype=np.float64)
    b = uniform(m) if b is None else np.asarray(b, dtype=np.float64)
    if a.shape != (n,) or b.shape != (m,):
        raise ValueError("marginal lengths must match the cost matrix")
    if (a <= 0).any() or (b <= 0).any():
        raise ValueError("marginals must be strictly positive")
    if abs(a.sum() - 1) > 1e-9 or abs(b.sum() - 1) > 1e-9:
        raise ValueError("marginals must each sum to 1")
    return a, b


def logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _cost_scale(c: np.ndarray) -> float:
    for s in (np.median(c), c.mean()):
        if s > 0:
            return float(s)
    return 1.0


def sinkhorn(c, a=None, b=None, beta: float = 0.5, max_iter: int = 1000, tol: float = 1e-6,
             scale_costs: bool = False) -> TransportPlan:
    """Log-domain Sinkhorn for the weighted negative-entropy objective.

    ``beta = 1`` falls back to ``lam = 1e-4`` (near-exact OT). The plan is flagged
    ``converged=False`` when the marginal violation is still >= ``tol`` after
    ``max_iter`` scaling sweeps. ``scale_costs`` divides costs by their median
    first, which multiplies the effective regularisation by that median.
    """
    c = np.asarray(c, dtype=np.float64)
    n, m = c.shape
    a, b = _check_marginals(a, b, n, m)
    lam = beta_to_lambda(beta)
    cs = c / _cost_scale(c) if scale_costs else c
    log_a, log_b = np.log(a), np.log(b)
    f, g = np.zeros(n), np.zeros(m)

    stages = []
    cur = 1.0
    while cur > lam:
        stages.append(cur)
        cur *= 0.5
    stages.append(lam)

    it = 0
    converged = False
    for k, eps in enumerate(stages):
        final = k == len(stages) - 1
        stage_tol = tol if final else max(tol, 1e-3)
        while it < max_iter:
            it += 1
            f = eps * (log_a - logsumexp((g[None, :] - cs) / eps, axis=1))
            g = eps * (log_b - logsumexp((f[:, None] - cs) / eps, axis=0))
            log_pi = (f[:, None] + g[None, :] - cs) / eps
            row_err = np.abs(np.exp(logsumexp(log_pi, axis=1)) - a).max()
            if row_err < stage_tol:
                converged = final
                break
        if it >= max_iter:
            break
    pi = np.exp((f[:, None] + g[None, :] - cs) / lam)
    plan = TransportPlan(pi=pi, a=a, b=b, converged=converged, n_iter=it, lam=lam,
                         cost=float((pi * c).sum()))
    if converged and plan.marginal_violation() >= tol:
        plan.converged = False
    return plan


def barycentric_map(plan, q_emb) -> np.ndarray:
    """Row-normalised plan times query embeddings: each support lands on the
    plan-weighted mean of the queries it sends mass to."""
    pi = plan.pi if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    q = np.atleast_2d(np.asarray(q_emb, dtype=np.float64))
    rows = pi.sum(axis=1)
    if (rows <= 0).any():
        raise DegenerateRowError(f"plan rows {np.flatnonzero(rows <= 0).tolist()} carry no mass")
    return (pi @ q) / rows[:, None]


def plan_entropy(plan) -> float:
    pi = plan.pi if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    p = pi[pi > 0]
    return float(-(p * np.log(p)).sum())


def transport_cost(c, plan) -> float:
    pi = plan.pi if isinstance(plan, TransportPlan) else plan
    return float((np.asarray(c) * pi).sum())


# ---------------------------------------------------------------- exact oracle

def enumerate_vertices(a, b):
    """Yield every basic feasible solution (vertex) of the transport polytope U(a, b)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    n, m = len(a), len(b)
    cells = [(i, j) for i in range(n) for j in range(m)]
    k = n + m - 1
    rhs = np.concatenate([a, b])
    for subset in itertools.combinations(range(n * m), k):
        mat = np.zeros((n + m, k))
        for col, idx in enumerate(subset):
            i, j = cells[idx]
            mat[i, col] = 1.0
            mat[n + j, col] = 1.0
        if np.linalg.matrix_rank(mat) < k:
            continue
        x, *_ = np.linalg.lstsq(mat, rhs, rcond=None)
        if np.abs(mat @ x - rhs).max() > 1e-9 or x.min() < -1e-12:
            continue
        pi = np.zeros((n, m))
        for col, idx in enumerate(subset):
            pi[cells[idx]] = max(x[col], 0.0)
        yield pi


def exact_ot_bruteforce(c, a=None, b=None) -> tuple[float, np.ndarray]:
    """Exact minimum-cost plan by enumeration.

    Square uniform problems up to 6x6 enumerate permutations (Birkhoff vertices);
    anything with at most 12 cells enumerates all vertices of the transport polytope.
    """
    c = np.asarray(c, dtype=np.float64)
    n, m = c.shape
    a, b = _check_marginals(a, b, n, m)
    square_uniform = n == m and np.allclose(a, 1 / n) and np.allclose(b, 1 / m)
    if square_uniform and n <= MAX_BRUTE_SQUARE:
        best, best_perm = np.inf, None
        for perm in itertools.permutations(range(n)):
            cost = c[np.arange(n), perm].sum() / n
            if cost < best:
                best, best_perm = cost, perm
        pi = np.zeros((n, m))
        pi[np.arange(n), best_perm] = 1.0 / n
        return float(best), pi
    if n * m > MAX_BRUTE_CELLS:
        raise SizeError(f"{n}x{m} is too large for brute-force transport")
    best, best_pi = np.inf, None
    for pi in enumerate_vertices(a, b):
        cost = float((c * pi).sum())
        if cost < best:
            best, best_pi = cost, pi
    return best, best_pi


def plan_to_csv(plan, path: str | os.PathLike) -> None:
    pi = plan.pi if isinstance(plan, TransportPlan) else np.asarray(plan)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "col", "mass"])
        for (i, j), v in np.ndenumerate(pi):
            w.writerow([i, j, repr(float(v))])
