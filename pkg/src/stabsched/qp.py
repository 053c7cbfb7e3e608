"""Primal active-set solver for convex quadratic programs.

Solves    min  1/2 x^T H x + f^T x   s.t.  A x <= b
with H symmetric positive semidefinite. Steps are computed in the null space
of the working-set rows, so a singular H is handled as long as the reduced
problem stays bounded. Feasible starts come from a strictly convex phase-1
problem solved with the same iteration core. All pivot ties break toward the
lowest constraint index, which makes the solver bitwise deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QpInfeasibleError(RuntimeError):
    """No point satisfies the constraints; carries an approximate certificate."""

    def __init__(self, rows):
        self.certificate = tuple(int(r) for r in rows)
        super().__init__(f"infeasible constraint system; inconsistent rows {self.certificate}")


class QpUnboundedError(RuntimeError):
    """The objective decreases along an unblocked feasible ray."""


@dataclass(frozen=True)
class QpResult:
    x: np.ndarray
    active_set: tuple[int, ...]      # rows with strictly positive multipliers
    multipliers: np.ndarray          # one per constraint row, zero when inactive
    objective: float
    iterations: int


_STEP_TOL = 1e-11
_MULT_TOL = 1e-10
_CURV_TOL = 1e-11
_SLOPE_TOL = 1e-9


def solve_qp(H, f, A, b, x0=None, max_iter=None) -> QpResult:
    """KKT point of the inequality-constrained convex QP.

    `x0`, when given and feasible, skips the phase-1 solve. Raises
    QpInfeasibleError / QpUnboundedError on the respective degenerate cases.
    """
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = H.shape[0]
    if A.size == 0:
        A = A.reshape(0, n)
        b = b.reshape(0)
    m = A.shape[0]
    feas_tol = 1e-8 * max(1.0, np.abs(b).max() if m else 1.0)

    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if m and np.max(A @ x0 - b) > feas_tol:
            x0 = None
    if x0 is None:
        x0 = _phase1(A, b, feas_tol) if m else np.zeros(n)

    if max_iter is None:
        max_iter = 50 * (n + m) + 100
    return _active_set_iterate(H, f, A, b, x0, max_iter)


def _phase1(A, b, feas_tol):
    """Feasible point via min eps*|x|^2/2 + s^2/2 + s  s.t.  Ax - s <= b, s >= 0."""
    m, n = A.shape
    scale = max(1.0, np.abs(A).max(), np.abs(b).max())
    eps = 1e-12 * scale
    H1 = np.diag(np.concatenate([np.full(n, eps), [1.0]]))
    f1 = np.concatenate([np.zeros(n), [scale]])
    A1 = np.block([[A, -np.ones((m, 1))], [np.zeros((1, n)), -np.ones((1, 1))]])
    b1 = np.concatenate([b, [0.0]])
    s0 = max(0.0, float(np.max(-b))) + 1.0
    start = np.concatenate([np.zeros(n), [s0]])
    res = _active_set_iterate(H1, f1, A1, b1, start, 100 * (n + m) + 200)
    s_star = res.x[-1]
    if s_star > feas_tol:
        rows = [r for r in res.active_set if r < m and res.multipliers[r] > _MULT_TOL]
        raise QpInfeasibleError(rows if rows else range(m))
    return res.x[:n]


def _objective(H, f, x):
    return float(0.5 * x @ H @ x + f @ x)


def _active_set_iterate(H, f, A, b, x, max_iter) -> QpResult:
    n = len(x)
    m = A.shape[0]
    working = _independent_active_rows(A, b, x)
    x = x.copy()
    iterations = 0
    prev_obj = _objective(H, f, x)
    obj_scale = 1.0 + abs(prev_obj)

    while iterations < max_iter:
        iterations += 1
        g = H @ x + f
        Aw = A[working] if working else np.zeros((0, n))
        Z, Q1, R1 = _null_space(Aw, n)

        d, ray = _reduced_step(H, g, Z)
        if ray is not None:
            alpha, block = _ratio_test(A, b, x, ray, working, cap=None)
            if block is None:
                raise QpUnboundedError("objective unbounded along a feasible ray")
            x = x + alpha * ray
            prev_obj = _check_descent(H, f, x, prev_obj, obj_scale)
            working.append(block)
            working.sort()
            continue

        if np.linalg.norm(d) <= _STEP_TOL * (1.0 + np.linalg.norm(x)):
            if not working:
                return _finish(H, f, A, b, x, {}, iterations)
            lam_w = _working_multipliers(g, Q1, R1)
            worst = None
            for k, row in enumerate(working):
                if lam_w[k] < -_MULT_TOL and (worst is None or lam_w[k] < lam_w[worst]):
                    worst = k
            if worst is None:
                return _finish(H, f, A, b, x, dict(zip(working, lam_w)), iterations)
            del working[worst]
            continue

        alpha, block = _ratio_test(A, b, x, d, working, cap=1.0)
        x = x + alpha * d
        prev_obj = _check_descent(H, f, x, prev_obj, obj_scale)
        if block is not None:
            working.append(block)
            working.sort()

    raise RuntimeError(f"active-set iteration limit ({max_iter}) exceeded")


def _check_descent(H, f, x, prev_obj, scale):
    # the exact line steps of the method never increase the objective
    obj = _objective(H, f, x)
    if obj > prev_obj + 1e-9 * scale:
        raise RuntimeError(f"objective increased across an active-set step "
                           f"({prev_obj} -> {obj})")
    return min(obj, prev_obj)


def _independent_active_rows(A, b, x):
    """Initial working set: active rows, greedily kept while independent."""
    if A.shape[0] == 0:
        return []
    resid = b - A @ x
    tol = 1e-9 * max(1.0, np.abs(b).max())
    rows = [int(i) for i in np.flatnonzero(resid <= tol)]
    chosen: list[int] = []
    basis = np.zeros((0, A.shape[1]))
    for r in rows:
        if len(chosen) == A.shape[1]:
            break
        cand = np.vstack([basis, A[r]])
        if np.linalg.matrix_rank(cand, tol=1e-10 * max(1.0, np.abs(A).max())) > len(chosen):
            chosen.append(r)
            basis = cand
    return chosen


def _null_space(Aw, n):
    if Aw.shape[0] == 0:
        return np.eye(n), None, None
    q, r = np.linalg.qr(Aw.T, mode="complete")
    k = Aw.shape[0]
    return q[:, k:], q[:, :k], r[:k, :]


def _reduced_step(H, g, Z):
    """Newton step in the working-set null space, or a descent ray when the
    reduced Hessian is singular along a direction of negative slope."""
    if Z.shape[1] == 0:
        return np.zeros(len(g)), None
    Hz = Z.T @ H @ Z
    gz = Z.T @ g
    vals, vecs = np.linalg.eigh(Hz)
    scale = max(vals.max(), 1.0) if vals.size else 1.0
    proj = vecs.T @ gz
    small = vals <= _CURV_TOL * scale
    slope_scale = _SLOPE_TOL * (1.0 + np.linalg.norm(gz))
    for i in np.flatnonzero(small):
        if abs(proj[i]) > slope_scale:
            ray = Z @ vecs[:, i]
            return None, -np.sign(proj[i]) * ray
    inv = np.where(small, 0.0, 1.0 / np.where(small, 1.0, vals))
    dz = -vecs @ (inv * proj)
    return Z @ dz, None


def _ratio_test(A, b, x, d, working, cap):
    """Largest feasible step along d; ties broken toward the lowest row index."""
    alpha = cap if cap is not None else np.inf
    block = None
    if A.shape[0]:
        ad = A @ d
        resid = b - A @ x
        thresh = 1e-12 * max(1.0, float(np.abs(ad).max()))
        in_working = np.zeros(A.shape[0], dtype=bool)
        in_working[working] = True
        for i in np.flatnonzero((ad > thresh) & ~in_working):
            step = max(resid[i], 0.0) / ad[i]
            if step < alpha - 1e-14:
                alpha = step
                block = int(i)
    if not np.isfinite(alpha):
        return None, None
    return max(alpha, 0.0), block


def _working_multipliers(g, Q1, R1):
    # Stationarity H x + f + Aw^T lam = 0  =>  Aw^T lam = -g.
    rhs = Q1.T @ (-g)
    return np.linalg.solve(R1, rhs) if R1.shape[0] else np.zeros(0)


def _finish(H, f, A, b, x, lam_by_row, iterations):
    m = A.shape[0]
    multipliers = np.zeros(m)
    for row, lam in lam_by_row.items():
        multipliers[row] = max(float(lam), 0.0)
    active = tuple(int(r) for r in sorted(lam_by_row) if multipliers[r] > _MULT_TOL)
    objective = float(0.5 * x @ H @ x + f @ x)
    return QpResult(x=x, active_set=active, multipliers=multipliers,
                    objective=objective, iterations=iterations)
