"""Active-set QP solver against hand KKT points and exhaustive enumeration."""
import itertools

import numpy as np
import pytest

from stabsched.qp import QpInfeasibleError, QpUnboundedError, solve_qp


def enumerate_qp(H, f, A, b, tol=1e-8):
    """Reference optimum: try every working-set subset's KKT system."""
    n, m = H.shape[0], A.shape[0]
    best = None
    for k in range(n + 1):
        for subset in itertools.combinations(range(m), k):
            rows = A[list(subset)]
            if k and np.linalg.matrix_rank(rows) < k:
                continue
            kkt = np.block([[H, rows.T], [rows, np.zeros((k, k))]])
            rhs = np.concatenate([-f, b[list(subset)]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if m and np.max(A @ x - b) > tol:
                continue
            if k and lam.min() < -tol:
                continue
            obj = 0.5 * x @ H @ x + f @ x
            if best is None or obj < best:
                best = obj
    return best


def test_scalar_bound_kkt_by_hand():
    # min x^2 s.t. x >= 1: optimum 1 with multiplier 2
    res = solve_qp(np.array([[2.0]]), np.array([0.0]),
                   np.array([[-1.0]]), np.array([-1.0]))
    assert abs(res.x[0] - 1.0) <= 1e-9
    assert abs(res.multipliers[0] - 2.0) <= 1e-8
    assert res.active_set == (0,)


def test_unconstrained_strictly_convex():
    H = np.array([[2.0, 0.3], [0.3, 1.5]])
    f = np.array([1.0, -2.0])
    res = solve_qp(H, f, np.zeros((0, 2)), np.zeros(0))
    assert np.allclose(res.x, -np.linalg.solve(H, f), atol=1e-10)
    assert res.active_set == ()


def test_random_qps_match_enumeration(rng):
    worst = 0.0
    for _ in range(50):
        n, m = 5, 8
        root = rng.normal(size=(n, n))
        H = root @ root.T + np.eye(n)
        f = rng.normal(size=n)
        A = rng.normal(size=(m, n))
        feas = rng.normal(size=n)
        slack = rng.uniform(0.1, 1.0, size=m) * rng.choice([0.0, 1.0], size=m, p=[0.3, 0.7])
        b = A @ feas + slack
        res = solve_qp(H, f, A, b)
        assert np.max(A @ res.x - b) <= 1e-8
        grad = H @ res.x + f + A.T @ res.multipliers
        assert np.linalg.norm(grad) <= 1e-9 * (1.0 + np.linalg.norm(f)) * 10
        reference = enumerate_qp(H, f, A, b)
        worst = max(worst, abs(res.objective - reference))
    assert worst <= 1e-7


def test_complementary_slackness(rng):
    for _ in range(20):
        n, m = 4, 6
        root = rng.normal(size=(n, n))
        H = root @ root.T + 0.5 * np.eye(n)
        f = rng.normal(size=n)
        A = rng.normal(size=(m, n))
        b = A @ rng.normal(size=n) + rng.uniform(0.0, 1.0, size=m)
        res = solve_qp(H, f, A, b)
        slack = b - A @ res.x
        assert np.abs(res.multipliers * slack).max() <= 1e-8


def test_infeasible_certificate():
    with pytest.raises(QpInfeasibleError) as err:
        solve_qp(np.array([[2.0]]), np.array([0.0]),
                 np.array([[1.0], [-1.0]]), np.array([0.0, -1.0]))
    assert set(err.value.certificate) <= {0, 1}
    assert err.value.certificate


def test_unbounded_direction_detected():
    # flat objective along x2 with only an upper bound: unbounded below
    with pytest.raises(QpUnboundedError):
        solve_qp(np.zeros((2, 2)), np.array([0.0, 1.0]),
                 np.array([[0.0, 1.0]]), np.array([1.0]))


def test_singular_hessian_bounded_by_constraints():
    res = solve_qp(np.diag([2.0, 0.0]), np.array([0.0, 1.0]),
                   np.array([[0.0, 1.0], [0.0, -1.0]]), np.array([3.0, -2.0]))
    assert abs(res.x[1] - 2.0) <= 1e-9


def test_deterministic_resolves(rng):
    root = rng.normal(size=(5, 5))
    H = root @ root.T + np.eye(5)
    f = rng.normal(size=5)
    A = rng.normal(size=(8, 5))
    b = A @ rng.normal(size=5) + rng.uniform(0.1, 1.0, size=8)
    first = solve_qp(H, f, A, b)
    second = solve_qp(H, f, A, b)
    assert np.array_equal(first.x, second.x)
    assert np.array_equal(first.multipliers, second.multipliers)
