"""LP/QP solver tests, including the exhaustive active-set enumeration oracle.

The oracle solves small strictly convex QPs by enumerating every candidate
active set, solving the equality-constrained KKT system for each, and keeping
the best primal-dual feasible candidate. It shares no code with the interior
point method.
"""

import itertools

import numpy as np
import numpy.testing as npt
import pytest

from sampledmpc.solvers import solve_lp, solve_qp, solve_working_set


def active_set_qp_oracle(H, c, A, b, feas_tol=1e-7):
    """Global optimum of min 0.5 x'Hx + c'x, Ax <= b by active-set enumeration."""
    r, d = A.shape
    best_obj, best_x = np.inf, None
    # unconstrained candidate
    x = np.linalg.solve(H, -c)
    if r == 0 or np.all(A @ x - b <= feas_tol * (1 + np.abs(b))):
        best_obj, best_x = 0.5 * x @ H @ x + c @ x, x
    for k in range(1, d + 1):
        combos = list(itertools.combinations(range(r), k))
        if not combos:
            continue
        idx = np.array(combos)
        ncomb = len(combos)
        KKT = np.zeros((ncomb, d + k, d + k))
        KKT[:, :d, :d] = H
        Asub = A[idx]  # (ncomb, k, d)
        KKT[:, d:, :d] = Asub
        KKT[:, :d, d:] = np.transpose(Asub, (0, 2, 1))
        rhs = np.concatenate(
            [np.tile(-c, (ncomb, 1)), b[idx]], axis=1
        )
        try:
            sol = np.linalg.solve(KKT, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            sol = np.full((ncomb, d + k), np.nan)
            for j in range(ncomb):
                try:
                    sol[j] = np.linalg.solve(KKT[j], rhs[j])
                except np.linalg.LinAlgError:
                    pass
        xs, lams = sol[:, :d], sol[:, d:]
        feas = np.all(A @ xs.T - b[:, None] <= feas_tol * (1 + np.abs(b))[:, None], axis=0)
        feas &= np.all(lams >= -feas_tol, axis=1)
        feas &= np.all(np.isfinite(xs), axis=1)
        if np.any(feas):
            objs = 0.5 * np.einsum("ij,jk,ik->i", xs, H, xs) + xs @ c
            objs[~feas] = np.inf
            j = int(np.argmin(objs))
            if objs[j] < best_obj:
                best_obj, best_x = objs[j], xs[j]
    return best_obj, best_x


def random_qp(rng, d=None, r=None):
    d = d or int(rng.integers(1, 7))
    r = r or int(rng.integers(d + 1, 19))
    L = rng.normal(size=(d, d))
    H = L @ L.T + 0.1 * np.eye(d)
    c = rng.normal(size=d) * 3
    A = rng.normal(size=(r, d))
    x_feas = rng.normal(size=d)
    b = A @ x_feas + rng.uniform(0.01, 2.0, size=r)
    return H, c, A, b


def check_kkt(rep, A, b):
    assert rep.status == "optimal"
    viol = A @ rep.x - b
    assert viol.max() <= 1e-8 * (1 + np.abs(b)).max()
    assert rep.duals.min() >= -1e-8
    slack = b - A @ rep.x
    comp = np.abs(rep.duals * slack)
    scale = max(1.0, np.abs(rep.objective))
    assert comp.max() <= 1e-5 * scale


class TestLP:
    def test_interval(self):
        rep = solve_lp([-1.0], [[1.0], [-1.0]], [1.0, 0.0])
        assert rep.status == "optimal"
        npt.assert_allclose(rep.x, [1.0], atol=1e-8)
        npt.assert_allclose(rep.objective, -1.0, atol=1e-8)
        npt.assert_allclose(rep.duals, [1.0, 0.0], atol=1e-6)

    def test_triangle_vertex(self):
        # feasible wedge between y >= 0.5625 x and y <= 16/9 x, x <= 4
        A = np.array([[0.5625, -1.0], [-16.0 / 9.0, 1.0], [1.0, 0.0]])
        b = np.array([0.0, 0.0, 4.0])
        rep = solve_lp([-1.0, -1.0], A, b)
        assert rep.status == "optimal"
        npt.assert_allclose(rep.x, [4.0, 16.0 / 9.0 * 4.0], rtol=1e-7)

    def test_infeasible(self):
        rep = solve_lp([1.0], [[1.0], [-1.0]], [0.0, -1.0])
        assert rep.status == "infeasible"

    def test_unbounded(self):
        rep = solve_lp([-1.0], [[-1.0]], [0.0])
        assert rep.status == "unbounded"

    def test_zero_normal_rows(self):
        rep = solve_lp([1.0], [[0.0], [1.0], [-1.0]], [5.0, 2.0, 2.0])
        assert rep.status == "optimal"
        npt.assert_allclose(rep.x, [-2.0], atol=1e-7)
        rep = solve_lp([1.0], [[0.0], [1.0]], [-5.0, 2.0])
        assert rep.status == "infeasible"

    def test_random_lps_against_vertex_scan(self):
        rng = np.random.default_rng(7)
        for _ in range(60):
            d = 2
            r = int(rng.integers(3, 12))
            A = rng.normal(size=(r, d))
            x0 = rng.normal(size=d)
            b = A @ x0 + rng.uniform(0.05, 1.5, size=r)
            # box to keep it bounded
            A = np.vstack([A, np.eye(d), -np.eye(d)])
            b = np.concatenate([b, np.full(2 * d, 10.0)])
            c = rng.normal(size=d)
            rep = solve_lp(c, A, b)
            assert rep.status == "optimal"
            # oracle: enumerate all vertex candidates from row pairs
            best = np.inf
            for i, j in itertools.combinations(range(len(b)), 2):
                M = A[[i, j]]
                if abs(np.linalg.det(M)) < 1e-10:
                    continue
                v = np.linalg.solve(M, b[[i, j]])
                if np.all(A @ v - b <= 1e-7 * (1 + np.abs(b))):
                    best = min(best, c @ v)
            npt.assert_allclose(rep.objective, best, atol=1e-6, rtol=1e-6)
            check_kkt(rep, A, b)


class TestQP:
    def test_origin(self):
        H = 2 * np.eye(3)
        A = np.vstack([np.eye(3), -np.eye(3)])
        b = np.ones(6)
        rep = solve_qp(H, np.zeros(3), A, b)
        assert rep.status == "optimal"
        npt.assert_allclose(rep.x, np.zeros(3), atol=1e-8)

    def test_clipped_target(self):
        rep = solve_qp([[2.0]], [-4.0], [[1.0]], [1.0])
        assert rep.status == "optimal"
        npt.assert_allclose(rep.x, [1.0], atol=1e-8)
        npt.assert_allclose(rep.duals, [2.0], atol=1e-6)

    def test_infeasible(self):
        rep = solve_qp([[2.0]], [0.0], [[1.0], [-1.0]], [0.0, -1.0])
        assert rep.status == "infeasible"

    def test_oracle_equivalence_200(self):
        rng = np.random.default_rng(42)
        for i in range(200):
            if i % 10 == 0:
                H, c, A, b = random_qp(rng, d=int(rng.integers(1, 4)), r=int(rng.integers(20, 41)))
            else:
                H, c, A, b = random_qp(rng)
            rep = solve_qp(H, c, A, b)
            assert rep.status == "optimal", f"case {i}: {rep.status}"
            obj_star, _ = active_set_qp_oracle(H, c, A, b)
            scale = max(1.0, abs(obj_star))
            assert abs(rep.objective - obj_star) <= 1e-6 * scale, f"case {i}"
            check_kkt(rep, A, b)

    def test_warm_start_does_not_move_optimum(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            H, c, A, b = random_qp(rng)
            cold = solve_qp(H, c, A, b)
            warm = solve_qp(H, c, A, b, x0=cold.x + rng.normal(scale=0.1, size=len(c)))
            assert cold.status == warm.status == "optimal"
            assert abs(cold.objective - warm.objective) <= 1e-6 * max(1.0, abs(cold.objective))

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        H, c, A, b = random_qp(rng, d=5, r=15)
        r1 = solve_qp(H, c, A, b)
        r2 = solve_qp(H, c, A, b)
        assert np.array_equal(r1.x, r2.x)
        assert r1.objective == r2.objective


class TestWorkingSet:
    def test_matches_direct_on_large_lp(self):
        rng = np.random.default_rng(5)
        d, r = 10, 20000
        A = rng.normal(size=(r, d))
        b = A @ rng.normal(size=d) + rng.uniform(0.1, 3.0, size=r)
        c = rng.normal(size=d)
        big = solve_working_set(None, c, A, b)
        assert big.status == "optimal"
        ref = solve_lp(c, A, b)
        npt.assert_allclose(big.objective, ref.objective, rtol=1e-7, atol=1e-7)
        assert (A @ big.x - b).max() <= 1e-8 * (1 + np.abs(b)).max()

    def test_matches_direct_on_large_qp(self):
        rng = np.random.default_rng(6)
        d, r = 8, 12000
        L = rng.normal(size=(d, d))
        H = L @ L.T + 0.5 * np.eye(d)
        c = rng.normal(size=d)
        A = rng.normal(size=(r, d))
        b = A @ rng.normal(size=d) + rng.uniform(0.1, 3.0, size=r)
        big = solve_working_set(H, c, A, b)
        ref = solve_qp(H, c, A, b)
        assert big.status == ref.status == "optimal"
        npt.assert_allclose(big.objective, ref.objective, rtol=1e-7, atol=1e-7)

    def test_infeasible_detected(self):
        rng = np.random.default_rng(8)
        d, r = 4, 5000
        A = rng.normal(size=(r, d))
        b = A @ rng.normal(size=d) + rng.uniform(0.1, 1.0, size=r)
        A = np.vstack([A, [[1, 0, 0, 0]], [[-1, 0, 0, 0]]])
        b = np.concatenate([b, [5.0, -6.0]])  # x0 >= 6 and x0 <= 5
        rep = solve_working_set(None, np.ones(d), A, b)
        assert rep.status == "infeasible"


def test_solver_speed_smoke():
    rng = np.random.default_rng(9)
    d, r = 20, 10000
    L = rng.normal(size=(d, d))
    H = L @ L.T + np.eye(d)
    A = rng.normal(size=(r, d))
    b = A @ rng.normal(size=d) + rng.uniform(0.05, 2.0, size=r)
    c = rng.normal(size=d)
    times = []
    for _ in range(5):
        rep = solve_working_set(H, c, A, b)
        assert rep.status == "optimal"
        times.append(rep.solve_time)
    assert np.median(times) < 1.0
