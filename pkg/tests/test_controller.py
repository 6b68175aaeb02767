import itertools
import logging

import numpy as np
import pytest

from sampledmpc import synthesis as syn
from sampledmpc.controller import ControlDecision, Controller, control_step, shift_warm_start
from sampledmpc.geometry import HPolytope, chebyshev_center


def toy_artifact(n, m, T, m_w, S_tilde, K, rows_N, rows_b):
    nz = n + m * T
    return syn.ControllerArtifact(
        version="1",
        config_fingerprint="toy",
        seed=0,
        K=np.asarray(K, dtype=float),
        P=np.eye(n),
        S_tilde=np.asarray(S_tilde, dtype=float),
        D=HPolytope(np.asarray(rows_N, float).reshape(-1, nz),
                    np.asarray(rows_b, float).reshape(-1)),
        first_step=HPolytope(np.empty((0, nz)), np.empty(0)),
        X_T=HPolytope(np.empty((0, n)), np.empty(0)),
        dims={"n": n, "m": m, "m_w": m_w, "T": T},
        counts={"raw": 0, "reduced": 0},
    )


class TestToyProblems:
    def test_unconstrained_minimum_is_zero_correction(self):
        n, m, T, m_w = 4, 2, 3, 4
        nv = m * T
        S = np.zeros((n + nv + m_w, n + nv + m_w))
        S[n:n + nv, n:n + nv] = np.eye(nv)
        K = np.arange(8, dtype=float).reshape(2, 4) / 10.0
        nz = n + nv
        rows_N = np.vstack([np.eye(nz), -np.eye(nz)])
        rows_b = np.full(2 * nz, 1e3)
        art = toy_artifact(n, m, T, m_w, S, K, rows_N, rows_b)
        x = np.array([0.3, -0.2, 0.05, 0.01])
        dec = control_step(art, x)
        assert dec.qp_status == "optimal"
        assert np.linalg.norm(dec.v_star) < 1e-7
        np.testing.assert_allclose(dec.u, K @ x, atol=1e-7)
        assert abs(dec.objective) < 1e-10
        assert not dec.warm_start_used

    def test_single_active_constraint(self):
        # min v^2 s.t. v <= -1 has its optimum on the constraint
        S = np.diag([0.0, 1.0, 0.0])
        art = toy_artifact(1, 1, 1, 1, S, K=[[0.5]],
                           rows_N=[[0.0, 1.0]], rows_b=[-1.0])
        dec = control_step(art, np.zeros(1))
        assert dec.qp_status == "optimal"
        np.testing.assert_allclose(dec.v_star, [-1.0], atol=1e-8)
        np.testing.assert_allclose(dec.u, [-1.0], atol=1e-8)
        np.testing.assert_allclose(dec.objective, 1.0, atol=1e-8)

    def test_state_dependent_rhs(self):
        # row x + v <= 0 pushes the optimum to v = -x when x > 0
        S = np.diag([0.0, 1.0, 0.0])
        art = toy_artifact(1, 1, 1, 1, S, K=[[0.0]],
                           rows_N=[[1.0, 1.0]], rows_b=[0.0])
        dec = control_step(art, np.array([2.0]))
        np.testing.assert_allclose(dec.v_star, [-2.0], atol=1e-8)
        np.testing.assert_allclose(dec.u, [-2.0], atol=1e-8)

    def test_infeasible_falls_back_to_feedback(self, caplog):
        S = np.diag([0.0, 1.0, 0.0])
        art = toy_artifact(1, 1, 1, 1, S, K=[[0.5]],
                           rows_N=[[0.0, 1.0], [0.0, -1.0]],
                           rows_b=[-1.0, -2.0])
        x = np.array([3.0])
        with caplog.at_level(logging.ERROR, logger="sampledmpc.controller"):
            dec = control_step(art, x)
        assert dec.qp_status == "infeasible"
        np.testing.assert_allclose(dec.u, [1.5])
        assert np.isnan(dec.objective)
        assert any("infeasible" in r.message for r in caplog.records)

    def test_warm_start_shift(self):
        v = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        np.testing.assert_array_equal(shift_warm_start(v, 2),
                                      [3.0, 4.0, 5.0, 6.0, 0.0, 0.0])


def feasible_pair(artifact, rng, spread=0.3):
    """A (x, v) pair strictly inside D cap first_step, jittered from center."""
    A = np.vstack([artifact.D.normals, artifact.first_step.normals])
    b = np.concatenate([artifact.D.offsets, artifact.first_step.offsets])
    center, radius = chebyshev_center(HPolytope(A, b))
    assert radius > 0
    for _ in range(100):
        z = center + rng.normal(size=center.size) * spread * radius
        if np.all(A @ z <= b - 1e-9):
            return z
    return center


def oracle_objective(H, c, A, b, kmax=4, tol=1e-9):
    """Exhaustive KKT enumeration over active sets of size <= kmax.

    For a strictly convex QP any KKT point is the optimum, so the first
    subset whose equality solution is primal feasible with nonnegative
    multipliers settles it.
    """
    r, d = A.shape
    best = None
    Hinv = np.linalg.inv(H)
    for k in range(0, kmax + 1):
        for W in itertools.combinations(range(r), k):
            Aw = A[list(W)]
            if k:
                M = Aw @ Hinv @ Aw.T
                try:
                    lam = np.linalg.solve(M, -(Aw @ Hinv @ c + b[list(W)]))
                except np.linalg.LinAlgError:
                    continue
                # KKT: Hv + c + Aw' lam = 0, Aw v = bw
                v = -Hinv @ (c + Aw.T @ lam)
                if np.any(lam < -tol):
                    continue
            else:
                v = -Hinv @ c
            resid = A @ v - b
            if np.max(resid) > 1e-7 * (1.0 + np.max(np.abs(b))):
                continue
            obj = 0.5 * v @ H @ v + c @ v
            if best is None or obj < best:
                best = obj
        if best is not None:
            return best
    return best


class TestAgainstArtifact:
    def test_matches_active_set_enumeration(self, tiny_synth):
        _, art, _ = tiny_synth
        n = art.dims["n"]
        m = art.dims["m"]
        nv = m * art.dims["T"]
        m_w = art.dims["m_w"]
        S = art.S_tilde
        rng = np.random.default_rng(11)

        A_full = np.vstack([art.D.normals, art.first_step.normals])
        b_full = np.concatenate([art.D.offsets, art.first_step.offsets])
        z = feasible_pair(art, rng)
        x = z[:n]

        # subsample rows, always keeping those active at the solver optimum
        dec = control_step(art, x)
        assert dec.qp_status == "optimal"
        act = set(dec.active_rows.tolist())
        pool = [i for i in range(A_full.shape[0]) if i not in act]
        extra = rng.choice(len(pool), size=min(40 - len(act), len(pool)),
                           replace=False)
        rows = sorted(act | {pool[i] for i in extra})
        assert len(rows) <= 40

        sub = syn.ControllerArtifact(
            version="1", config_fingerprint="sub", seed=0,
            K=art.K, P=art.P, S_tilde=art.S_tilde,
            D=HPolytope(A_full[rows], b_full[rows]),
            first_step=HPolytope(np.empty((0, n + nv)), np.empty(0)),
            X_T=art.X_T, dims=art.dims, counts=art.counts)
        got = control_step(sub, x)
        assert got.qp_status == "optimal"

        H = 2.0 * S[n:n + nv, n:n + nv]
        c = 2.0 * (S[n:n + nv, :n] @ x + S[n:n + nv, n + nv:] @ np.ones(m_w))
        rhs = b_full[rows] - A_full[rows][:, :n] @ x
        want = oracle_objective(H, c, A_full[rows][:, n:], rhs)
        assert want is not None
        ones = np.ones(m_w)
        const = x @ S[:n, :n] @ x + 2.0 * x @ S[:n, n + nv:] @ ones \
            + ones @ S[n + nv:, n + nv:] @ ones
        np.testing.assert_allclose(got.objective, want + const, atol=1e-6)

    def test_input_bound_on_optimal_steps(self, tiny_synth):
        _, art, _ = tiny_synth
        lim = 0.3
        rng = np.random.default_rng(3)
        for _ in range(20):
            z = feasible_pair(art, rng, spread=0.8)
            dec = control_step(art, z[:art.dims["n"]])
            if dec.qp_status == "optimal":
                assert np.max(np.abs(dec.u)) <= lim + 1e-6

    def test_warm_start_reused_and_faster_path(self, tiny_synth):
        _, art, _ = tiny_synth
        rng = np.random.default_rng(5)
        z = feasible_pair(art, rng)
        ctl = Controller(art)
        d1 = ctl.step(z[:4])
        assert not d1.warm_start_used
        # one nominal-step evolution keeps us near the previous solution
        d2 = ctl.step(z[:4] * 0.98)
        assert d2.warm_start_used
        assert d2.qp_status == "optimal"

    def test_decision_fields(self, tiny_synth):
        _, art, _ = tiny_synth
        rng = np.random.default_rng(7)
        z = feasible_pair(art, rng)
        dec = control_step(art, z[:4])
        assert isinstance(dec, ControlDecision)
        assert dec.u.shape == (2,)
        assert dec.v_star.shape == (20,)
        assert dec.solve_time > 0
        assert np.isfinite(dec.objective)
