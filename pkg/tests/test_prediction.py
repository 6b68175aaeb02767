import numpy as np
import pytest
from numpy.testing import assert_allclose

from sampledmpc.model import UncertainModel
from sampledmpc.prediction import (
    CostMatrix,
    cost_matrix,
    transfer_blocks_iter,
    transfer_matrices,
)

Q_W = np.diag([1e4, 1e4, 1e8, 1e8])
R_W = np.diag([1e6, 1e6])


def point_model(q=None, w_bound=5e-3):
    q = UncertainModel().nominal_q if q is None else np.asarray(q, float)
    return UncertainModel(q_ranges=np.column_stack([q, q]), w_bound=w_bound)


def rollout_cost(model, q_seq, w_seq, K, x, v, Q, R, P):
    """Step-by-step simulation of the closed-loop prediction cost."""
    T = len(w_seq)
    xc = np.asarray(x, float).copy()
    total = 0.0
    for l in range(T):
        Ad, Bd = model.discretize(q_seq[l])
        u = K @ xc + v[2 * l : 2 * l + 2]
        total += xc @ Q @ xc + u @ R @ u
        xc = Ad @ xc + Bd @ u + w_seq[l]
    return total + xc @ P @ xc


class TestTransferMatrices:
    def test_step_zero_blocks(self):
        model = UncertainModel()
        rng = np.random.default_rng(0)
        ops = transfer_matrices(model.sample_q(rng, 4), np.zeros((2, 4)), 4, model)
        assert_allclose(ops.phi0[0], np.eye(4))
        assert np.all(ops.phiv[0] == 0) and np.all(ops.phiw[0] == 0)
        assert ops.horizon == 4

    def test_one_step_unrolling(self):
        model = UncertainModel()
        rng = np.random.default_rng(1)
        K = rng.standard_normal((2, 4)) * 0.1
        q = model.sample_q(rng, 3)
        ops = transfer_matrices(q, K, 3, model)
        Ad, Bd = model.discretize(q[0])
        assert_allclose(ops.phi0[1], Ad + Bd @ K, atol=1e-15)
        assert_allclose(ops.phiv[1][:, :2], Bd, atol=1e-15)
        assert np.all(ops.phiv[1][:, 2:] == 0)
        assert_allclose(ops.phiw[1][:, :4], np.eye(4), atol=1e-15)
        assert np.all(ops.phiw[1][:, 4:] == 0)

    def test_gamma_selects_block(self):
        model = UncertainModel()
        ops = transfer_matrices(model.vertex_q()[:5], np.zeros((2, 4)), 5, model)
        v = np.arange(10.0)
        for l in range(5):
            assert_allclose(ops.gamma[l] @ v, v[2 * l : 2 * l + 2])

    def test_rollout_identity(self):
        model = UncertainModel()
        rng = np.random.default_rng(7)
        T = 5
        K = rng.standard_normal((2, 4)) * 0.2
        q_seq = model.sample_q(rng, T)
        w_seq = model.sample_w(rng, T)
        x = rng.standard_normal(4)
        v = rng.standard_normal(2 * T)
        ops = transfer_matrices(q_seq, K, T, model)
        w_flat = w_seq.ravel()
        xc = x.copy()
        for l in range(T + 1):
            pred = ops.phi0[l] @ x + ops.phiv[l] @ v + ops.phiw[l] @ w_flat
            assert_allclose(pred, xc, rtol=0, atol=1e-10)
            if l < T:
                Ad, Bd = model.discretize(q_seq[l])
                xc = Ad @ xc + Bd @ (K @ xc + v[2 * l : 2 * l + 2]) + w_seq[l]

    def test_short_q_seq_rejected(self):
        model = UncertainModel()
        with pytest.raises(ValueError, match="q_seq"):
            transfer_matrices(model.sample_q(np.random.default_rng(0), 2), np.zeros((2, 4)), 3, model)


class TestTransferBlocksIter:
    def test_matches_reference_lists(self):
        model = UncertainModel()
        rng = np.random.default_rng(3)
        T, Mb = 6, 7
        K = rng.standard_normal((2, 4)) * 0.1
        qs = model.sample_q(rng, Mb * T).reshape(Mb, T, 4)
        Ads, Bds = model.discretize_batch(qs.reshape(-1, 4))
        Ads = Ads.reshape(Mb, T, 4, 4)
        Bds = Bds.reshape(Mb, T, 4, 2)
        Acl = Ads + Bds @ K
        blocks = list(transfer_blocks_iter(Acl, Bds))
        assert len(blocks) == T + 1
        for i in range(Mb):
            ops = transfer_matrices(qs[i], K, T, model)
            for l in range(T + 1):
                ref = np.hstack([ops.phi0[l], ops.phiv[l], ops.phiw[l]])
                assert_allclose(blocks[l][i], ref, rtol=1e-13, atol=1e-15)


class TestCostMatrix:
    def test_one_step_closed_form(self):
        model = point_model(w_bound=0.0)
        A, B = model.discretize(model.nominal_q)
        P = np.diag([3.0, 1.0, 7.0, 2.0])
        cm = cost_matrix(np.zeros((2, 4)), 1, (Q_W, R_W, P), model, M=100,
                         rng=np.random.default_rng(0))
        S = cm.S_tilde
        assert S.shape == (10, 10)
        expected = np.block([
            [Q_W + A.T @ P @ A, A.T @ P @ B],
            [B.T @ P @ A, R_W + B.T @ P @ B],
        ])
        assert_allclose(S[:6, :6], expected, rtol=1e-12, atol=1e-9)
        assert np.all(S[6:, :] == 0) if model.w_bound == 0 else True

    def test_zero_weights_zero_matrix(self):
        model = UncertainModel()
        Z = np.zeros((4, 4))
        cm = cost_matrix(np.zeros((2, 4)), 3, (Z, np.zeros((2, 2)), Z), model,
                         M=100, rng=np.random.default_rng(1))
        assert np.all(cm.S_tilde == 0)

    def test_mean_rollout_equals_quadratic_form(self):
        # unbiasedness by linearity: the quadratic form under the averaged
        # matrix must equal the average of per-sample rollout costs exactly
        model = UncertainModel()
        T, M = 4, 120
        rng = np.random.default_rng(11)
        K = rng.standard_normal((2, 4)) * 0.1
        P = np.diag([1e6, 1e6, 1e7, 1e7])
        cm = cost_matrix(K, T, (Q_W, R_W, P), model, M=M,
                         rng=np.random.default_rng(42))
        # replay the sample streams: q first (M*T draws), then w (M, T)
        rng2 = np.random.default_rng(42)
        qs = model.sample_q(rng2, M * T).reshape(M, T, 4)
        ws = model.sample_w(rng2, (M, T))
        x = np.array([0.7, 0.7, -0.01, 0.02])
        v = rng.standard_normal(2 * T) * 0.1
        costs = [rollout_cost(model, qs[i], ws[i], K, x, v, Q_W, R_W, P)
                 for i in range(M)]
        z = np.concatenate([x, v, np.ones(4)])
        assert_allclose(z @ cm.S_tilde @ z, np.mean(costs), rtol=1e-8)

    def test_deterministic_scenario_matches_rollout(self):
        # collapsed ranges and zero noise: every sample is the same scenario,
        # so the averaged matrix reproduces that scenario's cost exactly
        model = point_model(w_bound=0.0)
        T = 3
        rng = np.random.default_rng(5)
        K = rng.standard_normal((2, 4)) * 0.05
        P = np.diag([2.0, 2.0, 9.0, 9.0])
        cm = cost_matrix(K, T, (Q_W, R_W, P), model, M=100,
                         rng=np.random.default_rng(0))
        x = np.array([1.0, -2.0, 0.03, -0.04])
        v = rng.standard_normal(2 * T)
        q_seq = np.repeat(model.nominal_q[None], T, axis=0)
        expected = rollout_cost(model, q_seq, np.zeros((T, 4)), K, x, v, Q_W, R_W, P)
        z = np.concatenate([x, v, np.ones(4)])
        assert_allclose(z @ cm.S_tilde @ z, expected, rtol=1e-10)

    def test_two_estimates_agree_within_one_percent(self):
        model = UncertainModel()
        P = np.diag([1e6, 1e6, 1e7, 1e7])
        a = cost_matrix(np.zeros((2, 4)), 10, (Q_W, R_W, P), model, M=5000,
                        rng=np.random.default_rng(1)).S_tilde[:24, :24]
        b = cost_matrix(np.zeros((2, 4)), 10, (Q_W, R_W, P), model, M=5000,
                        rng=np.random.default_rng(2)).S_tilde[:24, :24]
        # entries below 1e-3 of the dominant scale are sampling noise around
        # small means; flooring the denominator keeps the check meaningful
        denom = np.maximum(0.5 * (np.abs(a) + np.abs(b)), 1e-3 * np.abs(a).max())
        assert np.max(np.abs(a - b) / denom) <= 0.01

    def test_constant_q_draw_pattern(self):
        calls = []

        class Probe(UncertainModel):
            def sample_q(self, rng, n=None):
                calls.append(n)
                return super().sample_q(rng, n)

        model = Probe()
        P = np.eye(4)
        cost_matrix(np.zeros((2, 4)), 5, (Q_W, R_W, P), model, M=100,
                    rng=np.random.default_rng(0), constant_q=True)
        cost_matrix(np.zeros((2, 4)), 5, (Q_W, R_W, P), model, M=100,
                    rng=np.random.default_rng(0), constant_q=False)
        assert calls == [100, 500]

    def test_seed_determinism(self):
        model = UncertainModel()
        P = np.eye(4)
        a = cost_matrix(np.zeros((2, 4)), 3, (Q_W, R_W, P), model, M=100,
                        rng=np.random.default_rng(9)).S_tilde
        b = cost_matrix(np.zeros((2, 4)), 3, (Q_W, R_W, P), model, M=100,
                        rng=np.random.default_rng(9)).S_tilde
        assert np.array_equal(a, b)

    def test_symmetry_and_psd_block(self):
        model = UncertainModel()
        P = np.diag([1e6, 1e6, 1e7, 1e7])
        S = cost_matrix(np.zeros((2, 4)), 10, (Q_W, R_W, P), model, M=200,
                        rng=np.random.default_rng(3)).S_tilde
        assert S.shape == (28, 28)
        assert np.array_equal(S, S.T)
        assert np.linalg.eigvalsh(S[:24, :24]).min() > 0

    def test_indefinite_weights_rejected(self):
        model = UncertainModel()
        with pytest.raises(RuntimeError, match="cost estimation failed"):
            cost_matrix(np.zeros((2, 4)), 2, (-np.eye(4), -np.eye(2), -np.eye(4)),
                        model, M=100, rng=np.random.default_rng(0))

    def test_small_sample_count_rejected(self):
        model = UncertainModel()
        with pytest.raises(ValueError):
            cost_matrix(np.zeros((2, 4)), 2, (Q_W, R_W, np.eye(4)), model, M=50,
                        rng=np.random.default_rng(0))
