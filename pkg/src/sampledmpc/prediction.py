"""Scenario prediction operators and the sampled expected-cost matrix.

Under the feedback parametrization u = Kx + v the predicted state at step l
is affine in the initial state, the correction sequence and the disturbance
sequence:

    x_l = Phi0_l x + Phiv_l v + Phiw_l w,

with time-varying closed-loop products Phi0_l = Acl_{l-1} ... Acl_0 built
from a sampled parameter sequence. Stacking steps 0..T gives one tall
operator per scenario; embedding the sampled disturbance through a block
matrix that maps [x; v; 1] to [x; v; w] turns the averaged finite-horizon
cost into an exact quadratic form S in the 28-dimensional vector
[x; v; 1_{m_w}], evaluated offline once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import N_U, N_W, N_X


@dataclass
class PredictionOperators:
    """Per-scenario transfer matrices, one list entry per prediction step."""

    phi0: list  # l = 0..T, each (n, n)
    phiv: list  # l = 0..T, each (n, mT)
    phiw: list  # l = 0..T, each (n, m_w T)
    gamma: list  # l = 0..T-1, each (m, mT), selects v_l

    @property
    def horizon(self) -> int:
        return len(self.gamma)


@dataclass
class CostMatrix:
    S_tilde: np.ndarray  # (n + mT + m_w, n + mT + m_w)
    sample_count: int


def transfer_matrices(q_seq, K, T, model) -> PredictionOperators:
    """Reference construction of Phi0, Phiv, Phiw, Gamma for one scenario.

    q_seq supplies one parameter vector per step; the closed-loop matrix at
    step l is Ad(q_l) + Bd(q_l) K. Products are accumulated left to right.
    """
    q_seq = np.asarray(q_seq, dtype=float)
    if q_seq.shape[0] < T:
        raise ValueError("q_seq shorter than horizon")
    K = np.asarray(K, dtype=float)
    n, m, mw = N_X, N_U, N_W
    Ads, Bds = model.discretize_batch(q_seq[:T])
    phi0 = [np.eye(n)]
    phiv = [np.zeros((n, m * T))]
    phiw = [np.zeros((n, mw * T))]
    gamma = []
    for l in range(T):
        Acl = Ads[l] + Bds[l] @ K
        nxt_v = Acl @ phiv[l]
        nxt_v[:, m * l : m * (l + 1)] = Bds[l]
        nxt_w = Acl @ phiw[l]
        nxt_w[:, mw * l : mw * (l + 1)] = np.eye(n)  # B_w = I
        phi0.append(Acl @ phi0[l])
        phiv.append(nxt_v)
        phiw.append(nxt_w)
        g = np.zeros((m, m * T))
        g[:, m * l : m * (l + 1)] = np.eye(m)
        gamma.append(g)
    return PredictionOperators(phi0, phiv, phiw, gamma)


def transfer_blocks_iter(Acl, Bd):
    """Yield per-step row blocks X_l of the stacked scenario operator.

    Acl: (M, T, n, n) closed-loop matrices, Bd: (M, T, n, m). X_l is
    (M, n, n + mT + m_w T) with x_l = X_l @ [x; v; w] for every scenario.
    Memory stays at one block, which is what constraint assembly over large
    scenario batches needs.
    """
    M, T, n, _ = Acl.shape
    m = Bd.shape[3]
    mw = N_W
    width = n + m * T + mw * T
    X = np.zeros((M, n, width))
    X[:, :, :n] = np.eye(n)
    yield X
    for l in range(T):
        X = Acl[:, l] @ X
        X[:, :, n + m * l : n + m * (l + 1)] += Bd[:, l]
        iw = n + m * T + mw * l
        X[:, :, iw : iw + mw] += np.eye(mw)
        yield X


def cost_matrix(K, T, weights, model, M=5000, rng=None, constant_q=False) -> CostMatrix:
    """Sample-average expected-cost matrix over joint (q, w) scenarios.

    weights is (Q, R, P). Each scenario stacks the transfer operator over
    steps 0..T, forms the state cost through blkdiag(Q,...,Q,P) and the
    input cost through the stacked feedback K and selector Gamma, and embeds
    the sampled disturbance with the block map M(w): [x; v; 1] -> [x; v; w].
    The average is symmetrized; the (x, v) principal block must come out
    positive semidefinite.
    """
    Q, R, P = (np.asarray(W, dtype=float) for W in weights)
    if M < 100:
        raise ValueError("sample count below 100")
    rng = np.random.default_rng(0) if rng is None else rng
    n, m, mw = N_X, N_U, N_W
    nv = m * T
    nz = n + nv + mw * T  # full [x; v; w] width
    nr = n + nv + mw  # reduced [x; v; 1] width

    if constant_q:
        qs = np.repeat(model.sample_q(rng, M)[:, None, :], T, axis=1)
    else:
        qs = model.sample_q(rng, M * T).reshape(M, T, 4)
    ws = model.sample_w(rng, (M, T))

    Ads, Bds = model.discretize_batch(qs.reshape(M * T, 4))
    Ads = Ads.reshape(M, T, n, n)
    Bds = Bds.reshape(M, T, n, m)
    Acl = Ads + Bds @ K

    # stacked operator G: rows l = 0..T of [Phi0_l | Phiv_l | Phiw_l]
    G = np.zeros((M, n * (T + 1), nz))
    for l, X in enumerate(transfer_blocks_iter(Acl, Bds)):
        G[:, n * l : n * (l + 1), :] = X

    QP = np.zeros((n * (T + 1), n * (T + 1)))
    for l in range(T):
        QP[n * l : n * (l + 1), n * l : n * (l + 1)] = Q
    QP[n * T :, n * T :] = P
    Rbar = np.kron(np.eye(T), R)

    Kbar = np.zeros((nv, n * (T + 1)))
    for l in range(T):
        Kbar[m * l : m * (l + 1), n * l : n * (l + 1)] = K
    Gamma = np.zeros((nv, nz))
    Gamma[:, n : n + nv] = np.eye(nv)

    # M(w): [x; v; 1_{m_w}] -> [x; v; w], disturbance samples stacked as
    # per-step diagonal blocks acting on the ones tail
    Mw = np.zeros((M, nz, nr))
    Mw[:, : n + nv, : n + nv] = np.eye(n + nv)
    rows = np.arange(mw * T)
    Mw[:, n + nv + rows, n + nv + rows % mw] = ws.reshape(M, mw * T)

    GM = G @ Mw
    UM = (Kbar @ G + Gamma[None]) @ Mw
    S = np.einsum("mri,rs,msj->ij", GM, QP, GM, optimize=True)
    S += np.einsum("mri,rs,msj->ij", UM, Rbar, UM, optimize=True)
    S /= M
    S = 0.5 * (S + S.T)

    xv = S[: n + nv, : n + nv]
    if np.linalg.eigvalsh(xv).min() < -1e-8:
        raise RuntimeError("cost estimation failed")
    return CostMatrix(S_tilde=S, sample_count=M)
