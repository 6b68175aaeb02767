"""Uncertain planar proximity-operations plant.

State x = (p1, p2, v1, v2) relative to the docking point, input u = thrust [N].
The continuous dynamics carry four uncertain parameters: q1 scales a position
drift, q2 and q3 couple the second position coordinate into the velocity
rates, and q4 perturbs the inverse mass. The disturbance enters the discrete
update additively on the state with an infinity-norm bound, each component an
independent standard normal truncated to that bound.

Discretization is exact zero-order hold: the matrix exponential of the
augmented (A, B) block matrix, via scipy's Pade scaling-and-squaring for
single queries and a batched Pade-13 implementation for scenario throughput.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.special import ndtr, ndtri

N_X = 4
N_U = 2
N_W = 4

_Q_RANGES = np.array(
    [[5e-5, 5e-4], [1e-3, 1.4e-3], [1e-6, 1.44e-6], [-9.1e-3, 1e-4]]
)


@dataclass
class UncertainModel:
    mass: float = 9.882
    dt: float = 5.0
    q_ranges: np.ndarray = field(default_factory=lambda: _Q_RANGES.copy())
    w_bound: float = 5e-3
    omega: float = 1.2e-3

    def __post_init__(self):
        self.q_ranges = np.asarray(self.q_ranges, dtype=float).reshape(4, 2)
        if np.any(self.q_ranges[:, 0] > self.q_ranges[:, 1]):
            raise ValueError("empty parameter range")
        if self.mass <= 0 or self.dt <= 0 or self.w_bound < 0:
            raise ValueError("mass, dt positive and w_bound nonnegative required")

    # ---- continuous and discrete dynamics ---------------------------------

    @property
    def nominal_q(self) -> np.ndarray:
        return self.q_ranges.mean(axis=1)

    def continuous_matrices(self, q):
        q1, q2, q3, q4 = np.asarray(q, dtype=float).ravel()
        A = np.array(
            [
                [q1, 0.0, 1.0, 0.0],
                [0.0, q1, 0.0, 1.0],
                [0.0, 2.0 * q2, 0.0, 0.0],
                [0.0, 3.0 * q3, -2.0 * q2, 0.0],
            ]
        )
        g = 1.0 / self.mass + q4
        B = np.array([[0.0, 0.0], [0.0, 0.0], [g, 0.0], [0.0, g]])
        return A, B

    def discretize(self, q):
        """Exact zero-order-hold (Ad, Bd) for one parameter vector."""
        A, B = self.continuous_matrices(q)
        M = np.zeros((N_X + N_U, N_X + N_U))
        M[:N_X, :N_X] = A
        M[:N_X, N_X:] = B
        E = expm(M * self.dt)
        return E[:N_X, :N_X], E[:N_X, N_X:]

    def discretize_batch(self, Q):
        """Vectorized ZOH for a (N, 4) batch of parameter vectors."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n = Q.shape[0]
        M = np.zeros((n, N_X + N_U, N_X + N_U))
        M[:, 0, 0] = Q[:, 0]
        M[:, 1, 1] = Q[:, 0]
        M[:, 0, 2] = 1.0
        M[:, 1, 3] = 1.0
        M[:, 2, 1] = 2.0 * Q[:, 1]
        M[:, 3, 1] = 3.0 * Q[:, 2]
        M[:, 3, 2] = -2.0 * Q[:, 1]
        g = 1.0 / self.mass + Q[:, 3]
        M[:, 2, 4] = g
        M[:, 3, 5] = g
        E = _expm_batch(M * self.dt)
        return E[:, :N_X, :N_X], E[:, :N_X, N_X:]

    # ---- sampling ----------------------------------------------------------

    def sample_q(self, rng, n=None):
        lo, hi = self.q_ranges[:, 0], self.q_ranges[:, 1]
        if n is None:
            return rng.uniform(lo, hi)
        return rng.uniform(lo, hi, size=(n, 4))

    def sample_w(self, rng, shape=None):
        """Truncated standard normal on [-w_bound, w_bound], per component.

        Inverse-CDF transform of uniforms, so the draw count per component is
        deterministic for a given rng stream.
        """
        size = (N_W,) if shape is None else tuple(np.atleast_1d(shape)) + (N_W,)
        u = rng.uniform(size=size)
        a = self.w_bound
        if a == 0.0:
            return np.zeros(size)
        lo = ndtr(-a)
        return ndtri(lo + u * (ndtr(a) - lo))

    def w_variance(self) -> float:
        """Exact per-component variance of the truncated disturbance."""
        a = self.w_bound
        if a == 0.0:
            return 0.0
        phi = np.exp(-0.5 * a * a) / np.sqrt(2 * np.pi)
        Z = ndtr(a) - ndtr(-a)
        return 1.0 - 2.0 * a * phi / Z

    def vertex_q(self) -> np.ndarray:
        """All 16 corners of the parameter box."""
        from .geometry import box_corners

        center = self.q_ranges.mean(axis=1)
        radii = 0.5 * (self.q_ranges[:, 1] - self.q_ranges[:, 0])
        return box_corners(radii, center)

    def vertex_outer_approx(self, rng=None, n_check=100, tol=5e-6, max_margin=0.7):
        """Discretized corner matrices inflated until they convexly cover samples.

        The map q -> (Ad, Bd) is only multilinear to first order; its quadratic
        curvature leaves interior samples up to ~3.3e-6 (entrywise) outside the
        affine span of the 16 corner images, a gap no corner inflation can
        close, so the default tolerance sits above it. The hull is still
        inflated about its mean until a sampled membership check passes, and
        the check failing at max_margin is an error.
        Returns (Ad_stack (16,4,4), Bd_stack (16,4,2), margin).
        """
        rng = np.random.default_rng(0) if rng is None else rng
        Ads, Bds = self.discretize_batch(self.vertex_q())
        V = np.concatenate([Ads.reshape(16, -1), Bds.reshape(16, -1)], axis=1)
        qs = self.sample_q(rng, n_check)
        As, Bs = self.discretize_batch(qs)
        pts = np.concatenate([As.reshape(n_check, -1), Bs.reshape(n_check, -1)], axis=1)
        margin = 0.0
        while True:
            W = V.mean(axis=0) + (1.0 + margin) * (V - V.mean(axis=0))
            if _hull_contains(W, pts, tol):
                Ad_out = W[:, : N_X * N_X].reshape(16, N_X, N_X)
                Bd_out = W[:, N_X * N_X :].reshape(16, N_X, N_U)
                return Ad_out, Bd_out, margin
            margin = 0.01 if margin == 0.0 else margin * 2.0
            if margin > max_margin:
                raise RuntimeError("outer approximation invalid")

    # ---- truth plants ------------------------------------------------------

    def cw_matrices(self):
        w = self.omega
        A = np.array(
            [
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
                [0.0, 0.0, 0.0, 2.0 * w],
                [0.0, 3.0 * w * w, -2.0 * w, 0.0],
            ]
        )
        B = np.array([[0.0, 0.0], [0.0, 0.0], [1.0 / self.mass, 0.0], [0.0, 1.0 / self.mass]])
        return A, B

    def cw_truth_step(self, x, u, w=None):
        """One RK4 step of the orbital relative-motion plant, then additive noise."""
        A, B = self.cw_matrices()
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)

        def f(s):
            return A @ s + B @ u

        h = self.dt
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        out = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if w is not None:
            out = out + np.asarray(w, dtype=float)
        return out

    def uncertain_truth_step(self, x, u, q, w=None):
        Ad, Bd = self.discretize(q)
        out = Ad @ np.asarray(x, dtype=float) + Bd @ np.asarray(u, dtype=float)
        if w is not None:
            out = out + np.asarray(w, dtype=float)
        return out


def _hull_contains(V, pts, tol):
    """True when every point is within tol (inf-norm) of conv(V rows).

    Convex weights are parameterized over the simplex with the last vertex
    eliminated (lambda_k = 1 - sum of the rest), which keeps the feasible
    set's interior nonempty for the LP solver.
    """
    from .solvers import solve_lp

    k, dim = V.shape
    D = (V[:-1] - V[-1]).T  # dim x (k-1)
    nvar = k  # (lambda_1..k-1, t); minimize t
    c = np.zeros(nvar)
    c[-1] = 1.0
    lam_block = np.zeros((k - 1, nvar))
    lam_block[:, : k - 1] = -np.eye(k - 1)
    sum_row = np.zeros((1, nvar))
    sum_row[0, : k - 1] = 1.0
    up = np.zeros((dim, nvar))
    up[:, : k - 1] = D
    up[:, -1] = -1.0
    dn = -up
    dn[:, -1] = -1.0
    A = np.vstack([lam_block, sum_row, up, dn])
    for p in pts:
        r = p - V[-1]
        b = np.concatenate([np.zeros(k - 1), [1.0], r, -r])
        rep = solve_lp(c, A, b)
        if rep.status != "optimal" or rep.x[-1] > tol:
            return False
    return True


def _expm_batch(M):
    """Pade-13 scaling-and-squaring matrix exponential over a (N, d, d) batch."""
    b = np.array(
        [
            64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
            1187353796428800.0, 129060195264000.0, 10559470521600.0,
            670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
            960960.0, 16380.0, 182.0, 1.0,
        ]
    )
    theta13 = 5.371920351148152
    M = np.asarray(M, dtype=float)
    n, d, _ = M.shape
    norm1 = np.abs(M).sum(axis=1).max(axis=1)  # 1-norm per matrix
    smax = float(np.max(norm1, initial=0.0))
    s = max(0, int(np.ceil(np.log2(smax / theta13))) if smax > theta13 else 0)
    A = M / (2.0**s)
    I = np.broadcast_to(np.eye(d), (n, d, d))
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (
        A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
        + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * I
    )
    V = (
        A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
        + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * I
    )
    E = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        E = E @ E
    return E
