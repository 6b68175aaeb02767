"""Online receding-horizon step: one dense QP in the correction sequence.

Everything hard was done offline. The artifact carries the averaged cost
form S in [x; v; 1], the reduced sampled constraint set D over (x, v) and
the recursive-feasibility rows. At runtime, fixing the measured state x
turns the problem into

    min_v  v' S_vv v + 2 (S_vx x + S_v1 1)' v   s.t.   A_v v <= b - A_x x,

and the applied input is u = K x + v_0*. Warm starts shift the previous
optimizer by one block and append zeros, the candidate used in the
recursive-feasibility argument, and the previous active rows seed the
working-set solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .solvers import solve_working_set
from .synthesis import ControllerArtifact

logger = logging.getLogger(__name__)


@dataclass
class ControlDecision:
    u: np.ndarray
    v_star: np.ndarray
    objective: float
    qp_status: str
    solve_time: float
    warm_start_used: bool
    active_rows: np.ndarray = field(default=None, repr=False)


def _stacked_rows(artifact: ControllerArtifact):
    A = np.vstack([artifact.D.normals, artifact.first_step.normals])
    b = np.concatenate([artifact.D.offsets, artifact.first_step.offsets])
    return A, b


def shift_warm_start(v_prev, m):
    """Drop the applied block, append zeros for the new tail step."""
    v_prev = np.asarray(v_prev, dtype=float)
    return np.concatenate([v_prev[m:], np.zeros(m)])


def control_step(artifact: ControllerArtifact, x, warm=None,
                 seed_rows=None) -> ControlDecision:
    """Solve the precomputed QP at state x and return u = Kx + v_0*.

    warm is the previous optimal correction sequence; it is shifted by one
    block before use. An infeasible QP falls back to u = Kx and is logged
    as an error: the feasible set is robustly invariant, so this happening
    from a feasible start is a defect, not a normal code path.
    """
    x = np.asarray(x, dtype=float)
    n = artifact.dims["n"]
    m = artifact.dims["m"]
    m_w = artifact.dims["m_w"]
    nv = m * artifact.dims["T"]

    S = artifact.S_tilde
    S_vv = S[n:n + nv, n:n + nv]
    S_vx = S[n:n + nv, :n]
    S_v1 = S[n:n + nv, n + nv:]
    ones = np.ones(m_w)

    A, b = _stacked_rows(artifact)
    rhs = b - A[:, :n] @ x
    H = 2.0 * S_vv
    c = 2.0 * (S_vx @ x + S_v1 @ ones)

    x0 = None
    used_warm = False
    if warm is not None:
        x0 = shift_warm_start(warm, m)
        used_warm = True

    rep = solve_working_set(H, c, A[:, n:], rhs, x0=x0, seed_rows=seed_rows)

    if rep.status != "optimal" or rep.x is None:
        if rep.status == "infeasible":
            logger.error("online QP infeasible at x=%s; applying u = Kx", x)
        else:
            logger.error("online QP returned %s at x=%s; applying u = Kx",
                         rep.status, x)
        return ControlDecision(
            u=artifact.K @ x,
            v_star=np.zeros(nv),
            objective=float("nan"),
            qp_status=rep.status,
            solve_time=rep.solve_time,
            warm_start_used=used_warm,
        )

    v = rep.x
    zfull = np.concatenate([x, v, ones])
    objective = float(zfull @ S @ zfull)
    return ControlDecision(
        u=artifact.K @ x + v[:m],
        v_star=v,
        objective=objective,
        qp_status="optimal",
        solve_time=rep.solve_time,
        warm_start_used=used_warm,
        active_rows=rep.active_rows,
    )


class Controller:
    """Stateful wrapper owning the warm start between consecutive steps."""

    def __init__(self, artifact: ControllerArtifact):
        self.artifact = artifact
        self._warm = None
        self._seed_rows = None

    def step(self, x) -> ControlDecision:
        dec = control_step(self.artifact, x, warm=self._warm,
                           seed_rows=self._seed_rows)
        if dec.qp_status == "optimal":
            self._warm = dec.v_star
            self._seed_rows = dec.active_rows
        else:
            self._warm = None
            self._seed_rows = None
        return dec

    def reset(self):
        self._warm = None
        self._seed_rows = None
