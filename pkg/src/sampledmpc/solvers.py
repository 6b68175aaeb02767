"""Dense LP/QP solver: Mehrotra-style predictor-corrector interior point.

One solver family covers every linear and quadratic program in the package:

    minimize    0.5 x'Hx + c'x      (H = 0 for LPs)
    subject to  Ax <= b

All data is dense float64. Normal equations are formed explicitly
(H + A'WA, d x d) and factored with Cholesky, which is the right shape for
this package's problems: few variables (<= ~30), possibly many rows.

Infeasibility and unboundedness are classified by auxiliary LPs (an elastic
feasibility phase and a recession-direction check) rather than by heuristics
on iterate divergence, so the classification is itself certified by a solve.

`solve_working_set` wraps the interior point for problems with very many
rows: it solves on a small active subset, verifies the full constraint set,
and grows the subset with the worst violators until the verified optimum of
the relaxation is feasible, hence optimal, for the full problem.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

MAX_ITER = 100
GAP_TOL = 1e-8
FEAS_TOL = 1e-9


@dataclass
class SolveReport:
    status: str  # optimal | infeasible | unbounded | max_iter
    x: np.ndarray | None = None
    objective: float | None = None
    duals: np.ndarray | None = None
    iterations: int = 0
    solve_time: float = 0.0
    # indices of rows with dual weight above tolerance, for warm restarts
    active_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))


def _chol_solve(M, rhs_list, reg0):
    """Cholesky solve with escalating diagonal regularization."""
    d = M.shape[0]
    # regularization must be visible at the matrix's own scale or the
    # escalation loop burns its attempts below the rounding floor
    floor = max(reg0, 1e-14 * max(1.0, float(np.abs(np.diag(M)).max())))
    reg = 0.0
    for _ in range(12):
        try:
            L = np.linalg.cholesky(M + reg * np.eye(d))
            out = []
            for r in rhs_list:
                y = np.linalg.solve(L, r)
                out.append(np.linalg.solve(L.T, y))
            return out
        except np.linalg.LinAlgError:
            reg = floor if reg == 0.0 else reg * 100.0
    raise np.linalg.LinAlgError("normal equations not factorizable")


def _ipm(H, c, A, b, x0=None, max_iter=MAX_ITER, gap_tol=GAP_TOL, stall_exit=True):
    """Core predictor-corrector loop. Returns (status, x, z, iters).

    status is 'converged', 'stalled', 'stalled-early' or 'diverged';
    classification of infeasible/unbounded is done by the callers.
    'stalled-early' fires on a barrier plateau and is only worth keeping if
    the crossover polish verifies the iterate; callers retry with
    stall_exit=False otherwise.
    """
    r, d = A.shape
    if r == 0:
        # unconstrained: LPs are unbounded unless the objective is zero,
        # PD quadratics have the Newton point
        if H is None:
            if np.abs(c).max(initial=0.0) == 0.0:
                return "converged", np.zeros(d), np.zeros(0), 0
            return "diverged", np.zeros(d), np.zeros(0), 0
        x = np.linalg.lstsq(H, -c, rcond=None)[0]
        return "converged", x, np.zeros(0), 0
    # row normalization
    rownorm = np.linalg.norm(A, axis=1)
    rownorm[rownorm < 1e-300] = 1.0
    As = A / rownorm[:, None]
    bs = b / rownorm
    # objective normalization
    obj_scale = max(1.0, np.abs(H).max() if H is not None else 0.0, np.abs(c).max())
    Hs = H / obj_scale if H is not None else None
    cs = c / obj_scale

    x = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float).copy()
    s_raw = bs - As @ x
    if x0 is not None and np.min(s_raw) < -1e6:
        # warm point wildly infeasible, fall back to cold start
        x = np.zeros(d)
        s_raw = bs.copy()
    s = np.maximum(s_raw, 1.0)
    z = np.ones(r)

    btol = 1.0 + np.abs(bs)
    ctol = 1.0 + np.abs(cs).max()
    reg0 = 1e-12 * max(1.0, np.trace(Hs) / d if Hs is not None else 0.0)

    it = 0
    mu_hist = []
    for it in range(1, max_iter + 1):
        Hx = Hs @ x if Hs is not None else 0.0
        rd = (Hx + cs) + As.T @ z
        rp = As @ x + s - bs
        mu = s @ z / r
        obj_s = 0.5 * x @ Hx + cs @ x if Hs is not None else cs @ x

        viol = As @ x - bs
        obj_ref = max(1.0, abs(obj_s))
        gap_ok = s @ z <= gap_tol * obj_ref or mu <= 1e-13 * obj_ref
        if np.all(viol <= FEAS_TOL * btol) and np.abs(rd).max() <= 1e-8 * ctol and gap_ok:
            return "converged", x, z / rownorm * obj_scale, it

        if not np.isfinite(mu) or mu > 1e14 or np.abs(x).max() > 1e13:
            return "diverged", x, z / rownorm * obj_scale, it

        # Degenerate active sets stall the barrier into long crawls while the
        # iterate already carries the right basis; hand such points to the
        # crossover polish instead of burning the iteration budget.
        mu_hist.append(mu)
        if stall_exit and it > 24 and mu > 0.0 and mu_hist[-13] < 4.0 * mu:
            return "stalled-early", x, z / rownorm * obj_scale, it

        with np.errstate(over="ignore", invalid="ignore"):
            # capped so the normal matrix stays factorizable; saturation only
            # slows the tail, where the stall exit hands over to crossover
            W = np.clip(z / s, 1e-16, 1e16)
        M = As.T * W @ As
        if Hs is not None:
            M = M + Hs

        # predictor (affine scaling) direction
        rhs_aff = -rd - As.T @ (W * rp - z)
        try:
            (dx_aff,) = _chol_solve(M, [rhs_aff], reg0)
        except np.linalg.LinAlgError:
            return "stalled", x, z / rownorm * obj_scale, it
        ds_aff = -rp - As @ dx_aff
        dz_aff = -z + W * (-ds_aff)

        def _max_step(v, dv):
            neg = dv < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, np.min(-v[neg] / dv[neg]))

        a_p = _max_step(s, ds_aff)
        a_d = _max_step(z, dz_aff)
        mu_aff = (s + a_p * ds_aff) @ (z + a_d * dz_aff) / r
        sigma = min(1.0, max(1e-10, (mu_aff / mu) ** 3)) if mu > 0 else 0.1

        # corrector with centering
        with np.errstate(over="ignore", invalid="ignore"):
            t = sigma * mu - ds_aff * dz_aff
            rhs = -rd - As.T @ (W * rp - z + t / s)
            if not np.all(np.isfinite(rhs)):
                return "stalled", x, z / rownorm * obj_scale, it
            (dx,) = _chol_solve(M, [rhs], reg0)
            ds = -rp - As @ dx
            dz = -z + W * (-ds) + t / s
            if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dz))):
                return "stalled", x, z / rownorm * obj_scale, it

        eta = 1.0 - min(0.05, 10.0 * mu)
        a_p = min(1.0, eta * _max_step(s, ds))
        a_d = min(1.0, eta * _max_step(z, dz))
        x += a_p * dx
        s += a_p * ds
        z += a_d * dz
        s = np.maximum(s, 1e-300)
        z = np.maximum(z, 1e-300)

    return "stalled", x, z / rownorm * obj_scale, it


def _feasibility_phase(A, b):
    """Elastic phase: min t  s.t.  Ax - t <= b, -t <= 1.

    Strictly feasible by construction. Returns (t_star, x_part, ok).
    """
    r, d = A.shape
    A1 = np.hstack([A, -np.ones((r, 1))])
    A1 = np.vstack([A1, np.concatenate([np.zeros(d), [-1.0]])])
    b1 = np.concatenate([b, [1.0]])
    c1 = np.concatenate([np.zeros(d), [1.0]])
    x0 = np.concatenate([np.zeros(d), [max(0.0, float(-b.min())) + 1.0 if r else 1.0]])
    status, xt, _, _ = _ipm(None, c1, A1, b1, x0=x0, max_iter=MAX_ITER, stall_exit=False)
    return xt[-1], xt[:d], status == "converged"


def _recession_unbounded(c, A):
    """True when a feasible ray with negative objective slope exists."""
    r, d = A.shape
    A2 = np.vstack([A, np.eye(d), -np.eye(d)])
    b2 = np.concatenate([np.zeros(r), np.ones(2 * d)])
    status, dvec, _, _ = _ipm(None, c, A2, b2, stall_exit=False)
    if status != "converged":
        return False
    return c @ dvec < -1e-8 * max(1.0, np.abs(c).max())


def _dual_polish(G, rhs):
    """Backward-deletion least squares for G' z = rhs with z >= 0.

    G holds candidate active rows (k, d). Deleting the most negative
    multiplier and re-solving terminates because the set only shrinks.
    """
    idx = list(range(G.shape[0]))
    while idx:
        z_sub, *_ = np.linalg.lstsq(G[idx].T, rhs, rcond=None)
        if np.all(z_sub >= -1e-9 * max(1.0, np.abs(z_sub).max(initial=0.0))):
            z = np.zeros(G.shape[0])
            z[idx] = np.maximum(z_sub, 0.0)
            return z
        del idx[int(np.argmin(z_sub))]
    return np.zeros(G.shape[0])


def _crossover(H, c, A, b, x):
    """Polish a stalled iterate into a verified KKT point, or return None.

    Interior-point iterates on degenerate problems (near-parallel active
    rows) often carry the right active set while the barrier stalls; solving
    the active-set KKT system exactly and verifying every condition turns
    such an iterate into a certified optimum.
    """
    if x is None or not np.all(np.isfinite(x)):
        return None
    r, d = A.shape
    rownorm = np.linalg.norm(A, axis=1)
    rownorm[rownorm == 0.0] = 1.0
    slack = (b - A @ x) / rownorm
    scale = 1.0 + np.abs(b) / rownorm
    cand = np.flatnonzero(slack <= 1e-5 * scale)
    if cand.size > 3 * d + 16:
        cand = cand[np.argsort(slack[cand] / scale[cand])[: 3 * d + 16]]

    grad = (H @ x if H is not None else 0.0) + c
    z_cand = _dual_polish(A[cand], -grad) if cand.size else np.empty(0)
    basis = cand[z_cand > 1e-12] if cand.size else cand
    xn = x
    if basis.size:
        # re-anchor the primal on the basis equalities (min-norm shift); the
        # shift can push near-active rows outside the basis slightly
        # infeasible, so fold any such row into the anchor and repeat
        anchor = basis
        for _ in range(4):
            shift, *_ = np.linalg.lstsq(A[anchor], b[anchor] - A[anchor] @ x, rcond=None)
            xn = x + shift
            resid = (A @ xn - b) / rownorm
            worst = np.argmax(resid / scale)
            if resid[worst] <= FEAS_TOL * scale[worst] or worst in anchor:
                break
            anchor = np.append(anchor, worst)
        if H is not None:
            # stationarity moves with x for QPs; re-polish on the new point
            z_cand = _dual_polish(A[cand], -((H @ xn) + c))
    z = np.zeros(r)
    if cand.size:
        z[cand] = z_cand

    ctol = 1.0 + np.abs(c).max(initial=0.0)
    station = (H @ xn if H is not None else 0.0) + c + A.T @ z
    if np.abs(station).max(initial=0.0) > 1e-7 * ctol:
        return None
    viol = (A @ xn - b) / rownorm
    if viol.max(initial=0.0) > 1e2 * FEAS_TOL * (1.0 + np.abs(b).max(initial=0.0)):
        return None
    obj = float(0.5 * xn @ (H @ xn) + c @ xn) if H is not None else float(c @ xn)
    dual_obj = -float(b @ z) - (0.5 * float(xn @ (H @ xn)) if H is not None else 0.0)
    if abs(obj - dual_obj) > 1e-6 * max(1.0, abs(obj)):
        return None
    return xn, z, obj


def _finish(status, x, z, iters, H, c, A, b, t0):
    if status != "converged":
        polished = _crossover(H, c, A, b, x)
        if polished is not None:
            x, z, _ = polished
            status = "converged"
    if status == "converged":
        obj = float(0.5 * x @ (H @ x) + c @ x) if H is not None else float(c @ x)
        act = np.flatnonzero(z > 1e-6 * max(1.0, z.max() if len(z) else 1.0))
        return SolveReport(
            "optimal", x=x, objective=obj, duals=z, iterations=iters,
            solve_time=time.perf_counter() - t0, active_rows=act,
        )
    # classify by auxiliary solves
    t_star, _, ok = _feasibility_phase(A, b)
    if ok and t_star > 1e-7:
        return SolveReport("infeasible", iterations=iters, solve_time=time.perf_counter() - t0)
    if H is None and _recession_unbounded(c, A):
        return SolveReport("unbounded", iterations=iters, solve_time=time.perf_counter() - t0)
    return SolveReport("max_iter", x=x, iterations=iters, solve_time=time.perf_counter() - t0)


def solve_lp(c, A, b, x0=None, max_iter=MAX_ITER, gap_tol=GAP_TOL):
    """Minimize c'x subject to Ax <= b."""
    t0 = time.perf_counter()
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, c.size)
    b = np.asarray(b, dtype=float)
    keep, bad = _drop_null_rows(A, b)
    if bad:
        return SolveReport("infeasible", solve_time=time.perf_counter() - t0)
    status, x, z, iters = _ipm(None, c, A[keep], b[keep], x0=x0, max_iter=max_iter, gap_tol=gap_tol)
    if status == "stalled-early":
        polished = _crossover(None, c, A[keep], b[keep], x)
        if polished is not None:
            x, z, _ = polished
            status = "converged"
        else:
            status, x, z, iters = _ipm(None, c, A[keep], b[keep], x0=x0,
                                       max_iter=max_iter, gap_tol=gap_tol, stall_exit=False)
    rep = _finish(status, x, z, iters, None, c, A[keep], b[keep], t0)
    return _scatter_duals(rep, keep, len(b))


def solve_qp(H, c, A, b, x0=None, max_iter=MAX_ITER, gap_tol=GAP_TOL):
    """Minimize 0.5 x'Hx + c'x subject to Ax <= b. H must be symmetric PSD."""
    t0 = time.perf_counter()
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, c.size)
    b = np.asarray(b, dtype=float)
    keep, bad = _drop_null_rows(A, b)
    if bad:
        return SolveReport("infeasible", solve_time=time.perf_counter() - t0)
    status, x, z, iters = _ipm(H, c, A[keep], b[keep], x0=x0, max_iter=max_iter, gap_tol=gap_tol)
    if status == "stalled-early":
        polished = _crossover(H, c, A[keep], b[keep], x)
        if polished is not None:
            x, z, _ = polished
            status = "converged"
        else:
            status, x, z, iters = _ipm(H, c, A[keep], b[keep], x0=x0,
                                       max_iter=max_iter, gap_tol=gap_tol, stall_exit=False)
    rep = _finish(status, x, z, iters, H, c, A[keep], b[keep], t0)
    return _scatter_duals(rep, keep, len(b))


def _drop_null_rows(A, b):
    """Rows with a zero normal: vacuous if b >= 0, certificate of emptiness if b < 0."""
    null = np.abs(A).max(axis=1) < 1e-300 if A.size else np.zeros(len(b), dtype=bool)
    if np.any(null & (b < -1e-12)):
        return None, True
    return np.flatnonzero(~null), False


def _scatter_duals(rep, keep, r_full):
    if rep.duals is not None and len(rep.duals) != r_full:
        full = np.zeros(r_full)
        full[keep] = rep.duals
        rep.duals = full
        rep.active_rows = keep[rep.active_rows] if len(rep.active_rows) else rep.active_rows
    return rep


def solve_working_set(H, c, A, b, x0=None, seed_rows=None, grow=64, max_rounds=60):
    """Solve with many rows by expanding a working subset until verified.

    The subproblem is a relaxation, so a subproblem optimum that satisfies all
    rows is the optimum of the full problem, and a subproblem that is
    infeasible certifies the full problem infeasible.
    """
    t0 = time.perf_counter()
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, c.size)
    b = np.asarray(b, dtype=float)
    r, d = A.shape
    if r <= max(4 * d + 32, grow):
        rep = solve_qp(H, c, A, b, x0=x0) if H is not None else solve_lp(c, A, b, x0=x0)
        rep.solve_time = time.perf_counter() - t0
        return rep

    def _dense():
        rep = solve_qp(H, c, A, b, x0=x0) if H is not None else solve_lp(c, A, b, x0=x0)
        rep.solve_time = time.perf_counter() - t0
        return rep

    ref = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    slack = b - A @ ref
    k0 = max(2 * d + 16, grow)
    work = set(np.argpartition(slack, k0)[:k0].tolist())
    if seed_rows is not None:
        work.update(int(i) for i in np.asarray(seed_rows, dtype=int))
    if H is None:
        # rows facing the objective direction bound the LP early
        align = A @ (-c)
        work.update(np.argpartition(-align, k0)[:k0].tolist())

    last = None
    cap = grow
    for _ in range(max_rounds):
        idx = np.fromiter(sorted(work), dtype=int)
        sub = (
            solve_qp(H, c, A[idx], b[idx], x0=x0)
            if H is not None
            else solve_lp(c, A[idx], b[idx], x0=x0)
        )
        if sub.status == "infeasible":
            sub.solve_time = time.perf_counter() - t0
            return sub
        if sub.status in ("max_iter", "unbounded") or sub.x is None:
            if len(idx) == r:
                sub.solve_time = time.perf_counter() - t0
                return sub
            # not enough structure in the subset yet: grow along the objective
            grad = c if H is None else H @ (last if last is not None else ref) + c
            align = A @ (-grad)
            order = np.argsort(-align)
            added = 0
            for i in order:
                if int(i) not in work:
                    work.add(int(i))
                    added += 1
                    if added >= cap:
                        break
            if added == 0:
                sub.solve_time = time.perf_counter() - t0
                return sub
            cap = min(2 * cap, 2048)
            continue
        last = sub.x
        viol = A @ sub.x - b
        worst = np.argpartition(-viol, min(cap, r - 1))[:cap]
        bad = worst[viol[worst] > FEAS_TOL * (1.0 + np.abs(b[worst]))]
        if len(bad):
            before = len(work)
            work.update(int(i) for i in bad)
            if len(work) > before:
                cap = min(2 * cap, 2048)
                continue
            # every violator is already in the subset, so regrowing cannot
            # help: the point is as feasible as the inner solver certifies.
            # Accept it within the crossover tolerance, else go dense while
            # that is affordable; degenerate subsets can defeat the working
            # set on problems the full solve handles without trouble.
            vmax = float(np.max(viol[bad] / (1.0 + np.abs(b[bad]))))
            if vmax > 1e2 * FEAS_TOL:
                if r <= 4096:
                    return _dense()
                sub.solve_time = time.perf_counter() - t0
                sub.status = "max_iter"
                return sub
        duals = np.zeros(r)
        if sub.duals is not None:
            duals[idx] = sub.duals
        act = idx[sub.active_rows] if len(sub.active_rows) else np.empty(0, dtype=int)
        rep = SolveReport(
            sub.status, x=sub.x, objective=sub.objective, duals=duals,
            iterations=sub.iterations, solve_time=time.perf_counter() - t0,
            active_rows=act,
        )
        return rep

    if r <= 4096:
        return _dense()
    sub.solve_time = time.perf_counter() - t0
    sub.status = "max_iter"
    return sub
