"""Offline synthesis: gain, terminal ingredients, sampled constraints, sets.

Everything expensive happens here, once, so the online controller only has to
solve one dense QP per step. The stages, in order:

  1. design_gain          prestabilizing K from a nominal Riccati fixed point,
                          spectral-radius checked over the vertex set and a
                          random parameter sweep
  2. terminal_cost        stochastic Lyapunov matrix P from a sample-average
                          fixed point, inflated and recertified on fresh draws
  3. terminal_set         robust positively invariant X_T under u = Kx
  4. assemble_constraints sampled probabilistic constraint rows over (x, v),
                          streamed per family and cut down by sound filters
                          before one exact redundancy elimination
  5. robust_control_invariant   region Omega where the sampled problem stays
                          feasible one step ahead for every vertex dynamic
  6. first_step_rows      rows forcing the applied input to keep the true
                          successor inside Omega for every vertex dynamic
  7. cost_matrix          expected-cost quadratic form (prediction module)

The sampled families are the heart of the scheme: each (family, step) pair
draws its own parameter and disturbance scenarios with a seed derived from
(master seed, family index), so any family can be regenerated bit-for-bit for
audit without touching the others.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import geometry
from .geometry import (HPolytope, box_max, coordinate_box, dual_sweep,
                       essential_filter, _pca_order)
from .model import N_U, N_W, N_X, UncertainModel
from .prediction import cost_matrix, transfer_blocks_iter
from .serialize import dumps, fingerprint
from .solvers import solve_working_set

# Derived-stream purposes under the master seed. Family streams start at
# _STREAM_FAMILY_BASE + family index in plan order.
_STREAM_GAIN = 0
_STREAM_TERMINAL_COST = 1
_STREAM_HULL_CHECK = 2
_STREAM_COST_MATRIX = 3
_STREAM_FAMILY_BASE = 100

# The published campaign sized one pooled scenario batch like a
# 10-dimensional decision problem; the paper_total preset reproduces that
# total and splits it across families proportionally.
_POOLED_DIM = 10

ARTIFACT_VERSION = "1"


def _rng(master_seed, purpose):
    return np.random.default_rng(np.random.SeedSequence((int(master_seed), int(purpose))))


def sample_bound(d, eps, delta) -> int:
    """Scenario count sufficient for an eps-cover at confidence 1 - delta.

    Valid for eps in (0, 0.14); the leading constants absorb the union bound
    over the exponential cover, so the expression is explicit rather than
    implicit in N.
    """
    d = int(d)
    if d < 1:
        raise ValueError("dimension must be a positive integer")
    eps = float(eps)
    delta = float(delta)
    if not 0.0 < eps < 0.14:
        raise ValueError("eps must lie in (0, 0.14)")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    value = (4.1 / eps) * (math.log(21.64 / delta) + 4.39 * d * math.log2(8.0 * math.e / eps))
    return int(math.ceil(value))


def riccati_fixed_point(A, B, Q, R, tol=1e-10, max_iter=200_000):
    """Discrete Riccati solution: value iteration start, Newton finish.

    Value iteration from P = Q contracts at the squared closed-loop spectral
    radius, which is slow under heavy input weights and leaves a tail error
    far above its successive-difference test, so it only runs until the gain
    stabilizes; Hewer's recursion then solves the closed-loop Stein equation
    exactly per step and converges quadratically to machine precision. tol
    keeps its meaning for the pure value iteration fallback.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)

    def _value_iter(P, stop):
        for _ in range(max_iter):
            BtP = B.T @ P
            G = np.linalg.solve(R + BtP @ B, BtP @ A)
            Pn = Q + A.T @ P @ (A - B @ G)
            Pn = 0.5 * (Pn + Pn.T)
            err = np.abs(Pn - P).max()
            P = Pn
            if not np.isfinite(err):
                raise RuntimeError("riccati iteration diverged")
            if err <= stop * max(1.0, np.abs(P).max()):
                return P
        raise RuntimeError("riccati iteration did not converge")

    P = _value_iter(Q.copy(), max(tol, 1e-6))
    n = A.shape[0]
    eye = np.eye(n * n)
    for _ in range(50):
        G = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        Acl = A - B @ G
        C = Q + G.T @ R @ G
        try:
            p = np.linalg.solve(eye - np.kron(Acl.T, Acl.T), C.flatten(order="F"))
        except np.linalg.LinAlgError:
            break
        Pn = 0.5 * (p.reshape(n, n, order="F") + p.reshape(n, n, order="F").T)
        if not np.all(np.isfinite(Pn)):
            break
        step = np.abs(Pn - P).max()
        P = Pn
        if step <= 1e-13 * max(1.0, np.abs(P).max()):
            return P
    # Newton did not certify; finish with the plain contraction at tol
    return _value_iter(P, tol)


@dataclass
class GainDesign:
    K: np.ndarray
    P_nominal: np.ndarray
    R_used: np.ndarray
    spectral_margin: float
    retries: int


def design_gain(model: UncertainModel, Q, R, rng=None, vertex_matrices=None,
                n_random=1000, max_retries=4) -> GainDesign:
    """Nominal LQR gain, robustified by retrying with a lighter input weight.

    The gain must contract every vertex dynamic and a random parameter sweep;
    if it does not, R is divided by 10 and the Riccati solve repeats. The
    returned P_nominal is the value matrix of the final accepted design.
    """
    rng = _rng(0, _STREAM_GAIN) if rng is None else rng
    Q = np.asarray(Q, dtype=float)
    R0 = np.asarray(R, dtype=float)
    Ad0, Bd0 = model.discretize(model.nominal_q)
    if vertex_matrices is None:
        Av, Bv = model.discretize_batch(model.vertex_q())
    else:
        Av, Bv = vertex_matrices
    qs = model.sample_q(rng, n_random)
    Ar, Br = model.discretize_batch(qs)
    A_all = np.concatenate([Av, Ar])
    B_all = np.concatenate([Bv, Br])

    R_used = R0.copy()
    for attempt in range(max_retries + 1):
        P = riccati_fixed_point(Ad0, Bd0, Q, R_used)
        BtP = Bd0.T @ P
        K = -np.linalg.solve(R_used + BtP @ Bd0, BtP @ Ad0)
        Acl = A_all + B_all @ K
        rho = np.abs(np.linalg.eigvals(Acl)).max()
        if rho < 1.0:
            return GainDesign(K=K, P_nominal=P, R_used=R_used,
                              spectral_margin=float(1.0 - rho), retries=attempt)
        R_used = R_used / 10.0
    raise RuntimeError("no robustly stabilizing gain found")


@dataclass
class TerminalCost:
    P: np.ndarray
    iterations: int
    inflation: float
    certificate: float  # lambda_max of the fresh-sample residual (<= 0 is ideal)


def terminal_cost(model: UncertainModel, K, Q, R, rng=None, n_samples=2000,
                  tol=1e-9, inflation=1e-4, cert_tol=1e-6, max_inflation=0.2,
                  max_iter=100_000) -> TerminalCost:
    """Stochastic Lyapunov matrix: P = Q + K'RK + E[Acl' P Acl] over q draws.

    The expectation is frozen on one fixed batch and the equation, linear in
    P, is solved exactly in vectorized form (the batch mean of the closed
    loops' Kronecker squares is a dense n^2 x n^2 matrix); plain fixed-point
    iteration stands in if that solve fails its residual check. The result
    is then inflated and certified against an independent batch. Inflating
    by (1 + g) always preserves the inequality exactly (the slack it buys is
    g times the stage cost), so if sampling noise defeats the first
    certificate the inflation doubles until the certificate clears or the cap
    is hit.
    """
    rng = _rng(0, _STREAM_TERMINAL_COST) if rng is None else rng
    K = np.asarray(K, dtype=float)
    Qc = np.asarray(Q, dtype=float) + K.T @ np.asarray(R, dtype=float) @ K
    Qc = 0.5 * (Qc + Qc.T)

    def closed_loop_batch(n):
        qs = model.sample_q(rng, n)
        Ad, Bd = model.discretize_batch(qs)
        return Ad + Bd @ K

    G = closed_loop_batch(n_samples)
    n = Qc.shape[0]
    Gt = G.transpose(0, 2, 1)
    M = np.einsum("nij,nkl->ikjl", Gt, Gt).reshape(n * n, n * n) / n_samples
    P = None
    iterations = 0
    try:
        v = np.linalg.solve(np.eye(n * n) - M, Qc.flatten(order="F"))
        cand = v.reshape(n, n, order="F")
        cand = 0.5 * (cand + cand.T)
        LP = np.einsum("nji,jk,nkl->il", G, cand, G) / n_samples
        resid = np.abs(Qc + 0.5 * (LP + LP.T) - cand).max()
        if np.all(np.isfinite(cand)) and resid <= tol * max(1.0, np.abs(cand).max()):
            P = cand
            iterations = 1
    except np.linalg.LinAlgError:
        pass
    if P is None:
        P = Qc.copy()
        for iterations in range(1, max_iter + 1):
            LP = np.einsum("nji,jk,nkl->il", G, P, G) / n_samples
            Pn = Qc + 0.5 * (LP + LP.T)
            err = np.abs(Pn - P).max()
            P = Pn
            if not np.isfinite(err):
                raise RuntimeError("mean-square unstable closed loop")
            if err <= tol * max(1.0, np.abs(P).max()):
                break
        else:
            raise RuntimeError("terminal cost iteration did not converge")

    gamma = inflation
    while True:
        Pc = (1.0 + gamma) * P
        Gf = closed_loop_batch(n_samples)
        resid = Qc + np.einsum("nji,jk,nkl->il", Gf, Pc, Gf) / n_samples - Pc
        lam = float(np.linalg.eigvalsh(0.5 * (resid + resid.T)).max())
        if lam <= cert_tol:
            return TerminalCost(P=Pc, iterations=iterations, inflation=gamma, certificate=lam)
        if gamma >= max_inflation:
            raise RuntimeError("terminal cost certificate failed")
        gamma = min(2.0 * gamma, max_inflation)


def _covers(normals, offsets, rows_N, rows_b, tol=1e-7):
    """True when {normals x <= offsets} is contained in {rows_N x <= rows_b}."""
    for g, h in zip(rows_N, rows_b):
        s = _support_value(normals, offsets, g)
        if s > h + tol * (1.0 + abs(h)):
            return False
    return True


def _normalized_rows(normals, offsets):
    """Row-rescaled copy (unit 2-norm); same feasible set, better LP scaling."""
    scale = np.linalg.norm(normals, axis=1)
    scale[scale == 0.0] = 1.0
    return normals / scale[:, None], offsets / scale


def _support_value(normals, offsets, direction, default=np.inf):
    g = np.asarray(direction, dtype=float).ravel()
    gn = np.linalg.norm(g)
    if gn == 0.0:
        return 0.0
    A, b = _normalized_rows(normals, offsets)
    rep = solve_working_set(None, -(g / gn), A, b)
    if rep.status == "unbounded":
        return default
    if rep.status != "optimal" or rep.x is None:
        raise RuntimeError(f"support LP failed: {rep.status}")
    return float(g @ rep.x)


def terminal_set(model: UncertainModel, K, Hx, hx, Hu, hu, vertex_matrices=None,
                 max_iter=50, min_ball=1e-3) -> HPolytope:
    """Robust positively invariant polytope for x+ = (Ad + Bd K) x + w.

    Backward recursion from the state and input-under-K rows: each iteration
    intersects with the preimage of the current set under every vertex
    dynamic, with offsets tightened by the worst-case disturbance in the row
    normal. Stops at set equality. The result must contain a ball around the
    setpoint, otherwise the terminal ingredient is useless in practice.
    """
    K = np.asarray(K, dtype=float)
    if vertex_matrices is None:
        Av, Bv = model.discretize_batch(model.vertex_q())
    else:
        Av, Bv = vertex_matrices
    Acl = Av + Bv @ K

    base_N = np.vstack([Hx, Hu @ K])
    base_b = np.concatenate([hx, hu])
    omega = geometry.reduce(HPolytope(base_N, base_b))

    for _ in range(max_iter):
        g = omega.normals
        tighten = model.w_bound * np.abs(g).sum(axis=1)
        pre_N = np.einsum("pr,jrk->jpk", g, Acl).reshape(-1, N_X)
        pre_b = np.tile(omega.offsets - tighten, len(Acl))
        cand = HPolytope(
            np.vstack([omega.normals, pre_N]),
            np.concatenate([omega.offsets, pre_b]),
        )
        try:
            new = geometry.reduce(cand)
        except ValueError:
            raise RuntimeError("terminal set empty -- relax constraints or shrink W")
        if _covers(omega.normals, omega.offsets, new.normals, new.offsets):
            omega = new
            break
        omega = new
    if omega.nrows == 0:
        raise RuntimeError("terminal set empty -- relax constraints or shrink W")
    scale = np.linalg.norm(omega.normals, axis=1)
    if np.any(omega.offsets < min_ball * scale):
        raise RuntimeError("terminal set empty -- relax constraints or shrink W")
    return omega


@dataclass
class FamilySpec:
    kind: str  # "state" | "input" | "terminal"
    ell: int
    n_samples: int
    dim_used: int
    rows_per_sample: int
    stream: int


def family_plan(T, eps, delta, p_x, p_u, p_T, preset="formula", scale=1.0,
                state_dim_uses_p=False):
    """Sample counts per constraint family.

    Default dimension argument is n + l*m (initial state plus correction
    inputs that influence step l); with state_dim_uses_p the family's own row
    count replaces n. The terminal family always uses the full horizon depth.
    Presets: formula keeps the bound; paper_total rescales all families
    proportionally so they sum to the pooled published total; scaled
    multiplies by an explicit factor.
    """
    specs = []
    idx = 0
    for ell in range(1, T):
        d = (p_x if state_dim_uses_p else N_X) + ell * N_U
        specs.append(FamilySpec("state", ell, sample_bound(d, eps, delta), d, p_x,
                                _STREAM_FAMILY_BASE + idx))
        idx += 1
    for ell in range(1, T):
        d = (p_u if state_dim_uses_p else N_X) + ell * N_U
        specs.append(FamilySpec("input", ell, sample_bound(d, eps, delta), d, p_u,
                                _STREAM_FAMILY_BASE + idx))
        idx += 1
    d = (p_T if state_dim_uses_p else N_X) + T * N_U
    specs.append(FamilySpec("terminal", T, sample_bound(d, eps, delta), d, p_T,
                            _STREAM_FAMILY_BASE + idx))

    if preset == "paper_total":
        total = sum(s.n_samples for s in specs)
        target = sample_bound(_POOLED_DIM, eps, delta)
        f = target / total
        for s in specs:
            s.n_samples = max(1, math.ceil(s.n_samples * f))
    elif preset == "scaled":
        for s in specs:
            s.n_samples = max(1, math.ceil(s.n_samples * scale))
    elif preset != "formula":
        raise ValueError(f"unknown preset {preset!r}")
    return specs


def deterministic_rows(K, T, Hx, hx, Hu, hu):
    """Step-0 rows: the state is known and u_0 = Kx + v_0, so no sampling."""
    nz = N_X + N_U * T
    state_N = np.zeros((Hx.shape[0], nz))
    state_N[:, :N_X] = Hx
    input_N = np.zeros((Hu.shape[0], nz))
    input_N[:, :N_X] = Hu @ K
    input_N[:, N_X:N_X + N_U] = Hu
    return np.vstack([state_N, input_N]), np.concatenate([hx, hu])


def generate_family_rows(model: UncertainModel, K, T, H, h, spec: FamilySpec,
                         master_seed, constant_q=False, chunk=20_000, limit=None):
    """Stream one family's sampled rows over (x, v) as (normals, offsets) chunks.

    Scenario draws are one-shot per family (q first, then w) from the family's
    derived stream, which makes regeneration exact regardless of chunking. For
    state/terminal families H acts on x_l; for input families H acts on
    u_l = K x_l + v_l.
    """
    K = np.asarray(K, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    h = np.asarray(h, dtype=float).ravel()
    ell = spec.ell
    N = spec.n_samples
    rng = _rng(master_seed, spec.stream)
    if constant_q:
        qs = np.repeat(model.sample_q(rng, N)[:, None, :], ell, axis=1)
    else:
        qs = model.sample_q(rng, N * ell).reshape(N, ell, N_W)
    ws = model.sample_w(rng, (N, ell))

    nz = N_X + N_U * T
    n_proc = N if limit is None else min(int(limit), N)
    is_input = spec.kind == "input"
    row_map = H @ K if is_input else H

    for start in range(0, n_proc, chunk):
        sl = slice(start, min(start + chunk, n_proc))
        c = sl.stop - sl.start
        Ad, Bd = model.discretize_batch(qs[sl].reshape(-1, 4))
        Ad = Ad.reshape(c, ell, N_X, N_X)
        Bd = Bd.reshape(c, ell, N_X, N_U)
        Acl = Ad + Bd @ K
        X = None
        for X in transfer_blocks_iter(Acl, Bd):
            pass
        split = N_X + N_U * ell
        X0v = X[:, :, :split]
        Xw = X[:, :, split:]
        w_flat = ws[sl].reshape(c, N_W * ell)

        normals = np.zeros((c, H.shape[0], nz))
        normals[:, :, :split] = np.einsum("pr,crk->cpk", row_map, X0v)
        if is_input:
            normals[:, :, split:split + N_U] += H
        offsets = h[None, :] - np.einsum("pr,crk,ck->cp", row_map, Xw, w_flat)
        yield normals.reshape(c * H.shape[0], nz), offsets.ravel()


def _shell_sweep_drop(A, b, shell_N, shell_b, cache, margin_rel=1e-7,
                      lp_budget=48, cloud_out=None):
    """Keep-mask for rows certified redundant against the reference shell.

    Shell rows are genuine system rows, so the shell contains the final set
    and any drop here is sound. Cached dual bases from earlier solves settle
    most rows without touching the solver; rows no cached basis covers get
    fresh support solves until the budget runs out, each solve contributing
    its basis to the cache, and whatever is left stays kept for the pooled
    filter downstream. The cache is reordered most-productive-first so later
    chunks converge faster. Shell optima are appended to cloud_out when given.
    """
    M = A.shape[0]
    keep = np.ones(M, dtype=bool)
    if M == 0:
        return keep
    margin = margin_rel * (1.0 + np.abs(b))
    unresolved = np.arange(M)
    hits = []
    for ci, (bn, bb) in enumerate(cache):
        if unresolved.size == 0:
            hits.append((0, -ci))
            continue
        valid, ub = dual_sweep(bn, bb, A[unresolved])
        drop = valid & (ub <= b[unresolved] - margin[unresolved])
        keep[unresolved[drop]] = False
        hits.append((int(valid.sum()), -ci))
        unresolved = unresolved[~valid]
    hits.sort(reverse=True)
    cache[:] = [cache[-ci] for _, ci in hits]

    if unresolved.size:
        order = unresolved[_pca_order(A[unresolved])] if unresolved.size > 1 else unresolved
        done = np.zeros(M, dtype=bool)
        warm_x = None
        warm_rows = None
        spent = 0
        for i in order:
            if done[i]:
                continue
            if spent >= lp_budget:
                break
            rep = solve_working_set(None, -A[i], shell_N, shell_b,
                                    x0=warm_x, seed_rows=warm_rows)
            spent += 1
            if rep.status == "infeasible":
                raise RuntimeError("offline synthesis infeasible")
            if rep.status != "optimal" or rep.x is None:
                done[i] = True
                continue
            warm_x = rep.x
            warm_rows = rep.active_rows
            if cloud_out is not None:
                cloud_out.append(rep.x)
            act = np.asarray(rep.active_rows, dtype=int)
            if act.size == 0:
                done[i] = True
                continue
            bn, bb = shell_N[act], shell_b[act]
            cache.insert(0, (bn, bb))
            rem = order[~done[order]]
            valid, ub = dual_sweep(bn, bb, A[rem])
            keep[rem[valid & (ub <= b[rem] - margin[rem])]] = False
            done[rem[valid]] = True
            done[i] = True
    del cache[96:]
    return keep


def assemble_constraints(model: UncertainModel, K, T, Hx, hx, Hu, hu, X_T: HPolytope,
                         specs, master_seed, constant_q=False, ref_samples=60,
                         lp_budget=48, exact_cap=1500, chunk=20_000, log=None):
    """Build the reduced sampled constraint set D over (x, v).

    Two streaming passes per family: the first collects a reference subset of
    genuine rows and reduces it to a shell (a superset of D, since its rows
    are a subset of the system), the second streams every family chunk by
    chunk through a box filter and dual-basis support sweeps against that
    shell. Pooled survivors then pass through the incremental essential
    filter, which is set-exact, and finally through full redundancy
    elimination when few enough rows remain to afford it. Returns (D, info)
    with raw and reduced row counts and stage timings.
    """
    log = (lambda *_: None) if log is None else log
    row_sets = {
        "state": (np.asarray(Hx, float), np.asarray(hx, float)),
        "input": (np.asarray(Hu, float), np.asarray(hu, float)),
        "terminal": (X_T.normals, X_T.offsets),
    }
    det_N, det_b = deterministic_rows(K, T, Hx, hx, Hu, hu)
    raw_rows = det_N.shape[0]
    det_n, det_bn = _normalized_rows(det_N, det_b)
    nz = det_N.shape[1]

    t0 = time.perf_counter()
    ref_blocks = []
    ref_tags = []
    for spec in specs:
        H, h = row_sets[spec.kind]
        p = H.shape[0]
        for normals, offsets in generate_family_rows(
                model, K, T, H, h, spec, master_seed, constant_q,
                chunk=chunk, limit=ref_samples):
            ref_blocks.append((normals, offsets))
            ref_tags.append(spec.stream * 64 + np.tile(np.arange(p),
                                                       normals.shape[0] // p))
    ref_N = np.vstack([det_n] + [blk[0] for blk in ref_blocks])
    ref_b = np.concatenate([det_bn] + [blk[1] for blk in ref_blocks])
    ref_N, ref_b = _normalized_rows(ref_N, ref_b)
    try:
        lo, hi = coordinate_box(ref_N, ref_b)
    except RuntimeError as exc:
        if "infeasible" in str(exc):
            raise RuntimeError("offline synthesis infeasible") from None
        raise
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise RuntimeError("offline synthesis infeasible")
    # Box faces are implied rows; pinning them keeps every later support
    # problem bounded. The shell filter shrinks the reference set so the
    # streaming sweeps solve against a few hundred rows instead of thousands.
    eye = np.eye(nz)
    box_N = np.vstack([eye, -eye])
    box_b = np.concatenate([hi, -lo])
    n_pin = det_n.shape[0] + box_N.shape[0]
    shell_N = np.vstack([det_n, box_N] + [blk[0] for blk in ref_blocks])
    shell_b = np.concatenate([det_bn, box_b] + [blk[1] for blk in ref_blocks])
    shell_N, shell_b = _normalized_rows(shell_N, shell_b)
    shell_g = np.concatenate([np.full(n_pin, -1)] + ref_tags)
    try:
        kept_ref = essential_filter(shell_N, shell_b, n_pin, groups=shell_g)
    except ValueError:
        raise RuntimeError("offline synthesis infeasible") from None
    shell_N, shell_b = shell_N[kept_ref], shell_b[kept_ref]
    t_ref = time.perf_counter() - t0
    log(f"reference shell: {ref_N.shape[0]} rows -> {shell_N.shape[0]} in {t_ref:.1f}s")

    t0 = time.perf_counter()
    cloud = []
    cache = []
    surv_N = [np.vstack([det_n, box_N])]
    surv_b = [np.concatenate([det_bn, box_b])]
    surv_g = [np.full(n_pin, -1)]
    surv_ph = [np.zeros(n_pin, dtype=np.int64)]
    for spec in specs:
        H, h = row_sets[spec.kind]
        p = H.shape[0]
        fam_kept = 0
        scen0 = 0
        for normals, offsets in generate_family_rows(
                model, K, T, H, h, spec, master_seed, constant_q, chunk=chunk):
            raw_rows += normals.shape[0]
            c = normals.shape[0] // p
            # one group per base row of this family, for dominance coherence;
            # rows from reference-pass scenarios are phase 0 so the filter
            # seeds its kept set with every family's shape first
            tags = spec.stream * 64 + np.tile(np.arange(p), c)
            ph = np.repeat(
                (np.arange(scen0, scen0 + c) >= ref_samples).astype(np.int64), p)
            scen0 += c
            normals, offsets = _normalized_rows(normals, offsets)
            ub = box_max(normals, lo, hi)
            keep = ub > offsets - 1e-7 * (1.0 + np.abs(offsets))
            normals = normals[keep]
            offsets = offsets[keep]
            tags = tags[keep]
            ph = ph[keep]
            if normals.shape[0]:
                keep2 = _shell_sweep_drop(normals, offsets, shell_N, shell_b,
                                          cache, lp_budget=lp_budget,
                                          cloud_out=cloud)
                normals = normals[keep2]
                offsets = offsets[keep2]
                tags = tags[keep2]
                ph = ph[keep2]
            if normals.shape[0]:
                surv_N.append(normals)
                surv_b.append(offsets)
                surv_g.append(tags)
                surv_ph.append(ph)
                fam_kept += normals.shape[0]
        log(f"family {spec.kind} l={spec.ell}: {spec.n_samples} samples, kept {fam_kept}")
    pool_N = np.vstack(surv_N)
    pool_b = np.concatenate(surv_b)
    pool_g = np.concatenate(surv_g)
    pool_ph = np.concatenate(surv_ph)
    t_stream = time.perf_counter() - t0
    log(f"streaming filters: {raw_rows} raw -> {pool_N.shape[0]} in {t_stream:.1f}s")

    # distance to the pass-B optimum cloud orders rows near-binding first
    gp = None
    if cloud:
        pts = np.asarray(cloud[-256:], dtype=float).T
        gp = np.empty(pool_N.shape[0])
        for s in range(0, pool_N.shape[0], 131072):
            e = min(s + 131072, pool_N.shape[0])
            gp[s:e] = pool_b[s:e] - (pool_N[s:e] @ pts).max(axis=1)

    t0 = time.perf_counter()
    try:
        kept = essential_filter(pool_N, pool_b, n_pin,
                                groups=pool_g, phases=pool_ph, order_gap=gp,
                                log=log)
    except ValueError:
        raise RuntimeError("offline synthesis infeasible") from None
    pool_N, pool_b = pool_N[kept], pool_b[kept]
    t_essential = time.perf_counter() - t0

    t0 = time.perf_counter()
    if pool_N.shape[0] <= exact_cap:
        try:
            D = geometry.reduce(HPolytope(pool_N, pool_b))
        except ValueError:
            raise RuntimeError("offline synthesis infeasible")
        log(f"exact reduction: {pool_N.shape[0]} -> {D.nrows} in "
            f"{time.perf_counter() - t0:.1f}s")
    else:
        D = HPolytope(pool_N, pool_b)
        log(f"exact reduction skipped at {pool_N.shape[0]} rows (cap {exact_cap})")
    t_exact = time.perf_counter() - t0
    if D.nrows == 0:
        raise RuntimeError("offline synthesis infeasible")

    info = {
        "raw": int(raw_rows),
        "reduced": int(D.nrows),
        "pooled": int(len(kept)),
        "time_reference": t_ref,
        "time_stream": t_stream,
        "time_essential": t_essential,
        "time_exact": t_exact,
    }
    return D, info


def _default_template(Hx, n_planar=16):
    """Directions over (x, u) whose D-supports outer-approximate the feasible region."""
    dirs = []
    for row in np.asarray(Hx, dtype=float):
        dirs.append(np.concatenate([row, np.zeros(N_U)]))
    for j in range(N_X + N_U):
        e = np.zeros(N_X + N_U)
        e[j] = 1.0
        dirs.append(e.copy())
        dirs.append(-e)
    for k in range(n_planar):
        th = 2.0 * np.pi * k / n_planar
        d = np.zeros(N_X + N_U)
        d[0], d[1] = np.cos(th), np.sin(th)
        dirs.append(d.copy())
        d = np.zeros(N_X + N_U)
        d[2], d[3] = np.cos(th), np.sin(th)
        dirs.append(d)
    return np.asarray(dirs)


def _lift_direction(t, K, T):
    """(x, u) direction to (x, v): u = Kx + v_0 makes the supports agree."""
    tx, tu = t[:N_X], t[N_X:]
    out = np.zeros(N_X + N_U * T)
    out[:N_X] = tx + K.T @ tu
    out[N_X:N_X + N_U] = tu
    return out


def _feasible_point(A, b, tol=1e-8):
    """Elastic feasibility: minimize the common slack t with t >= -1."""
    A, b = _normalized_rows(np.asarray(A, dtype=float), np.asarray(b, dtype=float))
    r, d = A.shape
    Ae = np.hstack([A, -np.ones((r, 1))])
    Ae = np.vstack([Ae, np.zeros((1, d + 1))])
    Ae[-1, -1] = -1.0
    be = np.concatenate([b, [1.0]])
    c = np.zeros(d + 1)
    c[-1] = 1.0
    rep = solve_working_set(None, c, Ae, be)
    if rep.status != "optimal" or rep.x is None:
        return False, None
    ok = rep.x[-1] <= tol * (1.0 + np.abs(b).max(initial=0.0))
    return bool(ok), (rep.x[:-1] if ok else None)


def robust_control_invariant(D: HPolytope, Av, Bv, K, w_bound, Hx,
                             template=None, max_iter=50, max_restarts=3, log=None):
    """Control invariant region of the sampled feasible set, plus certificate.

    Phase 1 outer-approximates the (x, u) shadow of D with template supports.
    Phase 2 runs the invariance recursion with the input eliminated exactly.
    Phase 3 certifies each vertex of the result: a correction sequence must
    exist that is feasible for D and whose first input sends every vertex
    dynamic back into the set despite the worst disturbance. A failed vertex
    contributes its direction to the template and the whole construction
    restarts; running out of restarts returns the set flagged uncertified.
    """
    log = (lambda *_: None) if log is None else log
    K = np.asarray(K, dtype=float)
    T = (D.dim - N_X) // N_U
    base_template = _default_template(Hx) if template is None else np.asarray(template, float)
    extra = []

    info = {"iterations": 0, "converged": False, "certified": False, "restarts": 0}
    omega = None
    for restart in range(max_restarts + 1):
        info["restarts"] = restart
        template_now = np.vstack([base_template] + extra) if extra else base_template
        s_vals = np.array([
            _support_value(D.normals, D.offsets, _lift_direction(t, K, T))
            for t in template_now
        ])
        finite = np.isfinite(s_vals)
        # every iterate lives inside the shadow, whose axis supports are part
        # of the template: a box a few times that scale keeps the redundancy
        # LPs well conditioned without clipping anything
        bb = 8.0 * max(1.0, float(np.abs(s_vals[finite]).max(initial=0.0)))
        shadow = geometry.reduce(HPolytope(template_now[finite], s_vals[finite]),
                                 box_bound=bb)
        omega = geometry.eliminate(shadow, [N_X + j for j in range(N_U)],
                                   box_bound=bb)

        converged = False
        for it in range(max_iter):
            info["iterations"] = it + 1
            g = omega.normals
            tighten = w_bound * np.abs(g).sum(axis=1)
            succ_N = np.concatenate([
                np.hstack([g @ Av[j], g @ Bv[j]]) for j in range(len(Av))
            ])
            succ_b = np.tile(omega.offsets - tighten, len(Av))
            cand = HPolytope(
                np.vstack([shadow.normals, succ_N]),
                np.concatenate([shadow.offsets, succ_b]),
            )
            try:
                pre = geometry.eliminate(cand, [N_X + j for j in range(N_U)],
                                         box_bound=bb, minimal=False)
                new = geometry.reduce(pre.intersect(omega), box_bound=bb)
            except ValueError as exc:
                if "infeasible" not in str(exc):
                    raise
                raise RuntimeError("robust invariant set empty") from exc
            if _covers(omega.normals, omega.offsets, new.normals, new.offsets):
                omega = new
                converged = True
                break
            omega = new
        info["converged"] = converged
        if not converged:
            warnings.warn("invariant set recursion hit the iteration cap", RuntimeWarning)

        verts = geometry.vertices(omega)
        tighten = w_bound * np.abs(omega.normals).sum(axis=1)
        bad = None
        for x in verts:
            rows_N = [D.normals[:, N_X:]]
            rows_b = [D.offsets - D.normals[:, :N_X] @ x]
            for j in range(len(Av)):
                blk = np.zeros((omega.nrows, D.dim - N_X))
                blk[:, :N_U] = omega.normals @ Bv[j]
                rows_N.append(blk)
                rows_b.append(omega.offsets - tighten - omega.normals @ ((Av[j] + Bv[j] @ K) @ x))
            ok, _ = _feasible_point(np.vstack(rows_N), np.concatenate(rows_b))
            if not ok:
                bad = x
                break
        if bad is None:
            info["certified"] = True
            log(f"invariant set certified: {omega.nrows} rows, "
                f"{len(verts)} vertices, restart {restart}")
            return omega, info
        nrm = np.linalg.norm(bad)
        if nrm == 0.0:
            break
        extra.append(np.concatenate([bad / nrm, np.zeros(N_U)])[None, :])
        log(f"vertex {bad} failed certification; restarting with its direction")

    warnings.warn("invariant set could not be certified on its vertices", RuntimeWarning)
    return omega, info


def first_step_rows(omega: HPolytope, Av, Bv, K, w_bound):
    """Rows over (x, v_0) keeping every vertex successor inside omega.

    The applied input is u = Kx + v_0; offsets absorb the worst disturbance
    rowwise. Reduced before returning since vertex blocks overlap heavily.
    """
    K = np.asarray(K, dtype=float)
    g = omega.normals
    tighten = w_bound * np.abs(g).sum(axis=1)
    blocks_N = []
    blocks_b = []
    for j in range(len(Av)):
        Acl = Av[j] + Bv[j] @ K
        blocks_N.append(np.hstack([g @ Acl, g @ Bv[j]]))
        blocks_b.append(omega.offsets - tighten)
    rows = HPolytope(np.vstack(blocks_N), np.concatenate(blocks_b))
    return geometry.reduce(rows)


def asymptotic_constant(model: UncertainModel, Q, R, P, P_l, P_u, eps_f,
                        rng=None, n_samples=2000):
    """Asymptotic mean-square bound C for the average closed-loop state cost.

    The curvature floor lambda_min is taken over sampled and vertex dynamics
    of the stage-cost correction; candidate-solution infeasibility enters
    through eps_f. With eps_f = 0 the correction vanishes and the bound is
    driven purely by the disturbance energy through P.
    """
    if not 0.0 <= eps_f < 1.0:
        raise ValueError("eps_f must lie in [0, 1)")
    rng = _rng(0, _STREAM_GAIN + 7) if rng is None else rng
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    P = np.asarray(P, dtype=float)

    if eps_f == 0.0:
        lam_min = float(min(np.linalg.eigvalsh(Q).min(), np.linalg.eigvalsh(R).min()))
    else:
        qs = model.sample_q(rng, n_samples)
        Ad, Bd = model.discretize_batch(qs)
        Avx, Bvx = model.discretize_batch(model.vertex_q())
        Ad = np.concatenate([Ad, Avx])
        Bd = np.concatenate([Bd, Bvx])
        kf = 2.0 * eps_f / (1.0 - eps_f)
        n_all = Ad.shape[0]
        U = np.zeros((n_all, N_X + N_U, N_X + N_U))
        APA = np.einsum("nji,jk,nkl->nil", Ad, P_u, Ad)
        APB = np.einsum("nji,jk,nkl->nil", Ad, P_u, Bd)
        BPB = np.einsum("nji,jk,nkl->nil", Bd, P_u, Bd)
        U[:, :N_X, :N_X] = Q - kf * (APA - 0.5 * P_l)
        U[:, :N_X, N_X:] = -kf * APB
        U[:, N_X:, :N_X] = -kf * np.transpose(APB, (0, 2, 1))
        U[:, N_X:, N_X:] = R - kf * BPB
        U = 0.5 * (U + np.transpose(U, (0, 2, 1)))
        lam_min = float(np.linalg.eigvalsh(U).min())
    if lam_min <= 0.0:
        raise RuntimeError("asymptotic bound not certifiable for this eps_f")

    sigma2 = model.w_variance()
    mean_term = sigma2 * float(np.trace(P))  # E||w||_P^2 for iid components
    corners = geometry.box_corners(np.full(N_W, model.w_bound))
    if eps_f == 0.0:
        max_term = 0.0
    else:
        vals = np.einsum("ci,ij,cj->c", corners, np.asarray(P_u, float), corners)
        max_term = 2.0 * eps_f / (1.0 - eps_f) * float(vals.max())
    return (mean_term + max_term) / lam_min


@dataclass
class ControllerArtifact:
    version: str
    config_fingerprint: str
    seed: int
    K: np.ndarray
    P: np.ndarray
    S_tilde: np.ndarray
    D: HPolytope
    first_step: HPolytope
    X_T: HPolytope
    dims: dict
    counts: dict

    def to_payload(self) -> dict:
        return {
            "version": self.version,
            "config_fingerprint": self.config_fingerprint,
            "seed": int(self.seed),
            "K": self.K,
            "P": self.P,
            "S_tilde": self.S_tilde,
            "D": {"normals": self.D.normals, "offsets": self.D.offsets},
            "first_step_rows": {
                "normals": self.first_step.normals,
                "offsets": self.first_step.offsets,
            },
            "X_T": {"normals": self.X_T.normals, "offsets": self.X_T.offsets},
            "dims": self.dims,
            "counts": self.counts,
        }

    @classmethod
    def from_payload(cls, d: dict) -> "ControllerArtifact":
        return cls(
            version=str(d["version"]),
            config_fingerprint=str(d["config_fingerprint"]),
            seed=int(d["seed"]),
            K=np.asarray(d["K"], dtype=float),
            P=np.asarray(d["P"], dtype=float),
            S_tilde=np.asarray(d["S_tilde"], dtype=float),
            D=HPolytope(np.asarray(d["D"]["normals"], float),
                        np.asarray(d["D"]["offsets"], float)),
            first_step=HPolytope(np.asarray(d["first_step_rows"]["normals"], float),
                                 np.asarray(d["first_step_rows"]["offsets"], float)),
            X_T=HPolytope(np.asarray(d["X_T"]["normals"], float),
                          np.asarray(d["X_T"]["offsets"], float)),
            dims={k: int(v) for k, v in d["dims"].items()},
            counts={k: int(v) for k, v in d["counts"].items()},
        )


def save_artifact(artifact: ControllerArtifact, path):
    with open(path, "w") as fh:
        fh.write(dumps(artifact.to_payload()))
        fh.write("\n")


def load_artifact(path, expected_config=None) -> ControllerArtifact:
    """Load and, when the driving config is supplied, verify its fingerprint."""
    import json

    with open(path) as fh:
        payload = json.load(fh)
    art = ControllerArtifact.from_payload(payload)
    if art.version != ARTIFACT_VERSION:
        raise RuntimeError(f"unsupported artifact version {art.version!r}")
    if expected_config is not None:
        expect = expected_config if isinstance(expected_config, str) else fingerprint(expected_config)
        if art.config_fingerprint != expect:
            raise RuntimeError("artifact fingerprint mismatch")
    return art


def synthesize(cfg: dict, log=None):
    """Run every offline stage and return (artifact, report).

    cfg must already be validated. The report carries stage timings, filter
    statistics and certification flags; the artifact is everything the online
    controller needs.
    """
    from .config import build_model, config_fingerprint, plant_constraints

    log = (lambda *_: None) if log is None else log
    model = build_model(cfg)
    cons = plant_constraints(cfg["constraints"])
    smpc = cfg["smpc"]
    T = int(smpc["horizon"])
    Q = np.diag(np.asarray(smpc["Q"], dtype=float))
    R = np.diag(np.asarray(smpc["R"], dtype=float))
    seed = int(cfg["seed"])
    report = {"stages": {}, "flags": {}}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:
            raise RuntimeError(f"synthesis stage '{name}' failed: {exc}") from exc
        report["stages"][name] = time.perf_counter() - t0
        log(f"stage {name}: {report['stages'][name]:.1f}s")
        return out

    Av, Bv, hull_margin = stage(
        "vertex_hull",
        lambda: model.vertex_outer_approx(rng=_rng(seed, _STREAM_HULL_CHECK)),
    )
    report["flags"]["hull_margin"] = hull_margin

    gain = stage("gain", lambda: design_gain(
        model, Q, R, rng=_rng(seed, _STREAM_GAIN), vertex_matrices=(Av, Bv)))
    report["flags"]["gain_retries"] = gain.retries
    report["flags"]["spectral_margin"] = gain.spectral_margin

    tc = stage("terminal_cost", lambda: terminal_cost(
        model, gain.K, Q, R, rng=_rng(seed, _STREAM_TERMINAL_COST)))
    report["flags"]["terminal_cost_inflation"] = tc.inflation
    report["flags"]["terminal_cost_certificate"] = tc.certificate

    X_T = stage("terminal_set", lambda: terminal_set(
        model, gain.K, cons.Hx, cons.hx, cons.Hu, cons.hu, vertex_matrices=(Av, Bv)))

    specs = family_plan(
        T, smpc["eps"], smpc["delta"], cons.Hx.shape[0], cons.Hu.shape[0],
        X_T.nrows, preset=smpc["preset"], scale=smpc["scale"],
        state_dim_uses_p=smpc["state_dim_uses_p"])
    D, sample_info = stage("sampling", lambda: assemble_constraints(
        model, gain.K, T, cons.Hx, cons.hx, cons.Hu, cons.hu, X_T, specs, seed,
        constant_q=smpc["constant_q_per_scenario"], log=log))
    report["sampling"] = sample_info

    omega, rci_info = stage("invariant_set", lambda: robust_control_invariant(
        D, Av, Bv, gain.K, model.w_bound, cons.Hx, log=log))
    report["flags"]["rci"] = rci_info

    D_R = stage("first_step", lambda: first_step_rows(omega, Av, Bv, gain.K, model.w_bound))

    cm = stage("cost_matrix", lambda: cost_matrix(
        gain.K, T, (Q, R, tc.P), model, M=int(smpc["cost_samples"]),
        rng=_rng(seed, _STREAM_COST_MATRIX),
        constant_q=smpc["constant_q_per_scenario"]))

    artifact = ControllerArtifact(
        version=ARTIFACT_VERSION,
        config_fingerprint=config_fingerprint(cfg),
        seed=seed,
        K=gain.K,
        P=tc.P,
        S_tilde=cm.S_tilde,
        D=D,
        first_step=D_R,
        X_T=X_T,
        dims={"n": N_X, "m": N_U, "m_w": N_W, "T": T},
        counts={"raw": sample_info["raw"], "reduced": sample_info["reduced"]},
    )
    return artifact, report
