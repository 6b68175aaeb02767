"""Polytopes in halfspace form and the operations the synthesis pipeline needs.

A polytope is the set {x : normals @ x <= offsets}. Every operation here is
exact up to LP tolerances: redundancy is certified by a support LP, never by
sampling, and reduction preserves the represented point set.

Conventions
-----------
* Rows are never rescaled in user-visible results; survivors of `reduce`
  keep their original coefficients and order.
* A row with a zero normal is vacuous when its offset is nonnegative and a
  certificate of emptiness otherwise.
* LP failures err on the safe side: a row whose redundancy LP does not
  converge is kept.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import serialize
from .solvers import solve_lp, solve_working_set

FEAS_TOL = 1e-8


@dataclass
class HPolytope:
    normals: np.ndarray  # (r, d)
    offsets: np.ndarray  # (r,)

    def __post_init__(self):
        self.normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        self.offsets = np.asarray(self.offsets, dtype=float).ravel()
        if self.normals.shape[0] != self.offsets.shape[0]:
            raise ValueError("normals and offsets disagree on row count")
        if not (np.all(np.isfinite(self.normals)) and np.all(np.isfinite(self.offsets))):
            raise ValueError("non-finite polytope data")

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    @property
    def nrows(self) -> int:
        return self.normals.shape[0]

    def contains(self, points, tol=FEAS_TOL):
        """Vectorized membership test. points: (d,) or (N, d)."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        resid = P @ self.normals.T - self.offsets
        ok = np.all(resid <= tol * (1.0 + np.abs(self.offsets)), axis=1)
        return ok if P.shape[0] > 1 else bool(ok[0])

    def intersect(self, other: "HPolytope") -> "HPolytope":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        return HPolytope(
            np.vstack([self.normals, other.normals]),
            np.concatenate([self.offsets, other.offsets]),
        )

    def to_json(self) -> str:
        return serialize.dumps({"normals": self.normals, "offsets": self.offsets})

    @classmethod
    def from_json(cls, text: str) -> "HPolytope":
        d = json.loads(text)
        return cls(np.array(d["normals"], dtype=float), np.array(d["offsets"], dtype=float))


def box(radii, center=None) -> HPolytope:
    """Axis-aligned box |x_i - c_i| <= radii_i."""
    radii = np.asarray(radii, dtype=float).ravel()
    d = radii.size
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float).ravel()
    N = np.vstack([np.eye(d), -np.eye(d)])
    return HPolytope(N, np.concatenate([c + radii, radii - c]))


def box_corners(radii, center=None) -> np.ndarray:
    """All 2^d corner points of an axis-aligned box."""
    radii = np.asarray(radii, dtype=float).ravel()
    d = radii.size
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float).ravel()
    signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
    return c + signs * radii


def _with_box(normals, offsets, box_bound):
    d = normals.shape[1]
    N = np.vstack([normals, np.eye(d), -np.eye(d)])
    b = np.concatenate([offsets, np.full(2 * d, float(box_bound))])
    return N, b


def chebyshev_center(poly: HPolytope, box_bound=1e6):
    """Largest inscribed ball (within an artificial box). Returns (center, radius).

    radius < 0 certifies emptiness of the boxed polytope.
    """
    N, b = _with_box(poly.normals, poly.offsets, box_bound)
    norms = np.linalg.norm(N, axis=1)
    norms[norms == 0.0] = 1.0
    A = np.hstack([N, norms[:, None]])
    c = np.zeros(poly.dim + 1)
    c[-1] = -1.0
    rep = solve_working_set(None, c, A, b)
    if rep.status != "optimal" or rep.x is None:
        raise RuntimeError(f"chebyshev center LP failed: {rep.status}")
    return rep.x[:-1], float(rep.x[-1])


def support(poly: HPolytope, direction, x0=None):
    """Support value and maximizer: max direction @ x over the polytope."""
    g = np.asarray(direction, dtype=float).ravel()
    rep = solve_working_set(None, -g, poly.normals, poly.offsets, x0=x0)
    if rep.status == "unbounded":
        raise ValueError("unbounded support")
    if rep.status == "infeasible":
        raise ValueError("infeasible set")
    if rep.status != "optimal":
        raise RuntimeError(f"support LP failed: {rep.status}")
    return float(g @ rep.x), rep.x


def is_redundant(poly: HPolytope, row: int, box_bound=1e6) -> bool:
    """LP redundancy test for one row against all the others.

    Maximizes the row's normal over the remaining rows inside an artificial
    box; the row is redundant when that maximum does not exceed its offset.
    Conservative: an unconverged LP keeps the row.
    """
    a = poly.normals[row]
    b_i = poly.offsets[row]
    if np.abs(a).max() == 0.0:
        return b_i >= 0.0
    mask = np.arange(poly.nrows) != row
    N, b = _with_box(poly.normals[mask], poly.offsets[mask], box_bound)
    rep = solve_working_set(None, -a, N, b)
    if rep.status == "infeasible":
        # the other rows alone are empty; any row is redundant for the empty set
        return True
    if rep.status != "optimal" or rep.x is None:
        return False
    return float(a @ rep.x) <= b_i + FEAS_TOL * (1.0 + abs(b_i))


def coordinate_box(normals, offsets):
    """Per-coordinate support bounds (lo, hi); infinite where unbounded.

    Rows should be normalized for decent LP scaling. Raises RuntimeError when
    a support LP fails outright (an infeasible system, for instance).
    """
    d = normals.shape[1]
    lo = np.empty(d)
    hi = np.empty(d)
    e = np.zeros(d)
    for j in range(d):
        for sgn in (1.0, -1.0):
            e[:] = 0.0
            e[j] = sgn
            rep = solve_working_set(None, -e, normals, offsets)
            if rep.status == "unbounded":
                val = np.inf
            elif rep.status == "optimal" and rep.x is not None:
                val = float(e @ rep.x)
            else:
                raise RuntimeError(f"support LP failed: {rep.status}")
            if sgn > 0:
                hi[j] = val
            else:
                lo[j] = -val
    return lo, hi


def box_max(A, lo, hi):
    """max of A @ z over the box, rowwise; tolerates infinite box edges."""
    with np.errstate(invalid="ignore"):
        term = np.where(A > 0, A * hi[None, :], np.where(A < 0, A * lo[None, :], 0.0))
    return term.sum(axis=1)


def _pca_order(A):
    """Row order along the dominant direction of variation (power iteration)."""
    center = A - A.mean(axis=0)
    v = center[0] + 1e-12
    for _ in range(3):  # crude axis is enough for ordering
        v = center.T @ (center @ v)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            break
        v = v / nv
    return np.argsort(A @ v, kind="stable")


def _windowed_dominance(A, b, idx, lo, hi, margin_rel=1e-7, window=48):
    """Survivors of pairwise dominance within one group, plus the drop count.

    Rows are ordered along the group's dominant direction so near-duplicates
    sit next to each other; each row is tested against a sliding window of
    earlier survivors. A drop cites a surviving genuine row j with
    b_j + max over the box of (a_i - a_j) z <= b_i, so it is certified.
    """
    if idx.size <= 1:
        return idx, 0
    idx = idx[_pca_order(A[idx])]
    alive = []
    dropped = 0
    for i in idx:
        tail = alive[-window:]
        if tail:
            dA = A[i][None, :] - A[tail]
            ub = b[tail] + box_max(dA, lo, hi)
            if np.any(ub <= b[i] - margin_rel * (1.0 + abs(b[i]))):
                dropped += 1
                continue
        alive.append(i)
    return np.asarray(alive, dtype=int), dropped


def dual_sweep(basis_N, basis_b, A, chunk=262144):
    """Support bounds from one optimal basis, batched over many directions.

    A support solve leaves an active basis of genuine rows. For a direction a
    whose least-squares dual y over those rows is nonnegative with negligible
    residual, weak duality gives sup a.z <= basis_b.y on every point that
    satisfies the basis rows, hence on any subset region. Valid entries are
    exact supports of the basis relaxation. Returns (valid, bound); bound is
    meaningless where invalid. The sign and residual tolerances sit orders of
    magnitude below the drop margins callers use.
    """
    k = basis_N.shape[0]
    M = A.shape[0]
    valid = np.zeros(M, dtype=bool)
    ub = np.full(M, np.inf)
    if k == 0 or M == 0:
        return valid, ub
    Bt = basis_N.T
    for s in range(0, M, chunk):
        e = min(s + chunk, M)
        At = A[s:e].T
        y, *_ = np.linalg.lstsq(Bt, At, rcond=None)
        err = At - Bt @ y
        rn2 = (err * err).sum(axis=0)
        valid[s:e] = (rn2 <= 1e-20) & (y.min(axis=0) >= -1e-12)
        ub[s:e] = basis_b @ y
    return valid, ub


class _KeptSet:
    """Grow-only row store with contiguous array views for the LP solver."""

    def __init__(self, normals, offsets):
        self._blocks_N = [np.atleast_2d(normals)]
        self._blocks_b = [np.atleast_1d(offsets)]
        self._N = self._blocks_N[0]
        self._b = self._blocks_b[0]
        self._stale = 0

    def add(self, normals, offsets):
        normals = np.atleast_2d(normals)
        self._blocks_N.append(normals)
        self._blocks_b.append(np.atleast_1d(offsets))
        self._stale += normals.shape[0]

    @property
    def nrows(self):
        return self._N.shape[0] + self._stale

    def arrays(self):
        if self._stale:
            self._N = np.vstack(self._blocks_N)
            self._b = np.concatenate(self._blocks_b)
            self._blocks_N = [self._N]
            self._blocks_b = [self._b]
            self._stale = 0
        return self._N, self._b


def essential_filter(A, b, n_pinned, groups=None, phases=None, order_gap=None,
                     margin_rel=1e-7, dom_window=48, log=None):
    """Set-exact reduction of a row-normalized system; returns kept indices.

    A row is dropped only when rows of the system itself certify it: the
    pinned block plus rows kept so far always cut out a superset of the full
    intersection, so a support bound below a row's offset proves the row
    redundant and the survivors leave the set unchanged. Certificates,
    cheapest first: windowed pairwise dominance inside each group, then
    dual-basis sweeps. Each support solve against the kept rows leaves an
    optimal active basis, and one batched least-squares pass turns it into
    exact support values for every remaining direction whose dual over that
    basis is nonnegative, so a single solve settles a whole cone of
    directions, dropping the slack ones and keeping the binding ones. Rows
    are visited most binding first (phase 0 before phase 1, then by distance
    to a caller-supplied point cloud) so the kept set tightens before the
    bulk is judged. The first n_pinned rows are kept unconditionally; they
    must make the intersection bounded or every support solve degenerates.

    Rows that are binding on the full intersection always survive: every
    drop certificate upper-bounds a support over a superset of the full set,
    and for a binding row that support can never sit below the offset.

    A and b must be row-normalized. Raises ValueError("infeasible set").
    """
    log = (lambda *_: None) if log is None else log
    r_all = A.shape[0]
    if r_all <= n_pinned:
        return np.arange(r_all)
    margin = margin_rel * (1.0 + np.abs(b))
    kept_idx = list(range(n_pinned))
    kept = _KeptSet(A[:n_pinned], b[:n_pinned])
    try:
        lo, hi = coordinate_box(A[:n_pinned], b[:n_pinned])
    except RuntimeError as exc:
        if "infeasible" in str(exc):
            raise ValueError("infeasible set") from None
        raise

    rest = np.arange(n_pinned, r_all)
    gid = np.zeros(r_all, dtype=np.int64) if groups is None else np.asarray(groups, np.int64)
    phase = np.zeros(r_all, dtype=np.int64) if phases is None else np.asarray(phases, np.int64)
    gp = np.zeros(r_all) if order_gap is None else np.asarray(order_gap, float)

    # dominance first: no LPs, and it removes the bulk of near-duplicate
    # scenario rows before anything touches the solver
    n_dom = 0
    survivors = []
    rest = rest[np.argsort(gid[rest], kind="stable")]
    run_starts = np.flatnonzero(np.diff(gid[rest], prepend=gid[rest[0]] - 1))
    for s, e in zip(run_starts, np.append(run_starts[1:], rest.size)):
        alive, dropped = _windowed_dominance(A, b, rest[s:e], lo, hi,
                                             margin_rel, dom_window)
        n_dom += dropped
        survivors.append(alive)
    rest = np.concatenate(survivors)

    queue = rest[np.lexsort((gp[rest], phase[rest]))]
    resolved = np.zeros(r_all, dtype=bool)
    bases_seen = set()
    warm_x = None
    warm_rows = None
    n_lp = 0
    n_sweep = 0
    for ptr in range(queue.size):
        i = int(queue[ptr])
        if resolved[i]:
            continue
        N, bb = kept.arrays()
        rep = solve_working_set(None, -A[i], N, bb, x0=warm_x, seed_rows=warm_rows)
        n_lp += 1
        if rep.status == "infeasible":
            raise ValueError("infeasible set")
        resolved[i] = True
        if rep.status != "optimal" or rep.x is None:
            kept_idx.append(i)
            kept.add(A[i], b[i])
            continue
        warm_x = rep.x
        warm_rows = rep.active_rows
        if float(A[i] @ rep.x) > b[i] - margin[i]:
            kept_idx.append(i)
            kept.add(A[i], b[i])
        act = tuple(int(r) for r in np.sort(np.asarray(rep.active_rows, dtype=int)))
        if not act or act in bases_seen:
            continue
        bases_seen.add(act)
        rem = queue[ptr + 1:]
        rem = rem[~resolved[rem]]
        if rem.size == 0:
            continue
        valid, ub = dual_sweep(N[list(act)], bb[list(act)], A[rem])
        dr = valid & (ub <= b[rem] - margin[rem])
        kp = valid & ~dr
        resolved[rem[valid]] = True
        n_sweep += int(dr.sum())
        if kp.any():
            kept_idx.extend(int(j) for j in rem[kp])
            kept.add(A[rem[kp]], b[rem[kp]])
    log(f"essential filter: {r_all} -> {len(kept_idx)} with {n_lp} support solves "
        f"({n_dom} dominance drops, {n_sweep} sweep drops)")
    return np.sort(np.asarray(kept_idx, dtype=int))


def _dedupe(normals, offsets, tol=1e-12):
    """Keep, per group of identical normalized rows, the tightest offset.

    Returns kept original indices in ascending order.
    """
    norms = np.linalg.norm(normals, axis=1)
    scale = np.where(norms > 0, norms, 1.0)
    U = np.hstack([normals / scale[:, None], (offsets / scale)[:, None]])
    order = np.lexsort(U.T[::-1])
    keep = []
    prev = None
    for i in order:
        if (
            prev is not None
            and np.abs(U[i, :-1] - U[prev, :-1]).max() <= tol
            and U[i, -1] >= U[prev, -1] - tol
        ):
            # implied by the kept row; the offset guard matters because noise
            # below tol in the direction coordinates can break the sort's
            # tightest-first order within a group
            continue
        keep.append(i)
        prev = i
    return np.sort(np.array(keep, dtype=int))


def _ray_essentials(normals, offsets, center, chunk=256):
    """Indices of rows provably irredundant by first-hit ray casting.

    Shooting a ray from a strictly interior point along each row normal,
    the uniquely first-hit hyperplane carries an essential row: points just
    past the hit violate only that row.
    """
    norms = np.linalg.norm(normals, axis=1)
    scale = np.where(norms > 0, norms, 1.0)
    A = normals / scale[:, None]
    b = offsets / scale
    slack = b - A @ center
    if slack.min() <= 1e-12:
        return np.empty(0, dtype=int)
    r = len(b)
    essential = set()
    for lo in range(0, r, chunk):
        G = A[lo : lo + chunk].T  # directions (d, m)
        denom = A @ G  # (r, m)
        with np.errstate(divide="ignore"):
            T = np.where(denom > 1e-12, slack[:, None] / denom, np.inf)
        t1 = T.min(axis=0)
        hit = T.argmin(axis=0)
        T[hit, np.arange(T.shape[1])] = np.inf
        t2 = T.min(axis=0)
        ok = np.isfinite(t1) & (t2 > t1 * (1 + 1e-9) + 1e-12)
        essential.update(hit[np.flatnonzero(ok)].tolist())
    return np.array(sorted(essential), dtype=int)


def reduce(poly: HPolytope, box_bound=1e6, minimal=True) -> HPolytope:
    """Remove every redundant row; survivors keep their order and coefficients.

    With minimal=False only the certified bulk filters run: the result
    represents the same set but may retain rows within the drop margin of
    binding. Intermediate systems of an elimination want that mode; anything
    user-visible wants the exact one.

    Raises ValueError("infeasible set") when the polytope is empty.
    """
    normals, offsets = poly.normals, poly.offsets
    # Box-reach triage, covering zero and near-zero normals in one test: a
    # row whose support over the artificial box stays at or below its offset
    # is vacuous there (elimination residues with ~1e-16 normals land here),
    # and one violated by every box point certifies emptiness.
    reach = np.abs(normals).sum(axis=1) * box_bound
    if np.any(offsets < -reach):
        raise ValueError("infeasible set")
    idx = np.flatnonzero(offsets < reach)
    if idx.size == 0:
        return HPolytope(np.empty((0, poly.dim)), np.empty(0))
    idx = idx[_dedupe(normals[idx], offsets[idx])]

    center, radius = chebyshev_center(HPolytope(normals[idx], offsets[idx]), box_bound)
    if radius < -FEAS_TOL:
        raise ValueError("infeasible set")

    if len(idx) > 64:
        # Sound prefilter before the per-row LPs: pin the coordinate box
        # faces (implied rows, so the set is unchanged) and let the sweep
        # filter drop certified-redundant rows in bulk. Binding rows always
        # survive it, and the dual certificate of each box face cites only
        # binding rows, so the surviving genuine rows alone still imply the
        # box and the exact passes below see the same set.
        scale = np.linalg.norm(normals[idx], axis=1)
        scale[scale == 0.0] = 1.0
        An = normals[idx] / scale[:, None]
        bn = offsets[idx] / scale
        try:
            lo, hi = coordinate_box(An, bn)
        except RuntimeError:
            lo = hi = None
        if lo is not None and np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)):
            d = An.shape[1]
            eye = np.eye(d)
            kept = essential_filter(
                np.vstack([eye, -eye, An]),
                np.concatenate([hi, -lo, bn]),
                2 * d,
            )
            kept = kept[kept >= 2 * d] - 2 * d
            idx = idx[kept]

    if not minimal:
        return HPolytope(normals[idx].copy(), offsets[idx].copy())

    # Exact stage, one scan. Verdicts are sticky: deleting a redundant row
    # only enlarges the region of every later test, so a row once verified
    # essential stays essential and no second pass is needed. Each support
    # LP leaves an optimal basis of genuine rows, and a batched dual sweep
    # turns it into exact supports for every remaining row in that basis's
    # normal cone, so most redundant rows never pay for their own solve.
    r = len(idx)
    scale = np.linalg.norm(normals[idx], axis=1)
    scale[scale == 0.0] = 1.0
    An = normals[idx] / scale[:, None]
    bn = offsets[idx] / scale
    alive = np.ones(r, dtype=bool)
    resolved = np.zeros(r, dtype=bool)
    if radius > 1e-10 and r > 8:
        resolved[_ray_essentials(An, bn, center)] = True  # provably essential
    tol = FEAS_TOL * (1.0 + np.abs(bn))
    slack_order = np.argsort(bn - An @ center, kind="stable")
    unsure = []
    for i in slack_order:
        if not alive[i] or resolved[i]:
            continue
        others = np.flatnonzero(alive)
        others = others[others != i]
        N, bb = _with_box(An[others], bn[others], box_bound)
        if len(bb) <= 2048:
            rep = solve_lp(-An[i], N, bb)
        else:
            rep = solve_working_set(None, -An[i], N, bb, x0=center)
        if rep.status != "optimal" or rep.x is None:
            unsure.append(i)  # conservative keep, retried once below
            continue
        resolved[i] = True
        if float(An[i] @ rep.x) <= bn[i] + tol[i]:
            alive[i] = False
        act = rep.active_rows
        if len(act) == 0 or act.max() >= len(others):
            continue  # basis touches the artificial box; not a certificate
        J = others[act]
        rem = np.flatnonzero(alive & ~resolved)
        rem = rem[~np.isin(rem, J)]
        if rem.size:
            valid, ub = dual_sweep(An[J], bn[J], An[rem])
            dr = valid & (ub <= bn[rem] + tol[rem])
            alive[rem[dr]] = False
            resolved[rem[dr]] = True
    for i in unsure:
        if not alive[i] or resolved[i]:
            continue
        sub = HPolytope(An[alive], bn[alive])
        pos = int(np.flatnonzero(np.flatnonzero(alive) == i)[0])
        if is_redundant(sub, pos, box_bound):
            alive[i] = False
    idx = idx[alive]
    return HPolytope(normals[idx].copy(), offsets[idx].copy())


def pontryagin_diff(poly: HPolytope, generators) -> HPolytope:
    """Erosion of the polytope by the convex hull of a finite generator set.

    Each offset shrinks by the support of the generators in the row normal.
    """
    G = np.atleast_2d(np.asarray(generators, dtype=float))
    if G.shape[1] != poly.dim:
        raise ValueError("generator dimension mismatch")
    shrink = (poly.normals @ G.T).max(axis=1)
    return HPolytope(poly.normals.copy(), poly.offsets - shrink)


def eliminate(poly: HPolytope, drop, box_bound=1e6, row_cap=200_000,
              minimal=True) -> HPolytope:
    """Project out the listed coordinates by Fourier-Motzkin elimination.

    Intended for a handful of variables (the input dimension of the plant);
    each elimination is followed by a certified bulk reduction to keep the
    row count under control, and the result gets an exact reduction unless
    minimal=False. Raises if an elimination would exceed row_cap rows.
    """
    drop = sorted(set(int(i) for i in np.atleast_1d(drop)), reverse=True)
    if len(drop) > 4:
        raise ValueError("refusing to eliminate more than 4 variables")
    out = reduce(poly, box_bound, minimal=False)
    if out.nrows > 512:
        out = reduce(out, box_bound)
    for j in drop:
        A, b = out.normals, out.offsets
        col = A[:, j]
        tol = 1e-12 * max(1.0, np.abs(A).max())
        pos = np.flatnonzero(col > tol)
        neg = np.flatnonzero(col < -tol)
        zero = np.flatnonzero(np.abs(col) <= tol)
        if len(pos) * len(neg) + len(zero) > row_cap:
            raise ValueError("projection too large")
        rows = [np.delete(A[zero], j, axis=1)]
        offs = [b[zero]]
        if len(pos) and len(neg):
            Ap = A[pos] / col[pos, None]
            bp = b[pos] / col[pos]
            An = A[neg] / (-col[neg, None])
            bn = b[neg] / (-col[neg])
            comb = (Ap[:, None, :] + An[None, :, :]).reshape(-1, A.shape[1])
            rows.append(np.delete(comb, j, axis=1))
            offs.append((bp[:, None] + bn[None, :]).ravel())
        newA = np.vstack(rows)
        newb = np.concatenate(offs)
        if newA.shape[0] == 0:
            out = HPolytope(np.empty((0, A.shape[1] - 1)), np.empty(0))
            continue
        out = reduce(HPolytope(newA, newb), box_bound, minimal=False)
        if out.nrows > 512:
            # near-duplicate survivors of the bulk filters compound across
            # eliminations; an exact pass here keeps the pairing quadratic
            # in a small factor
            out = reduce(out, box_bound)
    if minimal and out.nrows:
        out = reduce(out, box_bound)
    return out


def vertices(poly: HPolytope, dedupe_tol=1e-7) -> np.ndarray:
    """Vertex enumeration for dimension <= 4 via active-row combinations."""
    if poly.dim > 4:
        raise ValueError("vertex enumeration restricted to dimension <= 4")
    red = reduce(poly)
    A, b = red.normals, red.offsets
    r, d = A.shape
    if r < d:
        raise ValueError("unbounded polytope has no vertex representation")
    from itertools import combinations

    combos = np.array(list(combinations(range(r), d)), dtype=int)
    verts = []
    for lo in range(0, len(combos), 20000):
        idx = combos[lo : lo + 20000]
        M = A[idx]  # (n, d, d)
        rhs = b[idx]
        dets = np.abs(np.linalg.det(M))
        ok = dets > 1e-10 * np.maximum(1.0, np.abs(M).max(axis=(1, 2)) ** d)
        if not np.any(ok):
            continue
        X = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
        feas = np.all(X @ A.T - b <= FEAS_TOL * (1.0 + np.abs(b)), axis=1)
        verts.append(X[feas])
    if not verts:
        return np.empty((0, d))
    V = np.vstack(verts)
    # dedupe by rounding at a scale-aware grid
    scale = max(1.0, np.abs(V).max())
    key = np.round(V / (dedupe_tol * scale)).astype(np.int64)
    _, first = np.unique(key, axis=0, return_index=True)
    return V[np.sort(first)]
