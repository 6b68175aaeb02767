"""Closed-loop episodes and Monte Carlo campaigns on the uncertain plant.

An episode is the online loop at fixed sample time: measure, solve the
precomputed QP, apply u = Kx + v_0*, then step a truth plant with freshly
drawn parameters and disturbance. The truth plant defaults to the discrete
uncertain model with per-step i.i.d. parameters; a continuous-time orbital
step is available to probe the terms the control model neglects. Campaigns
aggregate docking statistics, control effort and empirical per-row
constraint violation frequencies, the quantities the chance-constraint
claim is judged by.

Determinism: the (artifact, ic, seed) triple fixes every draw of an
episode, and campaign episode seeds are derived from the master seed and
the episode index alone, so aggregation order cannot change results.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import plant_constraints, validate_config
from .controller import Controller, _stacked_rows, shift_warm_start
from .model import UncertainModel

TELEMETRY_HEADER = "step,t,x1,x2,v1,v2,u1,u2,qp_status,qp_time,objective,margin_min"
DOCK_RADIUS = 0.18


@dataclass
class Telemetry:
    step: int
    t: float
    x: np.ndarray
    u: np.ndarray
    qp_status: str
    qp_time: float
    objective: float
    margin_min: float
    margins: np.ndarray = field(default=None, repr=False)


@dataclass
class Episode:
    initial_state: np.ndarray
    seed: int
    records: list
    outcome: str  # docked | timeout | qp_infeasible
    time_to_dock: float
    control_effort: float
    candidate_infeasible: int = 0  # steps whose shifted warm start left the set
    candidate_checked: int = 0


@dataclass
class CampaignSummary:
    runs: int
    dock_rate: float
    effort_mean: float
    effort_min: float
    effort_max: float
    ttd_mean: float
    ttd_min: float
    ttd_max: float
    violation_rates: np.ndarray
    violation_samples: int
    qp_infeasible_count: int

    def to_payload(self) -> dict:
        return {
            "runs": self.runs,
            "dock_rate": self.dock_rate,
            "effort": {"mean": self.effort_mean, "min": self.effort_min,
                       "max": self.effort_max},
            "time_to_dock": {"mean": self.ttd_mean, "min": self.ttd_min,
                             "max": self.ttd_max},
            "violation": {"rates": [float(v) for v in self.violation_rates],
                          "max_rate": float(np.max(self.violation_rates))
                          if len(self.violation_rates) else 0.0,
                          "samples": self.violation_samples},
            "qp_infeasible_count": self.qp_infeasible_count,
        }


def default_constraints():
    return plant_constraints(validate_config({})["constraints"])


def episode_seed(master_seed, index) -> int:
    """Stable per-episode seed; depends only on the pair, not on run order."""
    ss = np.random.SeedSequence((int(master_seed), int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


def _truth_step(model: UncertainModel, plant, x, u, rng):
    if plant == "discrete_uncertain":
        q = model.sample_q(rng)
        w = model.sample_w(rng)
        return model.uncertain_truth_step(x, u, q, w)
    if plant == "cw_linear":
        w = model.sample_w(rng)
        return model.cw_truth_step(x, u, w)
    raise ValueError(f"unknown truth plant {plant!r}")


def run_episode(artifact, model: UncertainModel, ic, seed, max_time=400.0,
                plant="discrete_uncertain", dock_radius=DOCK_RADIUS,
                constraints=None, regulation=False) -> Episode:
    """Closed-loop run from ic until dock, timeout, or the horizon.

    The dock test uses the measured position before the control solve, so
    an episode starting inside the dock ball ends at step 0 with zero
    effort. With regulation=True the dock test is skipped and the loop runs
    the full horizon, the mode the time-averaged energy bound is checked
    in. A QP failure is recorded and the loop continues on the fallback
    input for diagnosis; the outcome still reports it.
    """
    cons = default_constraints() if constraints is None else constraints
    rng = np.random.default_rng(seed)
    ctl = Controller(artifact)
    x = np.asarray(ic, dtype=float).copy()
    dt = model.dt
    steps_max = int(round(max_time / dt))

    records = []
    effort = 0.0
    infeasible_steps = 0
    outcome = "timeout"
    ttd = math.nan
    n = artifact.dims["n"]
    m = artifact.dims["m"]
    rows_A, rows_b = _stacked_rows(artifact)
    cand_bad = 0
    cand_seen = 0
    prev_v = None

    def margins_at(xk):
        return cons.hx - cons.Hx @ xk

    for k in range(steps_max + 1):
        mg = margins_at(x)
        if not regulation and np.linalg.norm(x[:2]) < dock_radius:
            outcome = "docked"
            ttd = k * dt
            records.append(Telemetry(k, k * dt, x.copy(), np.zeros(2), "docked",
                                     0.0, math.nan, float(mg.min()), mg))
            break
        if k == steps_max:
            records.append(Telemetry(k, k * dt, x.copy(), np.zeros(2), "timeout",
                                     0.0, math.nan, float(mg.min()), mg))
            break
        if prev_v is not None:
            cand = shift_warm_start(prev_v, m)
            slack = rows_b - rows_A[:, :n] @ x - rows_A[:, n:] @ cand
            cand_seen += 1
            if slack.min() < -1e-9:
                cand_bad += 1
        dec = ctl.step(x)
        prev_v = dec.v_star if dec.qp_status == "optimal" else None
        if dec.qp_status != "optimal":
            infeasible_steps += 1
        records.append(Telemetry(k, k * dt, x.copy(), dec.u.copy(), dec.qp_status,
                                 dec.solve_time, dec.objective, float(mg.min()), mg))
        effort += float(np.abs(dec.u).sum()) * dt
        x = _truth_step(model, plant, x, dec.u, rng)

    if infeasible_steps:
        outcome = "qp_infeasible"
    return Episode(
        initial_state=np.asarray(ic, dtype=float),
        seed=int(seed),
        records=records,
        outcome=outcome,
        time_to_dock=ttd,
        control_effort=effort,
        candidate_infeasible=cand_bad,
        candidate_checked=cand_seen,
    )


def _episode_task(payload):
    artifact, model, ic, seed, kwargs = payload
    return run_episode(artifact, model, ic, seed, **kwargs)


def run_campaign(artifact, model: UncertainModel, ics, reps, master_seed,
                 jobs=1, **episode_kwargs):
    """reps episodes per initial condition; returns (episodes, summary)."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    tasks = []
    idx = 0
    for ic in ics:
        for _ in range(int(reps)):
            tasks.append((np.asarray(ic, dtype=float), episode_seed(master_seed, idx)))
            idx += 1
    if jobs and jobs > 1:
        payloads = [(artifact, model, ic, seed, episode_kwargs)
                    for ic, seed in tasks]
        with ProcessPoolExecutor(max_workers=int(jobs)) as pool:
            episodes = list(pool.map(_episode_task, payloads))
    else:
        episodes = [run_episode(artifact, model, ic, seed, **episode_kwargs)
                    for ic, seed in tasks]
    return episodes, summarize(episodes)


def monte_carlo(artifact, model: UncertainModel, ics, reps, master_seed,
                jobs=1, **episode_kwargs) -> CampaignSummary:
    _, summary = run_campaign(artifact, model, ics, reps, master_seed,
                              jobs=jobs, **episode_kwargs)
    return summary


def summarize(episodes) -> CampaignSummary:
    """Aggregate a campaign; order-independent by construction.

    Violation rates pool every post-initial recorded state (the states the
    controller produced), one counter per state-constraint row.
    """
    runs = len(episodes)
    efforts = np.array([ep.control_effort for ep in episodes])
    docked = [ep for ep in episodes if ep.outcome == "docked"]
    ttds = np.array([ep.time_to_dock for ep in docked])

    n_rows = None
    viol = None
    samples = 0
    for ep in episodes:
        for rec in ep.records:
            if rec.step == 0 or rec.margins is None:
                continue
            if viol is None:
                n_rows = rec.margins.size
                viol = np.zeros(n_rows)
            viol += rec.margins < 0
            samples += 1
    rates = (viol / samples) if samples else np.zeros(0)

    return CampaignSummary(
        runs=runs,
        dock_rate=len(docked) / runs if runs else 0.0,
        effort_mean=float(efforts.mean()) if runs else math.nan,
        effort_min=float(efforts.min()) if runs else math.nan,
        effort_max=float(efforts.max()) if runs else math.nan,
        ttd_mean=float(ttds.mean()) if len(ttds) else math.nan,
        ttd_min=float(ttds.min()) if len(ttds) else math.nan,
        ttd_max=float(ttds.max()) if len(ttds) else math.nan,
        violation_rates=rates,
        violation_samples=samples,
        qp_infeasible_count=sum(1 for ep in episodes
                                if ep.outcome == "qp_infeasible"),
    )


def average_state_energy(episodes) -> float:
    """Mean over episodes of the per-episode time-averaged squared state norm."""
    vals = []
    for ep in episodes:
        xs = np.array([rec.x for rec in ep.records])
        vals.append(float((xs ** 2).sum(axis=1).mean()))
    return float(np.mean(vals))


def write_telemetry(path, episode: Episode):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TELEMETRY_HEADER.split(","))
        for r in episode.records:
            out.writerow([
                r.step, f"{r.t:.10g}",
                f"{r.x[0]:.12g}", f"{r.x[1]:.12g}",
                f"{r.x[2]:.12g}", f"{r.x[3]:.12g}",
                f"{r.u[0]:.12g}", f"{r.u[1]:.12g}",
                r.qp_status, f"{r.qp_time:.6g}",
                f"{r.objective:.12g}", f"{r.margin_min:.12g}",
            ])
