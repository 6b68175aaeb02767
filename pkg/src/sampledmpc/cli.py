"""Operator entry point: synth | run | montecarlo | validate.

Exit codes: 0 success, 2 configuration error, 3 runtime feasibility
failure (any online QP infeasibility), 4 certificate or synthesis failure.
Output is deterministic given (config, seed).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import synthesis as syn
from .config import ConfigError, build_model, load_config, plant_constraints, validate_config
from .geometry import HPolytope, chebyshev_center, vertices
from .model import N_U, N_X
from .serialize import dumps
from .sim import run_campaign, run_episode, write_telemetry

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CERT = 4


def _load(args):
    if args.config:
        return load_config(args.config)
    return validate_config({})


def _ic_state(pos):
    return np.array([pos[0], pos[1], 0.0, 0.0])


def cmd_synth(args) -> int:
    try:
        cfg = _load(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    out = Path(args.out) if args.out else Path(cfg["output"]["artifact"])
    try:
        artifact, report = syn.synthesize(cfg, log=print)
    except RuntimeError as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_CERT
    syn.save_artifact(artifact, out)
    counts = artifact.counts
    print(f"rows: raw {counts['raw']}, reduced {counts['reduced']} "
          f"({100.0 * counts['reduced'] / max(counts['raw'], 1):.2f}%)")
    for name, secs in report["stages"].items():
        print(f"  {name}: {secs:.2f}s")
    print(f"artifact written to {out}")
    return EXIT_OK


def _load_pair(args):
    cfg = _load(args)
    if not args.artifact:
        raise ConfigError("artifact", "path required (--artifact)")
    artifact = syn.load_artifact(args.artifact, expected_config=cfg)
    return cfg, artifact


def cmd_run(args) -> int:
    try:
        cfg, artifact = _load_pair(args)
    except (ConfigError, OSError, RuntimeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    camp = cfg["campaign"]
    pos = [float(v) for v in args.ic.split(",")] if args.ic else camp["ics"][0]
    if len(pos) != 2:
        print("config error: --ic expects 'x,y'", file=sys.stderr)
        return EXIT_CONFIG
    model = build_model(cfg)
    cons = plant_constraints(cfg["constraints"])
    seed = args.seed if args.seed is not None else cfg["seed"]
    ep = run_episode(
        artifact, model, _ic_state(pos), seed,
        max_time=camp["timeout_steps"] * model.dt,
        plant=camp["truth_plant"], dock_radius=camp["dock_threshold"],
        constraints=cons)
    out = Path(args.out) if args.out else Path("episode.csv")
    write_telemetry(out, ep)
    print(f"outcome: {ep.outcome}, steps: {len(ep.records) - 1}, "
          f"effort: {ep.control_effort:.3f} N*s, telemetry: {out}")
    if ep.outcome == "qp_infeasible":
        print("online QP infeasible during episode", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    try:
        cfg, artifact = _load_pair(args)
    except (ConfigError, OSError, RuntimeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    camp = cfg["campaign"]
    model = build_model(cfg)
    cons = plant_constraints(cfg["constraints"])
    seed = args.seed if args.seed is not None else cfg["seed"]
    out_dir = Path(args.out) if args.out else Path(cfg["output"]["telemetry_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    episodes, summary = run_campaign(
        artifact, model, [_ic_state(p) for p in camp["ics"]], camp["reps"],
        seed, jobs=args.jobs,
        max_time=camp["timeout_steps"] * model.dt,
        plant=camp["truth_plant"], dock_radius=camp["dock_threshold"],
        constraints=cons)
    for i, ep in enumerate(episodes):
        write_telemetry(out_dir / f"episode_{i:04d}.csv", ep)
    summary_path = out_dir / Path(cfg["output"]["summary"]).name
    with open(summary_path, "w") as fh:
        fh.write(dumps(summary.to_payload()))
    print(f"{summary.runs} episodes: dock_rate {summary.dock_rate:.3f}, "
          f"effort mean {summary.effort_mean:.3f} N*s, "
          f"qp_infeasible {summary.qp_infeasible_count}")
    print(f"summary: {summary_path}")
    if summary.qp_infeasible_count:
        return EXIT_RUNTIME
    return EXIT_OK


def _validate_artifact(cfg, artifact, seed=0, log=print):
    """Rerun the offline certificates against fresh samples; [] if all hold."""
    model = build_model(cfg)
    cons = plant_constraints(cfg["constraints"])
    smpc = cfg["smpc"]
    Q = np.diag(np.asarray(smpc["Q"], dtype=float))
    R = np.diag(np.asarray(smpc["R"], dtype=float))
    K, P = artifact.K, artifact.P
    failures = []

    def check(name, ok, detail):
        log(f"  {name}: {'pass' if ok else 'FAIL'} ({detail})")
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 777)))

    # stochastic Lyapunov inequality on a fresh parameter batch
    qs = model.sample_q(rng, 2000)
    Ad, Bd = model.discretize_batch(qs)
    G = Ad + Bd @ K
    Qc = Q + K.T @ R @ K
    resid = Qc + np.einsum("nji,jk,nkl->il", G, P, G) / len(qs) - P
    lam = float(np.linalg.eigvalsh(0.5 * (resid + resid.T)).max())
    check("lyapunov", lam <= 1e-6, f"residual eigenvalue {lam:.3e}")

    # terminal set invariance over vertex dynamics and disturbance corners
    Av, Bv, _ = model.vertex_outer_approx(rng=rng)
    V = vertices(artifact.X_T)
    corners = np.array(
        [[sx, sy, sz, sw] for sx in (-1, 1) for sy in (-1, 1)
         for sz in (-1, 1) for sw in (-1, 1)], dtype=float) * model.w_bound
    worst = -np.inf
    for A_, B_ in zip(Av, Bv):
        Acl = A_ + B_ @ K
        succ = V @ Acl.T
        for w in corners:
            resid_ts = (artifact.X_T.normals @ (succ + w).T).max(axis=1) \
                - artifact.X_T.offsets
            worst = max(worst, float(resid_ts.max()))
    check("terminal_invariance", worst <= 1e-7, f"worst residual {worst:.3e}")

    in_state = float((cons.Hx @ V.T - cons.hx[:, None]).max())
    in_input = float((cons.Hu @ K @ V.T - cons.hu[:, None]).max())
    check("terminal_inside_constraints", max(in_state, in_input) <= 1e-7,
          f"state {in_state:.3e}, input {in_input:.3e}")

    # feasible-set sanity and one-step recursive feasibility on samples
    A_all = np.vstack([artifact.D.normals, artifact.first_step.normals])
    b_all = np.concatenate([artifact.D.offsets, artifact.first_step.offsets])
    center, radius = chebyshev_center(HPolytope(A_all, b_all))
    check("feasible_set_nonempty", radius > 0, f"chebyshev radius {radius:.3e}")

    n, m = N_X, N_U
    T = artifact.dims["T"]
    bad = 0
    total = 0
    for _ in range(25):
        z = center + rng.normal(size=center.size) * 0.2 * radius
        if np.any(A_all @ z > b_all):
            continue
        x, v = z[:n], z[n:]
        v_next = np.concatenate([v[m:], np.zeros(m)])
        for A_, B_ in zip(Av, Bv):
            xn = A_ @ x + B_ @ (K @ x + v[:m])
            for w in corners:
                zn = np.concatenate([xn + w, v_next])
                total += 1
                if np.any(artifact.D.normals @ zn > artifact.D.offsets + 1e-7):
                    bad += 1
    check("first_step_recursive", bad == 0 and total > 0,
          f"{bad} of {total} successor candidates left the set")
    return failures


def cmd_validate(args) -> int:
    try:
        cfg, artifact = _load_pair(args)
    except (ConfigError, OSError, RuntimeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = args.seed if args.seed is not None else 0
    print(f"validating {args.artifact}")
    failures = _validate_artifact(cfg, artifact, seed=seed)
    if failures:
        print(f"certificate failures: {', '.join(failures)}", file=sys.stderr)
        return EXIT_CERT
    print("all certificates hold")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sampledmpc",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, artifact=False):
        p.add_argument("--config", help="JSON config path (defaults built in)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if artifact:
            p.add_argument("--artifact", required=True)

    p = sub.add_parser("synth", help="offline synthesis, writes the artifact")
    common(p)
    p = sub.add_parser("run", help="one closed-loop episode, telemetry CSV out")
    common(p, artifact=True)
    p.add_argument("--ic", help="initial position 'x,y' (default first campaign ic)")
    p = sub.add_parser("montecarlo", help="full campaign, per-episode CSVs + summary")
    common(p, artifact=True)
    p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("validate", help="rerun artifact certificates")
    common(p, artifact=True)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING)
    args = build_parser().parse_args(argv)
    handler = {
        "synth": cmd_synth,
        "run": cmd_run,
        "montecarlo": cmd_montecarlo,
        "validate": cmd_validate,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
