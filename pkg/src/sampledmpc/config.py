"""Run configuration: schema, defaults, validation, and plant geometry rows.

A single JSON document drives synthesis, simulation, and campaigns. Unknown
keys are rejected with their full field path so a typo cannot silently fall
back to a default. The constraint block is turned into halfspace rows here:
the approach corridor is the wedge between the two cone edges through the
apex, the table edges cap both positions, and velocity and thrust bounds are
symmetric boxes. All state rows are expressed relative to the docking point,
which shifts only the offsets.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .serialize import dumps_canonical, fingerprint


class ConfigError(ValueError):
    """Invalid configuration; `path` names the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


DEFAULTS = {
    "seed": 0,
    "model": {
        "mass": 9.882,
        "dt": 5.0,
        "w_bound": 5e-3,
        "omega": 1.2e-3,
        "q_ranges": [
            [5e-5, 5e-4],
            [1e-3, 1.4e-3],
            [1e-6, 1.44e-6],
            [-9.1e-3, 1e-4],
        ],
    },
    "constraints": {
        "cone_vertices": [[0.0, 0.0], [4.0, 2.25], [2.25, 4.0]],
        "table_bounds": [4.0, 4.0],
        "velocity_bound": 0.05,
        "input_bound": 0.3,
        "dock": [2.5, 2.5],
    },
    "smpc": {
        "horizon": 10,
        "Q": [1e4, 1e4, 1e8, 1e8],
        "R": [1e6, 1e6],
        "eps": 0.05,
        "delta": 1e-3,
        "preset": "formula",
        "scale": 1.0,
        "cost_samples": 5000,
        "constant_q_per_scenario": False,
        "state_dim_uses_p": False,
        "eps_f_floor": 0.0,
    },
    "campaign": {
        "ics": [[3.2, 3.2], [3.6, 2.1], [3.5, 2.7]],
        "reps": 20,
        "dock_threshold": 0.18,
        "timeout_steps": 80,
        "truth_plant": "discrete_uncertain",
    },
    "output": {
        "artifact": "artifact.json",
        "telemetry_dir": "telemetry",
        "summary": "summary.json",
    },
}

_PRESETS = ("formula", "paper_total", "scaled")
_TRUTH_PLANTS = ("discrete_uncertain", "cw_linear")


def _check_number(value, path, lo=None, hi=None, strict_lo=False, strict_hi=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {type(value).__name__}")
    v = float(value)
    if not np.isfinite(v):
        raise ConfigError(path, "must be finite")
    if lo is not None and (v <= lo if strict_lo else v < lo):
        raise ConfigError(path, f"must be {'>' if strict_lo else '>='} {lo}")
    if hi is not None and (v >= hi if strict_hi else v > hi):
        raise ConfigError(path, f"must be {'<' if strict_hi else '<='} {hi}")
    return v


def _check_int(value, path, lo=None, hi=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {type(value).__name__}")
    if lo is not None and value < lo:
        raise ConfigError(path, f"must be >= {lo}")
    if hi is not None and value > hi:
        raise ConfigError(path, f"must be <= {hi}")
    return value


def _check_bool(value, path):
    if not isinstance(value, bool):
        raise ConfigError(path, f"expected a boolean, got {type(value).__name__}")
    return value


def _check_vector(value, path, length, lo=None, hi=None):
    if not isinstance(value, list) or len(value) != length:
        raise ConfigError(path, f"expected a list of {length} numbers")
    return [_check_number(v, f"{path}[{i}]", lo=lo, hi=hi) for i, v in enumerate(value)]


def _reject_unknown(block, path, allowed):
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")


def _merged(user):
    out = copy.deepcopy(DEFAULTS)
    for section, block in user.items():
        if section == "seed":
            out["seed"] = block
            continue
        if section not in out:
            raise ConfigError(section, "unknown key")
        if not isinstance(block, dict):
            raise ConfigError(section, "expected an object")
        for key, value in block.items():
            if key not in out[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            out[section][key] = copy.deepcopy(value)
    return out


def validate_config(user_config: dict) -> dict:
    """Merge onto defaults and validate; returns the full config dict."""
    if not isinstance(user_config, dict):
        raise ConfigError("", "top level must be an object")
    cfg = _merged(user_config)

    cfg["seed"] = _check_int(cfg["seed"], "seed", lo=0)

    m = cfg["model"]
    _check_number(m["mass"], "model.mass", lo=0, strict_lo=True)
    _check_number(m["dt"], "model.dt", lo=0, strict_lo=True)
    _check_number(m["w_bound"], "model.w_bound", lo=0)
    _check_number(m["omega"], "model.omega")
    qr = m["q_ranges"]
    if not isinstance(qr, list) or len(qr) != 4:
        raise ConfigError("model.q_ranges", "expected 4 [lo, hi] pairs")
    for i, pair in enumerate(qr):
        pair = _check_vector(pair, f"model.q_ranges[{i}]", 2)
        if pair[0] > pair[1]:
            raise ConfigError(f"model.q_ranges[{i}]", "lo exceeds hi")

    c = cfg["constraints"]
    cv = c["cone_vertices"]
    if not isinstance(cv, list) or len(cv) != 3:
        raise ConfigError("constraints.cone_vertices", "expected 3 [x, y] points")
    for i, pt in enumerate(cv):
        _check_vector(pt, f"constraints.cone_vertices[{i}]", 2)
    _check_vector(c["table_bounds"], "constraints.table_bounds", 2, lo=0)
    _check_number(c["velocity_bound"], "constraints.velocity_bound", lo=0, strict_lo=True)
    _check_number(c["input_bound"], "constraints.input_bound", lo=0, strict_lo=True)
    _check_vector(c["dock"], "constraints.dock", 2)

    s = cfg["smpc"]
    _check_int(s["horizon"], "smpc.horizon", lo=1)
    _check_vector(s["Q"], "smpc.Q", 4, lo=0)
    _check_vector(s["R"], "smpc.R", 2, lo=0)
    _check_number(s["eps"], "smpc.eps", lo=0, hi=0.14, strict_lo=True, strict_hi=True)
    _check_number(s["delta"], "smpc.delta", lo=0, hi=1, strict_lo=True, strict_hi=True)
    if s["preset"] not in _PRESETS:
        raise ConfigError("smpc.preset", f"expected one of {_PRESETS}")
    _check_number(s["scale"], "smpc.scale", lo=0, strict_lo=True)
    _check_int(s["cost_samples"], "smpc.cost_samples", lo=100)
    _check_bool(s["constant_q_per_scenario"], "smpc.constant_q_per_scenario")
    _check_bool(s["state_dim_uses_p"], "smpc.state_dim_uses_p")
    _check_number(s["eps_f_floor"], "smpc.eps_f_floor", lo=0, hi=1, strict_hi=True)

    k = cfg["campaign"]
    ics = k["ics"]
    if not isinstance(ics, list) or not ics:
        raise ConfigError("campaign.ics", "expected a nonempty list of [x, y] points")
    for i, pt in enumerate(ics):
        _check_vector(pt, f"campaign.ics[{i}]", 2)
    _check_int(k["reps"], "campaign.reps", lo=1)
    _check_number(k["dock_threshold"], "campaign.dock_threshold", lo=0, strict_lo=True)
    _check_int(k["timeout_steps"], "campaign.timeout_steps", lo=1)
    if k["truth_plant"] not in _TRUTH_PLANTS:
        raise ConfigError("campaign.truth_plant", f"expected one of {_TRUTH_PLANTS}")

    o = cfg["output"]
    for key in ("artifact", "telemetry_dir", "summary"):
        if not isinstance(o[key], str) or not o[key]:
            raise ConfigError(f"output.{key}", "expected a nonempty string")

    for section, allowed in (
        ("model", DEFAULTS["model"]),
        ("constraints", DEFAULTS["constraints"]),
        ("smpc", DEFAULTS["smpc"]),
        ("campaign", DEFAULTS["campaign"]),
        ("output", DEFAULTS["output"]),
    ):
        _reject_unknown(cfg[section], section, allowed)
    _reject_unknown(cfg, "", DEFAULTS)
    return cfg


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"not valid JSON ({exc})") from None
    return validate_config(user)


def config_fingerprint(cfg: dict) -> str:
    return fingerprint(cfg)


def canonical_config_text(cfg: dict) -> str:
    return dumps_canonical(cfg)


def build_model(cfg: dict):
    from .model import UncertainModel

    m = cfg["model"]
    return UncertainModel(
        mass=float(m["mass"]),
        dt=float(m["dt"]),
        q_ranges=np.asarray(m["q_ranges"], dtype=float),
        w_bound=float(m["w_bound"]),
        omega=float(m["omega"]),
    )


@dataclass
class PlantConstraints:
    """Halfspace rows of the state and input sets, dock-relative state frame."""

    Hx: np.ndarray
    hx: np.ndarray
    Hu: np.ndarray
    hu: np.ndarray
    dock: np.ndarray
    cone_vertices: np.ndarray
    table_bounds: np.ndarray
    velocity_bound: float
    input_bound: float

    def position_rows_testbed(self):
        """Position-plane rows with offsets back in the testbed frame."""
        pos = self.Hx[:, :2]
        keep = np.abs(pos).sum(axis=1) > 0
        return pos[keep], self.hx[keep] + pos[keep] @ self.dock


def plant_constraints(constraints_cfg: dict) -> PlantConstraints:
    """Build H_x, h_x, H_u, h_u from the geometry block.

    Cone rows: the corridor from the apex spanned by the two edge vertices.
    Each edge contributes one halfspace containing the third vertex. Table
    rows cap x1, x2 from above only (the wedge bounds them from below).
    """
    cv = np.asarray(constraints_cfg["cone_vertices"], dtype=float)
    apex, e1, e2 = cv
    dock = np.asarray(constraints_cfg["dock"], dtype=float)
    tb = np.asarray(constraints_cfg["table_bounds"], dtype=float)
    vb = float(constraints_cfg["velocity_bound"])
    ub = float(constraints_cfg["input_bound"])

    rows = []
    offs = []
    for edge, other in ((e1, e2), (e2, e1)):
        d = edge - apex
        normal = np.array([d[1], -d[0]])  # right-hand normal of the edge ray
        if normal @ (other - apex) > 0:
            normal = -normal  # inside = side containing the other vertex
        rows.append([normal[0], normal[1], 0.0, 0.0])
        offs.append(normal @ apex)
    rows.append([1.0, 0.0, 0.0, 0.0])
    offs.append(tb[0])
    rows.append([0.0, 1.0, 0.0, 0.0])
    offs.append(tb[1])
    for j, sign in ((2, 1.0), (2, -1.0), (3, 1.0), (3, -1.0)):
        row = [0.0] * 4
        row[j] = sign
        rows.append(row)
        offs.append(vb)

    Hx = np.asarray(rows, dtype=float)
    hx = np.asarray(offs, dtype=float)
    hx = hx - Hx[:, :2] @ dock  # shift position rows into the dock frame

    Hu = np.vstack([np.eye(2), -np.eye(2)])
    hu = np.full(4, ub)
    return PlantConstraints(
        Hx=Hx, hx=hx, Hu=Hu, hu=hu, dock=dock, cone_vertices=cv,
        table_bounds=tb, velocity_bound=vb, input_bound=ub,
    )
