"""JSON scenario files: schema, validation and conversion to :class:`Scenario`.

Infinite bounds are written as the strings ``"inf"`` and ``"-inf"``.
Unknown keys are rejected; every error names the offending location.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from selfmpc.estimator import NoiseSpec, check_psd
from selfmpc.model import ModelParams
from selfmpc.ocp import Bounds, CostData, validate_bounds, validate_cost
from selfmpc.sim import CONTROLLERS, Scenario


class ConfigError(ValueError):
    """Invalid scenario file; the message starts with the location."""


_num = {"type": "number"}
_vec = {"type": "array", "items": _num, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}
_bound = {"type": "array", "minItems": 1,
          "items": {"anyOf": [_num, {"enum": ["inf", "-inf"]}]}}


def _obj(props, required=None):
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(props) if required is None else required}


SCHEMA = _obj(
    {
        "model": _obj(
            {**{k: {"type": "number", "minimum": 0} for k in ("k1", "k2", "k3", "k4", "k5", "D")},
             "h": {"type": "number", "exclusiveMinimum": 0},
             "substeps": {"type": "integer", "minimum": 1}},
            required=[],
        ),
        "cost": _obj({"Q": _mat, "R": _mat, "P_N": _mat, "x_ref": _vec, "u_ref": _vec}),
        "bounds": _obj({"lower": _bound, "upper": _bound, "tau": {"type": "number", "exclusiveMinimum": 0}}),
        "noise": _obj({"W": _mat, "V": _mat, "C": _mat}),
        "horizon": {"type": "integer", "minimum": 2},
        "steps": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "y0": _vec,
        "S0": _mat,
        "controller": {"enum": list(CONTROLLERS)},
        "precondition": {"type": "boolean"},
        "gamma": {"type": "number", "minimum": 0},
        "output": _obj({"dir": {"type": "string"}, "verbosity": {"type": "integer", "minimum": 0}},
                       required=[]),
    },
    required=["cost", "bounds", "noise", "horizon", "y0", "S0"],
)


def _where(path):
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _arr(value, name, shape=None):
    a = np.array([[float(v) for v in row] for row in value] if isinstance(value[0], list)
                 else [float(v) for v in value])
    if shape is not None and a.shape != shape:
        raise ConfigError(f"{name}: expected shape {shape}, got {a.shape}")
    return a


def _arrays(doc, nx, nu):
    c = doc["cost"]
    cost = CostData(
        Q=_arr(c["Q"], "cost.Q", (nx, nx)), R=_arr(c["R"], "cost.R", (nu, nu)),
        P_N=_arr(c["P_N"], "cost.P_N", (nx, nx)),
        x_ref=_arr(c["x_ref"], "cost.x_ref", (nx,)), u_ref=_arr(c["u_ref"], "cost.u_ref", (nu,)),
    )
    b = doc["bounds"]
    bounds = Bounds(_arr(b["lower"], "bounds.lower", (nu,)), _arr(b["upper"], "bounds.upper", (nu,)),
                    float(b["tau"]))
    n = doc["noise"]
    C = _arr(n["C"], "noise.C")
    if C.ndim != 2 or C.shape[1] != nx:
        raise ConfigError(f"noise.C: expected {nx} columns, got shape {C.shape}")
    ne = C.shape[0]
    gamma = float(doc.get("gamma", 0.1))
    noise = NoiseSpec(W=_arr(n["W"], "noise.W", (nx, nx)), V=_arr(n["V"], "noise.V", (ne, ne)), C=C,
                      gamma=gamma)
    S0 = _arr(doc["S0"], "S0", (nx, nx))
    y0 = _arr(doc["y0"], "y0", (nx,))
    return cost, bounds, noise, y0, S0, gamma


def scenario_from_dict(doc: dict, source="<dict>") -> Scenario:
    """Validate a parsed document and build the scenario."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{source}: {_where(e.absolute_path)}: {e.message}")
    try:
        params = ModelParams(**doc.get("model", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: model: {exc}") from exc
    try:
        cost, bounds, noise, y0, S0, gamma = _arrays(doc, params.n_x, params.n_u)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    checks = [
        ("cost", lambda: validate_cost(cost)),
        ("bounds", lambda: validate_bounds(bounds)),
        ("noise.W", lambda: check_psd(noise.W, "W")),
        ("noise.V", lambda: check_psd(noise.V, "V")),
        ("S0", lambda: check_psd(S0, "S0")),
    ]
    for where, check in checks:
        try:
            check()
        except ValueError as exc:
            raise ConfigError(f"{source}: {where}: {exc}") from exc
    for name, M in (("noise.W", noise.W), ("noise.V", noise.V)):
        if np.any(M != np.diag(np.diag(M))):
            raise ConfigError(f"{source}: {name}: uniform noise needs a diagonal second-moment matrix")
    out = doc.get("output", {})
    return Scenario(
        model=params, cost=cost, bounds=bounds, noise=noise,
        N=int(doc["horizon"]), M=int(doc.get("steps", 1000)), seed=int(doc.get("seed", 0)),
        y0=y0, S0=S0,
        controller=doc.get("controller", "self_reflective"),
        precondition=bool(doc.get("precondition", False)), gamma=gamma,
        out_dir=out.get("dir"), verbosity=int(out.get("verbosity", 1)),
    )


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read scenario file ({exc.strerror})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: invalid JSON ({exc.msg})") from exc
    return scenario_from_dict(doc, source=str(path))


def reactor_path():
    return resources.files("selfmpc") / "data" / "reactor.json"


def reactor_scenario(**overrides) -> Scenario:
    """The bundled reactor scenario; keyword overrides replace Scenario fields."""
    with resources.as_file(reactor_path()) as p:
        sc = load_scenario(p)
    return sc.replace(**overrides) if overrides else sc
