"""
Scenario configuration: JSON documents validated against a schema and
turned into the typed objects each pipeline stage consumes.
"""
import copy
import glob
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import jsonschema
import numpy as np

from reachsynth.abstraction import InputGrid, cells_meeting, cells_outside, classify_avoid, forbidden_pairs
from reachsynth.errors import ConfigError, InfeasibleSpecificationError
from reachsynth.funnel import CheckSettings
from reachsynth.games import MODES
from reachsynth.interval_core import EMPTY, Box, PartitionGrid, box_expand, box_intersection, box_shrink, preimage_pi
from reachsynth.models import ModelBundle, resolve_model
from reachsynth.reachability import ReachSettings
from reachsynth.simulate import SimulationSettings, SpecMonitor

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TEMPLATE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "templates")
# integration steps per sampling period, at least
DT_PER_PERIOD = 100

_BOUND = {"type": ["number", "null"]}
_VECTOR = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_COUNTS = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}
_BOX = {
    "type": "object",
    "properties": {
        "lo": {"type": "array", "items": _BOUND, "minItems": 1},
        "hi": {"type": "array", "items": _BOUND, "minItems": 1},
    },
    "required": ["lo", "hi"],
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "model": {
            "type": "object",
            "properties": {
                "name": {"type": "string"},
                "params": {"type": "object"},
            },
            "required": ["name"],
            "additionalProperties": False,
        },
        "T_s": {"type": "number", "exclusiveMinimum": 0},
        "sets": {
            "type": "object",
            "properties": {
                "X": _BOX,
                "X_a": {"type": "array", "items": _BOX},
                "X_r": _BOX,
                "W": _BOX,
                "U_hat": _BOX,
                "dU_hat": _BOX,
                "W_hat": _BOX,
                "initial_region": _BOX,
            },
            "required": ["X", "X_a", "X_r", "W", "U_hat", "dU_hat", "W_hat"],
            "additionalProperties": False,
        },
        "certificate": {
            "type": "object",
            "properties": {
                "import": {"type": ["string", "null"]},
                "q_weight": _VECTOR,
                "r_weight": _VECTOR,
                "operating_point": {
                    "type": "object",
                    "properties": {"xhat": _VECTOR, "uhat": _VECTOR},
                    "required": ["xhat", "uhat"],
                    "additionalProperties": False,
                },
                "alpha": {"oneOf": [{"type": "number", "minimum": 0}, {"const": "auto"}]},
                "gamma_range": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                "minItems": 2, "maxItems": 2},
                "scan_points": {"type": "integer", "minimum": 2},
                "bisection_steps": {"type": "integer", "minimum": 0},
                "prefer": {"enum": ["largest", "smallest"]},
                "accept_inconclusive": {"type": "boolean"},
                "E0": {"oneOf": [_BOX, {"type": "null"}]},
                "checks": {
                    "type": "object",
                    "properties": {
                        "samples": {"type": "integer", "minimum": 1},
                        "max_boxes": {"type": "integer", "minimum": 1},
                        "min_width": {"type": "number", "exclusiveMinimum": 0},
                        "batch": {"type": "integer", "minimum": 1},
                        "tolerance": {"type": "number", "minimum": 0},
                        "seed": {"type": "integer", "minimum": 0},
                        "time_samples": {"type": "integer", "minimum": 1},
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "epsilon": {
            "type": "object",
            "properties": {
                "source": {"enum": ["certificate", "fixed"]},
                "values": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "frame": {"enum": ["error", "state"]},
            },
            "required": ["source"],
            "additionalProperties": False,
        },
        "abstraction": {
            "type": "object",
            "properties": {
                "cells_per_dim": _COUNTS,
                "inputs_per_dim": _COUNTS,
                "domain": _BOX,
                "steps": {"type": "integer", "minimum": 1},
                "inflation": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "mode": {"enum": list(MODES)},
            },
            "required": ["cells_per_dim", "inputs_per_dim"],
            "additionalProperties": False,
        },
        "simulation": {
            "type": "object",
            "properties": {
                "runs": {"type": "integer", "minimum": 0},
                "duration": {"type": "number", "exclusiveMinimum": 0},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "switch_period": {"type": "number", "exclusiveMinimum": 0},
                "randomize_what": {"type": "boolean"},
                "seed": {"type": "integer", "minimum": 0},
                "record": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
            "additionalProperties": False,
        },
    },
    "required": ["schema_version", "model", "T_s", "sets", "abstraction"],
    "additionalProperties": False,
}

# sections each stage depends on; artifacts carry the digest of their stage
STAGE_SECTIONS = {
    "certify": ("schema_version", "model", "T_s", "sets", "certificate"),
    "abstract": ("schema_version", "model", "T_s", "sets", "certificate", "epsilon", "abstraction"),
}


def validate(data: dict):
    try:
        jsonschema.validate(instance=data, schema=SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc


def digest(data: dict, stage: str) -> str:
    """SHA-256 of the canonical JSON of the sections `stage` depends on."""
    subset = {key: data.get(key) for key in STAGE_SECTIONS[stage]}
    text = json.dumps(subset, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def template_names() -> List[str]:
    return sorted(os.path.splitext(os.path.basename(p))[0] for p in glob.glob(os.path.join(TEMPLATE_DIR, "*.json")))


def load_template(name: str) -> dict:
    path = os.path.join(TEMPLATE_DIR, f"{name}.json")
    if not os.path.exists(path):
        raise ConfigError(f"no bundled scenario {name!r}; available: {template_names()}")
    with open(path, "r") as f:
        return json.load(f)


@dataclass
class Specification:
    """Specification sets after shrinking/expanding by the funnel margin."""
    margin: np.ndarray
    X: Box
    X_a: List[Box]
    X_r: Box
    xhat_domain: Box
    uhat_domain: Box
    target_xhat: Box
    target_uhat: Box
    state_avoid: List[Box]
    input_avoid: List[Box]
    joint_avoid: List[Tuple[Box, Box]]


class ScenarioConfig:
    def __init__(self, data: dict, source: str = "<config>"):
        validate(data)
        self.data = copy.deepcopy(data)
        self.source = source
        self.name = data.get("name", os.path.splitext(os.path.basename(source))[0])
        self.T_s = float(data["T_s"])
        try:
            self.bundle: ModelBundle = resolve_model(data["model"]["name"], data["model"].get("params"))
            sets = data["sets"]
            self.X = Box.from_json(sets["X"])
            self.X_a = [Box.from_json(b) for b in sets["X_a"]]
            self.X_r = Box.from_json(sets["X_r"])
            self.W = Box.from_json(sets["W"])
            self.U_hat = Box.from_json(sets["U_hat"])
            self.dU_hat = Box.from_json(sets["dU_hat"])
            self.W_hat = Box.from_json(sets["W_hat"])
            region = sets.get("initial_region")
            self.initial_region = Box.from_json(region) if region else None
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        self._check_dimensions()
        self.certificate = dict(data.get("certificate", {}))
        self.epsilon = dict(data.get("epsilon", {"source": "certificate"}))
        self.abstraction = dict(data["abstraction"])
        self.simulation = dict(data.get("simulation", {}))
        self.mode = self.abstraction.get("mode", MODES[0])

    def _check_dimensions(self):
        es = self.bundle.error_system
        expected = {
            "X": (self.X, es.n_x),
            "X_r": (self.X_r, es.n_x),
            "W": (self.W, es.n_w),
            "U_hat": (self.U_hat, es.nhat_u),
            "dU_hat": (self.dU_hat, es.nhat_u),
            "W_hat": (self.W_hat, es.nhat_w),
        }
        expected.update({f"X_a[{i}]": (box, es.n_x) for i, box in enumerate(self.X_a)})
        if self.initial_region is not None:
            expected["initial_region"] = (self.initial_region, es.nhat_x)
        for key, (box, dim) in expected.items():
            if box.dim != dim:
                raise ConfigError(f"{key} has dimension {box.dim}, model {self.bundle.name} needs {dim}")
        if not self.U_hat.is_bounded() or not self.dU_hat.is_bounded():
            raise ConfigError("U_hat and dU_hat must be bounded")

    @classmethod
    def from_file(cls, path: str) -> "ScenarioConfig":
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        return cls(data, source=path)

    @classmethod
    def from_template(cls, name: str) -> "ScenarioConfig":
        return cls(load_template(name), source=f"{name}.json")

    def digest(self, stage: str) -> str:
        return digest(self.data, stage)

    def override_epsilon(self, values) -> "ScenarioConfig":
        data = copy.deepcopy(self.data)
        data["epsilon"] = dict(data.get("epsilon", {}), source="fixed", values=[float(v) for v in values])
        return ScenarioConfig(data, self.source)

    # certify stage

    def state_domain(self) -> Box:
        """Abstract states admitted by X, used as the certificate's xhat domain."""
        es = self.bundle.error_system
        xhat, _ = preimage_pi(es.pi, self.X, es.nhat_x, es.nhat_u)
        if xhat is EMPTY:
            raise ConfigError("X has an empty abstract preimage")
        return xhat

    def certificate_domains(self) -> Dict[str, Optional[Box]]:
        return {
            "xhat": self.state_domain(),
            "uhat": self.U_hat,
            "duhat": self.dU_hat,
            "w": self.W,
            "what": self.W_hat,
        }

    def check_settings(self) -> CheckSettings:
        return CheckSettings(**self.certificate.get("checks", {}))

    def candidate_options(self) -> Dict:
        c = self.certificate
        es = self.bundle.error_system
        if "q_weight" not in c or "r_weight" not in c:
            raise ConfigError("certificate generation needs q_weight and r_weight")
        point = c.get("operating_point") or {
            "xhat": self.state_domain().clip_to(Box.cube(-1e6, 1e6, es.nhat_x)).center().tolist(),
            "uhat": self.U_hat.center().tolist(),
        }
        if len(c["q_weight"]) != es.n_x or len(c["r_weight"]) != es.n_u:
            raise ConfigError(f"weights need {es.n_x} state and {es.n_u} input entries")
        E0 = c.get("E0")
        return {
            "operating_point": (point["xhat"], point["uhat"]),
            "q_weight": c["q_weight"],
            "r_weight": c["r_weight"],
            "T_s": self.T_s,
            "domains": self.certificate_domains(),
            "alpha": c.get("alpha", 0.0),
            "gamma_range": tuple(c.get("gamma_range", (1e-4, 1e4))),
            "scan_points": c.get("scan_points", 25),
            "bisection_steps": c.get("bisection_steps", 40),
            "prefer": c.get("prefer", "largest"),
            "accept_inconclusive": c.get("accept_inconclusive", False),
            "E0": Box.from_json(E0) if E0 else None,
            "settings": self.check_settings(),
        }

    def resolve_epsilon(self, certified: Optional[np.ndarray]) -> np.ndarray:
        """
        Epsilon used downstream: the certified hull, or configured values
        with any trailing dimensions taken from the certified hull.
        """
        n = self.bundle.error_system.n_x
        if self.epsilon.get("source", "certificate") == "certificate":
            if certified is None:
                raise ConfigError("epsilon source is the certificate but none was computed")
            return np.asarray(certified, dtype=float)
        values = np.asarray(self.epsilon.get("values", []), dtype=float)
        if values.size > n:
            raise ConfigError(f"epsilon has {values.size} entries, the error state has {n}")
        tail = np.zeros(n - values.size) if certified is None else np.asarray(certified, dtype=float)[values.size:]
        return np.concatenate([values, tail])

    # abstract stage

    def margin(self, eps) -> np.ndarray:
        eps = np.asarray(eps, dtype=float)
        if self.epsilon.get("frame", "error") == "state":
            return self.bundle.error_system.state_hull(eps)
        return eps

    def specification(self, eps) -> Specification:
        es = self.bundle.error_system
        margin = self.margin(eps)
        X = box_shrink(self.X, margin)
        X_r = box_shrink(self.X_r, margin)
        if X is EMPTY:
            raise InfeasibleSpecificationError("specification infeasible at this epsilon: X is empty after shrinking")
        if X_r is EMPTY:
            raise InfeasibleSpecificationError("specification infeasible at this epsilon: the target is empty")
        X_a = [box_expand(b, margin) for b in self.X_a]

        xhat, uhat = preimage_pi(es.pi, X, es.nhat_x, es.nhat_u)
        if xhat is EMPTY:
            raise InfeasibleSpecificationError("shrunk X has an empty abstract preimage")
        if "domain" in self.abstraction:
            xhat = box_intersection(xhat, Box.from_json(self.abstraction["domain"]))
            if xhat is EMPTY:
                raise InfeasibleSpecificationError("abstraction domain does not meet the shrunk X")
        if not xhat.is_bounded():
            raise ConfigError("abstract state domain is unbounded; set abstraction.domain")
        u_domain = box_intersection(self.U_hat, uhat)
        if u_domain is EMPTY:
            raise InfeasibleSpecificationError("no abstract input keeps pi inside the shrunk X")
        target_xhat, target_uhat = preimage_pi(es.pi, X_r, es.nhat_x, es.nhat_u)
        if target_xhat is EMPTY:
            raise InfeasibleSpecificationError("specification infeasible at this epsilon: empty target preimage")
        state_avoid, input_avoid, joint = classify_avoid(es.pi, X_a)
        return Specification(margin, X, X_a, X_r, xhat, u_domain, target_xhat, target_uhat,
                             state_avoid, input_avoid, joint)

    def grid(self, spec: Specification) -> PartitionGrid:
        cells = self.abstraction["cells_per_dim"]
        if len(cells) != spec.xhat_domain.dim:
            raise ConfigError(f"cells_per_dim needs {spec.xhat_domain.dim} entries")
        return PartitionGrid(spec.xhat_domain, cells)

    def input_grid(self, spec: Specification) -> InputGrid:
        values = self.abstraction["inputs_per_dim"]
        if len(values) != spec.uhat_domain.dim:
            raise ConfigError(f"inputs_per_dim needs {spec.uhat_domain.dim} entries")
        return InputGrid(spec.uhat_domain, values, spec.input_avoid)

    def avoid_mask(self, grid: PartitionGrid, spec: Specification) -> np.ndarray:
        return cells_meeting(grid, spec.state_avoid) | cells_outside(grid, spec.xhat_domain)

    def forbidden(self, grid: PartitionGrid, inputs: InputGrid, spec: Specification) -> np.ndarray:
        return forbidden_pairs(grid, inputs, spec.joint_avoid)

    def reach_settings(self) -> ReachSettings:
        return ReachSettings(self.T_s, self.abstraction.get("steps", 50), tuple(self.abstraction.get("inflation", ())))

    def declared_sizes(self) -> Dict[str, int]:
        """Cell and input counts the abstraction declares, without building it."""
        return {
            "cells": int(np.prod(self.abstraction["cells_per_dim"])),
            "inputs": int(np.prod(self.abstraction["inputs_per_dim"])),
        }

    # simulate stage

    def simulation_settings(self) -> SimulationSettings:
        s = self.simulation
        dt = float(s.get("dt", self.T_s / DT_PER_PERIOD))
        if dt > self.T_s / DT_PER_PERIOD * (1.0 + 1e-9):
            raise ConfigError(f"simulation dt={dt} is coarser than T_s/{DT_PER_PERIOD} = {self.T_s / DT_PER_PERIOD}")
        return SimulationSettings(float(s.get("duration", 20 * self.T_s)), dt,
                                  float(s.get("switch_period", 1.0)), bool(s.get("randomize_what", False)))

    def monitor(self) -> SpecMonitor:
        return SpecMonitor(self.X, self.X_a, self.X_r, self.mode)
