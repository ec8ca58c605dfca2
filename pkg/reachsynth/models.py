"""
Built-in models and plugin resolution.

A model bundles the concrete vector field, its continuous abstraction and
the tracking-error system that ties them together.
"""
import importlib
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from reachsynth import ship
from reachsynth.errors import ConfigError
from reachsynth.funnel import ErrorSystem
from reachsynth.interval_core import AffineMap
from reachsynth.intervals import IntervalArray, namespace_for
from reachsynth.reachability import VectorField

logger = logging.getLogger(__name__)


@dataclass
class ModelBundle:
    name: str
    concrete: VectorField
    abstract: VectorField
    error_system: ErrorSystem

    @property
    def pi(self) -> AffineMap:
        return self.error_system.pi


def ship_model(params: Optional[Dict] = None) -> ModelBundle:
    params = params or {}
    p = ship.ship_params(params.get("M"), params.get("D"), params.get("coriolis_gain"))
    return ModelBundle("ship", ship.ship_field(p), ship.kinematics_field(), ship.ship_error_system(p))


def double_integrator(params: Optional[Dict] = None) -> ModelBundle:
    """
    Position p and velocity v per axis with force disturbance w.

    Abstraction dp_hat/dt = u_hat + w_hat, the abstract input being the
    velocity reference; pi(p_hat, u_hat) = [p_hat; u_hat].
    """
    dim = int((params or {}).get("dim", 2))
    if dim < 1:
        raise ConfigError(f"double integrator needs at least one axis, got {dim}")

    def concrete(x, u, w):
        ops = namespace_for(x, u, w)
        return ops.concatenate([x[..., dim:], u + w])

    def abstract(xhat, uhat, what):
        return uhat + what + 0.0 * xhat

    def jacobian(xhat: IntervalArray, uhat, what: IntervalArray):
        batch = xhat.shape[:-1]
        return (IntervalArray(np.zeros(batch + (dim, dim))),
                IntervalArray(np.broadcast_to(np.eye(dim), batch + (dim, dim))))

    def f_e(e, xhat, uhat, w, what):
        ops = namespace_for(e, w, what)
        return ops.concatenate([e[..., dim:] - what, w])

    g = np.vstack([np.zeros((dim, dim)), np.eye(dim)])

    def g_e(e, xhat, uhat, w):
        return g

    es = ErrorSystem(2 * dim, dim, dim, dim, dim, dim, f_e, g_e,
                     pi=AffineMap.stacking(dim, dim), name="double integrator")
    return ModelBundle("double_integrator",
                       VectorField(2 * dim, dim, dim, concrete, name="double integrator"),
                       VectorField(dim, dim, dim, abstract, jacobian=jacobian, name="single integrator"),
                       es)


BUILTIN_MODELS: Dict[str, Callable[[Optional[Dict]], ModelBundle]] = {
    "ship": ship_model,
    "double_integrator": double_integrator,
}


def resolve_model(spec: str, params: Optional[Dict] = None) -> ModelBundle:
    """Build a model from a built-in name or a "package.module:factory" plugin spec."""
    if spec in BUILTIN_MODELS:
        return BUILTIN_MODELS[spec](params)
    if ":" not in spec:
        raise ConfigError(f"unknown model {spec!r}; built-ins are {sorted(BUILTIN_MODELS)}")
    module_name, _, attr = spec.partition(":")
    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load model plugin {spec!r}: {exc}") from exc
    logger.info(f"Loaded model plugin {spec}")
    bundle = factory(params)
    if not isinstance(bundle, ModelBundle):
        raise ConfigError(f"model plugin {spec!r} did not return a ModelBundle")
    return bundle
