"""
Marine vessel docking model.

Concrete model: pose eta = [N; E; psi] and body velocities nu = [u; v; r]
driven by thrust tau, currents v_c and wind forces. Continuous abstraction:
the kinematics eta_hat' = R(psi_hat) nu_hat + v_hat_c, with the abstract
input playing the role of the body velocity.
"""
import functools
import json
import logging
import os
from typing import NamedTuple

import numpy as np
import sympy as sp

from reachsynth.funnel import ErrorSystem, error_layout
from reachsynth.interval_core import AffineMap
from reachsynth.intervals import IntervalArray, namespace_for
from reachsynth.polynomial import PolynomialMap, VariableLayout
from reachsynth.reachability import VectorField

logger = logging.getLogger(__name__)

TEMPLATE_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "templates", "ship.json")


class ShipParams(NamedTuple):
    M: np.ndarray
    D: np.ndarray
    coriolis_gain: np.ndarray
    M_inv: np.ndarray


def ship_params(M=None, D=None, coriolis_gain=None) -> ShipParams:
    """Parameters of the 1:30 platform supply vessel model unless overridden."""
    M = np.array([[87.4, 0.0, 0.0], [0.0, 98.3, 2.48], [0.0, 2.48, 22.2]]) if M is None else np.asarray(M, dtype=float)
    D = np.array([[6.58, 0.0, 0.0], [0.0, 37.7, 2.66], [0.0, 2.66, 19.3]]) if D is None else np.asarray(D, dtype=float)
    if coriolis_gain is None:
        coriolis_gain = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 98.3], [0.0, 0.0, 2.48]])
    coriolis_gain = np.asarray(coriolis_gain, dtype=float)
    if abs(np.linalg.det(M)) < 1e-12:
        raise ValueError("inertia matrix M must be invertible")
    return ShipParams(M, D, coriolis_gain, np.linalg.inv(M))


DEFAULT_PARAMS = ship_params()


def rotation(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    c, s = np.cos(psi), np.sin(psi)
    R = np.zeros(psi.shape + (3, 3))
    R[..., 0, 0] = c
    R[..., 0, 1] = -s
    R[..., 1, 0] = s
    R[..., 1, 1] = c
    R[..., 2, 2] = 1.0
    return R


def _rotate(ops, psi, v, transpose=False):
    c, s = ops.cos(psi), ops.sin(psi)
    if transpose:
        s = -s
    return ops.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1], v[..., 2]])


def _velocity_rate(ops, psi, nu, tau, tau_wind, p: ShipParams):
    """M^-1 (tau + R(psi)' tau_wind - C(nu) nu - D nu); tau may be None."""
    force = _rotate(ops, psi, tau_wind, transpose=True) - nu[..., :1] * ops.matvec(p.coriolis_gain, nu) \
        - ops.matvec(p.D, nu)
    if tau is not None:
        force = force + tau
    return ops.matvec(p.M_inv, force)


def ship_dynamics(x, u, w, p: ShipParams = DEFAULT_PARAMS) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    ops = namespace_for(x, u, w)
    psi, nu = x[..., 2], x[..., 3:]
    eta_dot = _rotate(ops, psi, nu) + w[..., :3]
    nu_dot = _velocity_rate(ops, psi, nu, u, w[..., 3:], p)
    return ops.concatenate([eta_dot, nu_dot])


def ship_kinematics(xhat, uhat, what):
    ops = namespace_for(xhat, uhat, what)
    return _rotate(ops, xhat[..., 2], uhat) + what


def _sin(a):
    return namespace_for(a).sin(a)


def _cos(a):
    return namespace_for(a).cos(a)


@functools.lru_cache(maxsize=None)
def _kinematics_jacobian_functions():
    """Entrywise callables of d/deta and d/dv_c of R(psi) nu + v_c, in (psi, u, v, r)."""
    psi = sp.Symbol("psi", real=True)
    eta = sp.symbols("north east", real=True) + (psi,)
    nu = sp.symbols("u v r", real=True)
    current = sp.symbols("vc0:3", real=True)
    R = sp.Matrix([[sp.cos(psi), -sp.sin(psi), 0], [sp.sin(psi), sp.cos(psi), 0], [0, 0, 1]])
    f = R * sp.Matrix(nu) + sp.Matrix(current)
    modules = [{"sin": _sin, "cos": _cos}, "numpy"]

    def entries(jac: sp.Matrix):
        return [[sp.lambdify((psi,) + nu, jac[i, j], modules=modules) for j in range(jac.cols)]
                for i in range(jac.rows)]

    return entries(f.jacobian(eta)), entries(f.jacobian(current))


def _assemble(ops, functions, args, batch):
    rows = []
    for row in functions:
        items = []
        for fn in row:
            value = fn(*args)
            if not isinstance(value, (IntervalArray, np.ndarray)):
                # constant entry
                value = np.full(batch, float(value))
            items.append(value)
        rows.append(ops.stack(items))
    return ops.stack(rows, axis=-2)


def kinematics_jacobian(xhat: IntervalArray, uhat: np.ndarray, what: IntervalArray):
    """Interval bounds of d/dxhat and d/dwhat of the kinematics over a box."""
    psi = xhat[..., 2]
    uhat = np.asarray(uhat, dtype=float)
    ops = namespace_for(psi)
    batch = np.broadcast_shapes(psi.shape, uhat.shape[:-1])
    args = (psi,) + tuple(uhat[..., k] for k in range(3))
    jx, jw = _kinematics_jacobian_functions()
    return _assemble(ops, jx, args, batch), _assemble(ops, jw, args, batch)


def ship_field(p: ShipParams = DEFAULT_PARAMS) -> VectorField:
    return VectorField(6, 3, 6, lambda x, u, w: ship_dynamics(x, u, w, p), name="ship")


def kinematics_field() -> VectorField:
    return VectorField(3, 3, 3, ship_kinematics, jacobian=kinematics_jacobian, name="ship kinematics")


def heading_transform(xhat) -> np.ndarray:
    """phi(xhat) = diag(R(psi_hat)', I)."""
    xhat = np.asarray(xhat, dtype=float)
    phi = np.zeros(xhat.shape[:-1] + (6, 6))
    phi[..., :3, :3] = np.swapaxes(rotation(xhat[..., 2]), -1, -2)
    phi[..., 3:, 3:] = np.eye(3)
    return phi


def planar_hull(eps) -> np.ndarray:
    """Bound on x - pi(xhat, uhat) in the world frame for a rotated error inside [-eps, eps]."""
    eps = np.asarray(eps, dtype=float)
    hull = eps.copy()
    hull[:2] = np.hypot(eps[0], eps[1])
    return hull


def ship_error_system(p: ShipParams = DEFAULT_PARAMS) -> ErrorSystem:
    """
    Rotated tracking error e = phi(xhat) (x - [xhat; uhat]).

    With nu = e_v + nu_hat and psi = e_3 + psi_hat:
      de_p = -(r_hat + what_3) S e_p + R(e_3) nu - nu_hat + R(psi_hat)' (v_c - what)
      de_v = M^-1 (tau + R(psi)' tau_wind - C(nu) nu - D nu)
    """
    pi = AffineMap.stacking(3, 3)

    def f_e(e, xhat, uhat, w, what):
        ops = namespace_for(e, xhat, uhat, w, what)
        nu = e[..., 3:] + uhat
        yaw_rate = uhat[..., 2] + what[..., 2]
        e_p = e[..., :3]
        turning = ops.stack([yaw_rate * e_p[..., 1], -(yaw_rate * e_p[..., 0]), 0.0 * e_p[..., 2]])
        current = _rotate(ops, xhat[..., 2], w[..., :3] - what, transpose=True)
        d_pose = turning + _rotate(ops, e[..., 2], nu) - uhat + current
        d_vel = _velocity_rate(ops, e[..., 2] + xhat[..., 2], nu, None, w[..., 3:], p)
        return ops.concatenate([d_pose, d_vel])

    g = np.vstack([np.zeros((3, 3)), p.M_inv])

    def g_e(e, xhat, uhat, w):
        return g

    es = ErrorSystem(6, 3, 3, 3, 6, 3, f_e, g_e, pi=pi,
                     state_transform=heading_transform,
                     jump_matrix=np.vstack([np.zeros((3, 3)), np.eye(3)]),
                     feedforward=ship_feedforward(error_layout(6, 3, 3, 6, 3), p),
                     state_hull=planar_hull,
                     name="ship")
    return es


def ship_feedforward(layout: VariableLayout, p: ShipParams = DEFAULT_PARAMS) -> PolynomialMap:
    """D nu + C(nu) nu with nu = e_v + nu_hat, so that e = 0 is an equilibrium for every nu_hat."""
    nu = PolynomialMap.stack([PolynomialMap.variable(layout, "e", 3 + i) + PolynomialMap.variable(layout, "uhat", i)
                              for i in range(3)])
    return nu.matmul(p.D) + nu[0] * nu.matmul(p.coriolis_gain)


def ship_scenario() -> dict:
    """The bundled docking scenario configuration."""
    with open(TEMPLATE_PATH, "r") as f:
        return json.load(f)
