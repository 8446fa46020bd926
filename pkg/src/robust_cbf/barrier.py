"""Modified barrier h = h0 - (1/mu)(1 - cos(theta - theta_s)) for the unicycle
and the derivatives the robust CBF constraint needs.

Spatial and time partials are central differences of ``eval_h``; the
heading partial is analytic. The spatial step is a small fraction of the
grid spacing: the bilinear field has slope kinks on cell lines, and a step
that straddles them would average slopes from neighbouring cells instead of
returning the local derivative. With the driftless
unicycle, L_f h = 0, L_gv h = dh/dx cos(theta) + dh/dy sin(theta) and
L_gw h = dh/dtheta.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .heading import EPS_V, HeadingUndefinedError, heading_of, safe_velocity_batch, wrap_angle
from .poisson import GridField, OutOfFieldError, gradient, sample
from .world import Scenario

FD_XY_FRACTION = 1e-3  # spatial step, as a fraction of grid spacing
FD_T_FRACTION = 0.1  # time step, as a fraction of dt


@dataclass(frozen=True)
class BarrierEval:
    h: np.ndarray | float
    dh_dx: np.ndarray | float
    dh_dy: np.ndarray | float
    dh_dtheta: np.ndarray | float
    dh_dt: np.ndarray | float
    L_gv: np.ndarray | float
    L_gw: np.ndarray | float
    L_f: np.ndarray | float
    h0: np.ndarray | float = 0.0
    theta_s: np.ndarray | float = 0.0
    v_s: np.ndarray | None = None

    @property
    def row(self) -> np.ndarray:
        return np.stack([np.asarray(self.L_gv, float), np.asarray(self.L_gw, float)], axis=-1)

    def item(self, i: int) -> "BarrierEval":
        """Scalar view of entry i of a batched evaluation."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                out[f.name] = None
            elif f.name == "v_s":
                out[f.name] = np.array(v[i])
            else:
                out[f.name] = float(np.asarray(v)[i])
        return BarrierEval(**out)


def theta_s_batch(t, points, field: GridField, scenario: Scenario, fallback=None):
    """Safe heading at each point; degenerate safe velocities take ``fallback``."""
    v_s, _, _, _, h0 = safe_velocity_batch(t, points, field, scenario)
    theta = heading_of(v_s)
    degenerate = np.hypot(v_s[..., 0], v_s[..., 1]) <= EPS_V
    if np.any(degenerate):
        if fallback is None:
            raise HeadingUndefinedError("heading undefined: safe velocity is zero")
        theta = np.where(degenerate, np.broadcast_to(fallback, theta.shape), theta)
    return theta, v_s, h0


def _h_from(h0, theta, theta_s, mu):
    return h0 - (1.0 - np.cos(wrap_angle(theta - theta_s))) / mu


def eval_h(t, state, field: GridField, scenario: Scenario, theta_s_fallback=None) -> float:
    st = np.asarray(state, dtype=float)
    theta_s, _, h0 = theta_s_batch(t, st[:2], field, scenario, theta_s_fallback)
    return float(_h_from(h0, st[2], theta_s, scenario.mu))


def h_batch(t, states, field: GridField, scenario: Scenario, theta_s_fallback=None):
    st = np.asarray(states, dtype=float)
    theta_s, _, h0 = theta_s_batch(t, st[..., :2], field, scenario, theta_s_fallback)
    return _h_from(h0, st[..., 2], theta_s, scenario.mu)


def derivative_clearance(field: GridField) -> float:
    """Distance from the field edge a state needs for eval_derivatives."""
    return (1.0 + FD_XY_FRACTION) * field.spacing


def eval_derivatives_batch(t, states, field: GridField, scenario: Scenario,
                           theta_s_fallback=None) -> BarrierEval:
    """Barrier value and partials for states of shape (n, 3)."""
    st = np.atleast_2d(np.asarray(states, dtype=float))
    n = st.shape[0]
    p = st[:, :2]
    theta = st[:, 2]
    dxy = FD_XY_FRACTION * field.spacing
    dt_fd = FD_T_FRACTION * scenario.dt
    if not np.all(field.contains(p, margin=derivative_clearance(field) * (1 - 1e-12))):
        raise OutOfFieldError("state too close to the field edge for barrier derivatives")

    ex = np.array([dxy, 0.0])
    ey = np.array([0.0, dxy])
    pts = np.stack([p, p + ex, p - ex, p + ey, p - ey, p, p])  # (7, n, 2)
    t = float(t)
    times = np.array([t, t, t, t, t, t + dt_fd, t - dt_fd])[:, None]
    fb = None if theta_s_fallback is None else np.broadcast_to(theta_s_fallback, (n,))
    theta_s_all, v_s_all, h0_all = theta_s_batch(times, pts, field, scenario, fb)
    h_all = _h_from(h0_all, theta[None, :], theta_s_all, scenario.mu)

    h = h_all[0]
    dh_dx = (h_all[1] - h_all[2]) / (2 * dxy)
    dh_dy = (h_all[3] - h_all[4]) / (2 * dxy)
    dh_dt = (h_all[5] - h_all[6]) / (2 * dt_fd)
    theta_s = theta_s_all[0]
    dh_dtheta = -np.sin(wrap_angle(theta - theta_s)) / scenario.mu
    c, s = np.cos(theta), np.sin(theta)
    return BarrierEval(
        h=h, dh_dx=dh_dx, dh_dy=dh_dy, dh_dtheta=dh_dtheta, dh_dt=dh_dt,
        L_gv=dh_dx * c + dh_dy * s, L_gw=dh_dtheta, L_f=np.zeros(n),
        h0=h0_all[0], theta_s=theta_s, v_s=v_s_all[0],
    )


def eval_derivatives(t, state, field: GridField, scenario: Scenario,
                     theta_s_fallback=None) -> BarrierEval:
    return eval_derivatives_batch(t, np.asarray(state, dtype=float)[None, :], field,
                                  scenario, theta_s_fallback).item(0)


def h0_derivatives_batch(states, field: GridField) -> BarrierEval:
    """The Poisson field used directly as the barrier (no heading term).

    Here omega never enters h-dot: L_gw is identically zero.
    """
    st = np.atleast_2d(np.asarray(states, dtype=float))
    p = st[:, :2]
    h0 = sample(field, p)
    g = gradient(field, p)
    c, s = np.cos(st[:, 2]), np.sin(st[:, 2])
    zeros = np.zeros(st.shape[0])
    return BarrierEval(h=h0, dh_dx=g[:, 0], dh_dy=g[:, 1], dh_dtheta=zeros, dh_dt=zeros,
                       L_gv=g[:, 0] * c + g[:, 1] * s, L_gw=zeros, L_f=zeros, h0=h0,
                       theta_s=np.full(st.shape[0], np.nan), v_s=None)
