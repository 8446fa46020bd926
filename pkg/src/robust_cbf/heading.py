"""Single-integrator tracking velocity, its smooth (half-Sontag) safety
filter, and the resulting safe heading angle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .poisson import GridField, gradient, sample
from .world import Scenario, desired_position

EPS_B = 1e-10
EPS_V = 1e-8


class HeadingUndefinedError(ValueError):
    pass


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    # in-range angles pass through bit-exact
    out = np.where((a > -np.pi) & (a <= np.pi), a, np.pi - np.mod(np.pi - a, 2 * np.pi))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SafeVelocity:
    v_s: np.ndarray
    theta_s: float
    a: float
    b: float
    lam: float


def nominal_velocity(t, point, scenario: Scenario) -> np.ndarray:
    """Proportional tracking velocity K_v * (p_d(t) - p)."""
    return scenario.k_v * (desired_position(t, scenario) - np.asarray(point, dtype=float)[..., :2])


def half_sontag(a, b, alpha_q: float, eps_b: float = EPS_B):
    """lambda(a, b) = (-a + sqrt(a^2 + alpha_q b^2)) / (2b), and 0 where b < eps_b.

    For a > 0 the algebraically equal form alpha_q b / (2 (a + sqrt(...)))
    avoids cancellation.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    root = np.sqrt(a * a + alpha_q * b * b)
    ok = b >= eps_b
    safe_b = np.where(ok, b, 1.0)
    direct = (root - a) / (2 * safe_b)
    denom = np.where(a > 0, a + root, 1.0)
    stable = alpha_q * safe_b / (2 * denom)
    lam = np.where(ok, np.where(a > 0, stable, direct), 0.0)
    return float(lam) if lam.ndim == 0 else lam


def heading_of(v_s) -> np.ndarray:
    """atan2 of a velocity (..., 2), mapped onto (-pi, pi]."""
    v = np.asarray(v_s, dtype=float)
    th = np.arctan2(v[..., 1], v[..., 0])
    return np.where(th == -np.pi, np.pi, th)


def safe_velocity_batch(t, points, field: GridField, scenario: Scenario):
    """Vectorized filter. Returns (v_s, a, b, lam, h0) for points of shape (..., 2)."""
    p = np.asarray(points, dtype=float)[..., :2]
    h0 = sample(field, p)
    grad = gradient(field, p)
    v_p = nominal_velocity(t, p, scenario)
    a = np.sum(grad * v_p, axis=-1) + scenario.alpha_slope * h0
    b = np.sum(grad * grad, axis=-1)
    lam = half_sontag(a, b, scenario.alpha_q)
    v_s = v_p + np.asarray(lam)[..., None] * grad
    return v_s, a, b, lam, h0


def safe_velocity(t, point, field: GridField, scenario: Scenario) -> SafeVelocity:
    v_s, a, b, lam, _ = safe_velocity_batch(t, np.asarray(point, dtype=float)[:2], field, scenario)
    speed = float(np.hypot(*v_s))
    theta = float(heading_of(v_s)) if speed > EPS_V else float("nan")
    return SafeVelocity(v_s=v_s, theta_s=theta, a=float(a), b=float(b), lam=float(lam))


def safe_heading(safe_vel, eps_v: float = EPS_V) -> float:
    """Heading of the safe velocity; raises when the velocity is (nearly) zero."""
    v = safe_vel.v_s if isinstance(safe_vel, SafeVelocity) else np.asarray(safe_vel, dtype=float)
    if np.hypot(v[0], v[1]) <= eps_v:
        raise HeadingUndefinedError("heading undefined: safe velocity is zero")
    return float(heading_of(v))


def safe_nominal_input(v_s, theta_s, theta, k_omega: float) -> np.ndarray:
    """Nominal (v, omega) that keeps the safe speed and steers toward theta_s."""
    v_s = np.asarray(v_s, dtype=float)
    v = np.hypot(v_s[..., 0], v_s[..., 1])
    w = k_omega * wrap_angle(np.asarray(theta_s) - np.asarray(theta))
    return np.stack([v, w], axis=-1)
