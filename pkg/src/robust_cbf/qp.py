"""Exact two-input R-CBF-QP safety filter.

    minimize ||u - k_nom||^2  s.t.  row . u >= rhs,  lo <= u <= hi

With one halfspace and a box the minimizer is found in closed form: if the
box projection of k_nom satisfies the constraint it is optimal; otherwise the
constraint is active and the answer is the point of the segment
{row . u = rhs} inside the box that is closest to k_nom (the foot of the
perpendicular from k_nom, clamped to the segment ends). An empty segment
means the problem is infeasible and the box vertex maximizing row . u is
returned instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import InputBox

_TINY = 1e-300


@dataclass(frozen=True)
class RobustnessParams:
    gamma1: float = 0.0
    gamma2: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.gamma1) and np.isfinite(self.gamma2)):
            raise ValueError("robustness parameters must be finite")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("robustness parameters must be >= 0")


@dataclass(frozen=True)
class FilterResult:
    u: np.ndarray
    active: bool
    feasible: bool
    constraint_residual: float


def robust_margin(row, gamma1, gamma2):
    """gamma1 ||L_g h|| + gamma2^2 ||L_g h||^2 (broadcasts)."""
    n = np.linalg.norm(np.asarray(row, dtype=float), axis=-1)
    return gamma1 * n + gamma2**2 * n**2


def constraint_terms(ev, params: RobustnessParams, alpha_slope: float):
    """Row and right-hand side of the linear constraint row . u >= rhs."""
    row = ev.row
    rhs = (-np.asarray(ev.L_f) - np.asarray(ev.dh_dt) - alpha_slope * np.asarray(ev.h)
           + robust_margin(row, params.gamma1, params.gamma2))
    return row, (float(rhs) if np.ndim(rhs) == 0 else rhs)


def solve_filter_batch(k_nom, row, rhs, lo, hi):
    """Vectorized exact solve. Shapes: k_nom, row (..., 2); rhs (...).

    Returns (u, active, feasible).
    """
    k = np.asarray(k_nom, dtype=float)
    r = np.asarray(row, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    k, r = np.broadcast_arrays(k, r)
    shape = np.broadcast_shapes(k.shape[:-1], rhs.shape)
    k = np.broadcast_to(k, shape + (2,))
    r = np.broadcast_to(r, shape + (2,))
    rhs = np.broadcast_to(rhs, shape)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    c = np.clip(k, lo, hi)
    rc = r[..., 0] * c[..., 0] + r[..., 1] * c[..., 1]
    inactive = rc >= rhs

    n2 = r[..., 0] ** 2 + r[..., 1] ** 2
    nz = n2 > _TINY
    n2s = np.where(nz, n2, 1.0)
    rk = r[..., 0] * k[..., 0] + r[..., 1] * k[..., 1]
    step = (rhs - rk) / n2s
    p0 = k + step[..., None] * r
    d = np.stack([-r[..., 1], r[..., 0]], axis=-1)

    # feasible parameter interval of p0 + s d inside the box
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ta = (lo - p0) / d
        tb = (hi - p0) / d
    zero_d = d == 0.0
    inside = (p0 >= lo) & (p0 <= hi)
    s_min = np.where(zero_d, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    s_max = np.where(zero_d, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    s_lo = s_min.max(axis=-1)
    s_hi = s_max.min(axis=-1)
    # tolerate roundoff when the segment degenerates to a box corner
    scale = np.abs(p0).max(axis=-1) / np.sqrt(n2s) + 1.0
    hit = nz & (s_lo <= s_hi + 1e-12 * scale)
    s_star = np.clip(0.0, s_lo, np.maximum(s_lo, s_hi))
    s_star = np.where(np.isfinite(s_star), s_star, 0.0)
    on_line = np.clip(p0 + s_star[..., None] * d, lo, hi)

    vertex = np.where(r > 0, hi, np.where(r < 0, lo, c))

    u = np.where(inactive[..., None], c, np.where(hit[..., None], on_line, vertex))
    feasible = inactive | hit
    active = ~inactive
    return u, active, feasible


def solve_filter(k_nom, row, rhs, input_box: InputBox) -> FilterResult:
    u, active, feasible = solve_filter_batch(k_nom, row, rhs, input_box.lo, input_box.hi)
    residual = float(np.dot(np.asarray(row, dtype=float), u) - rhs)
    return FilterResult(u=u, active=bool(active), feasible=bool(feasible),
                        constraint_residual=residual)


class FilterFamily:
    """The filter for fixed (k_nom, row) per state and many right-hand sides.

    Everything that does not depend on rhs is precomputed, so a sweep over
    robustness parameters costs a handful of array operations. States whose
    constraint line is axis-aligned (or whose row vanishes) go through
    ``solve_filter_batch``.
    """

    def __init__(self, k_nom, row, lo, hi):
        k = np.atleast_2d(np.asarray(k_nom, dtype=float))
        r = np.atleast_2d(np.asarray(row, dtype=float))
        self.k, self.r = k, r
        self.lo = lo = np.asarray(lo, dtype=float)
        self.hi = hi = np.asarray(hi, dtype=float)
        self.c = np.clip(k, lo, hi)
        self.rc = (r * self.c).sum(-1)
        self.rk = (r * k).sum(-1)
        n2 = (r * r).sum(-1)
        dx, dy = -r[:, 1], r[:, 0]
        self.regular = (n2 > _TINY) & (dx != 0) & (dy != 0)
        reg = self.regular
        self.inv_n2 = np.where(reg, 1.0 / np.where(reg, n2, 1.0), 0.0)
        sdx = np.where(reg, dx, 1.0)
        sdy = np.where(reg, dy, 1.0)
        self.dx, self.dy = dx, dy
        self.inv_dx, self.inv_dy = 1.0 / sdx, 1.0 / sdy
        # entry/exit bounds along the segment direction for each axis
        self.x_enter = np.where(sdx > 0, lo[0], hi[0])
        self.x_exit = np.where(sdx > 0, hi[0], lo[0])
        self.y_enter = np.where(sdy > 0, lo[1], hi[1])
        self.y_exit = np.where(sdy > 0, hi[1], lo[1])
        self.vertex = np.where(r > 0, hi, np.where(r < 0, lo, self.c))
        self.scale = 1e-12 * ((np.abs(k).max(-1) + np.abs(lo).max() + np.abs(hi).max())
                              * np.sqrt(self.inv_n2) + 1.0)

    def solve(self, rhs) -> np.ndarray:
        """Inputs for rhs of shape (G, m). Returns (G, m, 2)."""
        rhs = np.atleast_2d(np.asarray(rhs, dtype=float))
        tau = (rhs - self.rk) * self.inv_n2
        p0x = self.k[:, 0] + tau * self.r[:, 0]
        p0y = self.k[:, 1] + tau * self.r[:, 1]
        s_lo = np.maximum((self.x_enter - p0x) * self.inv_dx, (self.y_enter - p0y) * self.inv_dy)
        s_hi = np.minimum((self.x_exit - p0x) * self.inv_dx, (self.y_exit - p0y) * self.inv_dy)
        hit = s_lo <= s_hi + self.scale
        s = np.minimum(np.maximum(s_lo, 0.0), np.maximum(s_lo, s_hi))
        ux = np.clip(p0x + s * self.dx, self.lo[0], self.hi[0])
        uy = np.clip(p0y + s * self.dy, self.lo[1], self.hi[1])
        inactive = self.rc >= rhs
        ux = np.where(inactive, self.c[:, 0], np.where(hit, ux, self.vertex[:, 0]))
        uy = np.where(inactive, self.c[:, 1], np.where(hit, uy, self.vertex[:, 1]))
        u = np.stack([ux, uy], axis=-1)
        if not self.regular.all():
            irr = ~self.regular
            u[:, irr], _, _ = solve_filter_batch(self.k[irr], self.r[irr], rhs[:, irr],
                                                  self.lo, self.hi)
        return u
