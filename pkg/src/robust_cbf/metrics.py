"""Performance metrics on trajectory logs and the variant comparison table."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .heading import wrap_angle
from .sim import TrajectoryLog
from .world import Scenario, desired_position

DEFAULT_EPS_X = 0.10
OPTIMAL_COLUMNS = ("t", "x", "y", "theta", "v", "omega")

# deadlock signature: position stalls for a window while far from the reference
STALL_DISTANCE = 0.05
STALL_WINDOW = 5.0
STALL_MIN_ERROR = 0.5


@dataclass(frozen=True)
class MetricsReport:
    name: str
    j_t: float
    j_opt: float | None
    min_h: float
    min_h0: float
    deadlocked: bool
    deadlock_time: float | None
    tracking_error: float
    final_x: float
    mean_step_wallclock: float | None
    status: str = "completed"


def _dt(log: TrajectoryLog, scenario: Scenario | None) -> float:
    if scenario is not None:
        return scenario.dt
    t = log["t"]
    if len(t) < 2:
        raise ValueError("cannot infer dt from a log with fewer than 2 records")
    return float(t[1] - t[0])


def tracking_errors(log: TrajectoryLog, scenario: Scenario) -> np.ndarray:
    """Distance from the true position to the reference at each record."""
    pd = desired_position(log["t"], scenario)
    return np.hypot(log["x"] - pd[:, 0], log["y"] - pd[:, 1])


def j_t(log: TrajectoryLog, scenario: Scenario, epsilon_x: float = DEFAULT_EPS_X) -> float:
    """Time spent with positional tracking error >= epsilon_x."""
    if epsilon_x < 0:
        raise ValueError("epsilon_x must be >= 0")
    return _dt(log, scenario) * int(np.count_nonzero(tracking_errors(log, scenario) >= epsilon_x))


def tracking_error_integral(log: TrajectoryLog, scenario: Scenario) -> float:
    return _dt(log, scenario) * float(tracking_errors(log, scenario).sum())


def read_optimal(path) -> np.ndarray:
    """Optimal trajectory CSV with header t,x,y,theta,v,omega. Returns (n, 6)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = [h.strip() for h in rows[0]]
    try:
        idx = [header.index(c) for c in OPTIMAL_COLUMNS]
    except ValueError:
        raise ValueError(f"{path}: header must contain {', '.join(OPTIMAL_COLUMNS)}") from None
    arr = np.array(rows[1:], dtype=float)
    return arr[:, idx]


def j_opt(log: TrajectoryLog, optimal, Q=None, R=None, dt: float | None = None) -> float:
    """Left Riemann sum of the quadratic deviation from an optimal trajectory.

    ``optimal`` is an (n, 6) array or a CSV path; it is linearly interpolated
    onto the log times. Heading differences are wrapped.
    """
    opt = read_optimal(optimal) if not isinstance(optimal, np.ndarray) else np.asarray(optimal, float)
    Q = np.eye(3) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(2) if R is None else np.asarray(R, dtype=float)
    t = log["t"]
    ot = opt[:, 0]
    tol = 1e-9 * max(1.0, abs(ot[-1]))
    if np.any(np.diff(ot) <= 0):
        raise ValueError("optimal trajectory times must be increasing")
    if t[0] < ot[0] - tol or t[-1] > ot[-1] + tol:
        raise ValueError(f"optimal trajectory covers [{ot[0]}, {ot[-1]}] but the log spans "
                         f"[{t[0]}, {t[-1]}]")
    xs = np.stack([np.interp(t, ot, opt[:, i]) for i in (1, 2)], axis=-1)
    th = wrap_angle(np.interp(t, ot, np.unwrap(opt[:, 3])))
    us = np.stack([np.interp(t, ot, opt[:, i]) for i in (4, 5)], axis=-1)
    dx = np.column_stack([log["x"] - xs[:, 0], log["y"] - xs[:, 1], wrap_angle(log["theta"] - th)])
    du = log.inputs - us
    cost = np.einsum("ni,ij,nj->n", dx, Q, dx) + np.einsum("ni,ij,nj->n", du, R, du)
    step = dt if dt is not None else (float(t[1] - t[0]) if len(t) > 1 else 0.0)
    return float(step * cost.sum())


def detect_deadlock(log: TrajectoryLog, scenario: Scenario, stall: float = STALL_DISTANCE,
                    window: float = STALL_WINDOW, min_error: float = STALL_MIN_ERROR):
    """First t* such that over [t*, t* + window] the position stays within
    ``stall`` of its value at t* while the tracking error exceeds ``min_error``.

    Returns (deadlocked, t*).
    """
    dt = _dt(log, scenario)
    w = int(round(window / dt)) + 1
    n = len(log)
    if n < w:
        return False, None
    p = np.column_stack([log["x"], log["y"]])
    far = tracking_errors(log, scenario) > min_error
    pw = np.lib.stride_tricks.sliding_window_view(p, w, axis=0)  # (n-w+1, 2, w)
    moved = np.hypot(pw[:, 0, :] - pw[:, 0, :1], pw[:, 1, :] - pw[:, 1, :1]).max(axis=1)
    far_all = np.lib.stride_tricks.sliding_window_view(far, w).all(axis=1)
    hits = np.flatnonzero((moved < stall) & far_all)
    if hits.size == 0:
        return False, None
    return True, float(log["t"][hits[0]])


def report(log: TrajectoryLog, scenario: Scenario, name: str | None = None, optimal=None,
           epsilon_x: float = DEFAULT_EPS_X, Q=None, R=None) -> MetricsReport:
    dead, t_star = detect_deadlock(log, scenario)
    wall = log.data.get("wall_us")
    mean_wall = float(np.nanmean(wall)) if wall is not None and len(wall) else None
    return MetricsReport(
        name=name or log.variant or "run",
        j_t=j_t(log, scenario, epsilon_x),
        j_opt=None if optimal is None else j_opt(log, optimal, Q, R, scenario.dt),
        min_h=float(np.min(log["h_true"])),
        min_h0=float(np.min(log["h0_true"])),
        deadlocked=dead,
        deadlock_time=t_star,
        tracking_error=tracking_error_integral(log, scenario),
        final_x=float(log["x"][-1]),
        mean_step_wallclock=mean_wall,
        status=log.status,
    )


COMPARE_COLUMNS = ("method", "J_opt", "J_t", "tracking_error", "min_h", "min_h0",
                   "deadlocked", "final_x", "status")


def _num(v) -> str:
    return "--" if v is None else f"{v:.6f}"


def compare(reports) -> str:
    """Method x metric table as CSV, sorted by J_t (then name)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for r in sorted(reports, key=lambda r: (r.j_t, r.name)):
        w.writerow([r.name, _num(r.j_opt), _num(r.j_t), _num(r.tracking_error), _num(r.min_h),
                    _num(r.min_h0), "yes" if r.deadlocked else "no", _num(r.final_x), r.status])
    return buf.getvalue()


def format_report(r: MetricsReport) -> str:
    lines = [
        f"method            {r.name}",
        f"status            {r.status}",
        f"J_t [s]           {_num(r.j_t)}",
        f"J_opt             {_num(r.j_opt)}",
        f"tracking error    {_num(r.tracking_error)}",
        f"min h             {_num(r.min_h)}",
        f"min h0            {_num(r.min_h0)}",
        f"deadlocked        {'yes' if r.deadlocked else 'no'}"
        + ("" if r.deadlock_time is None else f" (from t = {r.deadlock_time:.2f} s)"),
        f"final x [m]       {_num(r.final_x)}",
        f"mean step [us]    {_num(r.mean_step_wallclock)}",
    ]
    return "\n".join(lines) + "\n"
