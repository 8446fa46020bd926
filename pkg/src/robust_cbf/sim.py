"""Closed-loop unicycle simulation with measurement error and the controller
variants compared in the experiments (vanilla h0, non-robust, fixed gamma,
tunable gamma, adaptive gamma)."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .adaptation import AdaptationConfig, SafePipeline, adapt_with_pipeline, sample_perturbations
from .barrier import derivative_clearance, eval_derivatives_batch, h0_derivatives_batch, theta_s_batch
from .heading import safe_nominal_input, wrap_angle
from .poisson import GridField, sample, solve_poisson
from .qp import RobustnessParams, constraint_terms, solve_filter_batch
from .world import Scenario, desired_position, rasterize_domain

VARIANTS = ("vanilla_h0", "nonrobust", "fixed_gamma", "tunable", "adaptive")

LOG_COLUMNS = (
    "t", "x", "y", "theta", "x_hat", "y_hat", "theta_hat",
    "v_nom", "omega_nom", "v", "omega",
    "h_true", "h_est", "h0_true", "gamma1", "gamma2", "feasible", "evaluations",
)
TIMING_COLUMN = "wall_us"


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not all(np.isfinite([self.x, self.y, self.theta])):
            raise ValueError("state must be finite")
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    @property
    def array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def of(cls, a) -> "VehicleState":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class ControlInput:
    v: float
    omega: float

    @property
    def array(self) -> np.ndarray:
        return np.array([self.v, self.omega])


@dataclass(frozen=True)
class ControllerVariant:
    kind: str
    gamma1: float | None = None
    gamma2: float | None = None
    eta1: float | None = None
    eta2: float | None = None

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}; choose from {', '.join(VARIANTS)}")
        need_gamma = self.kind in ("fixed_gamma", "tunable")
        need_eta = self.kind == "tunable"
        if need_gamma != (self.gamma1 is not None and self.gamma2 is not None):
            raise ValueError(f"variant {self.kind} {'needs' if need_gamma else 'takes no'} gamma")
        if need_eta != (self.eta1 is not None and self.eta2 is not None):
            raise ValueError(f"variant {self.kind} {'needs' if need_eta else 'takes no'} eta")

    @classmethod
    def from_name(cls, name: str, scenario: Scenario) -> "ControllerVariant":
        g1, g2 = scenario.fixed_gamma
        e1, e2 = scenario.tunable_etas
        if name == "fixed_gamma":
            return cls(name, gamma1=g1, gamma2=g2)
        if name == "tunable":
            return cls(name, gamma1=g1, gamma2=g2, eta1=e1, eta2=e2)
        return cls(name)

    def gamma_at(self, h: float) -> RobustnessParams:
        """Robustness parameters for the non-adaptive variants."""
        if self.kind in ("vanilla_h0", "nonrobust"):
            return RobustnessParams(0.0, 0.0)
        if self.kind == "fixed_gamma":
            return RobustnessParams(self.gamma1, self.gamma2)
        if self.kind == "tunable":
            hp = max(h, 0.0)
            # the decay multiplies the gamma2^2 term, hence the half exponent
            return RobustnessParams(self.gamma1 * np.exp(-self.eta1 * hp),
                                    self.gamma2 * np.exp(-0.5 * self.eta2 * hp))
        raise ValueError("adaptive gamma is computed online")


def reference(t, scenario: Scenario, state=None):
    """(x_d, y_d, theta_d); theta_d points from the state to the reference (0 without a state)."""
    xd, yd = desired_position(t, scenario)
    if state is None:
        return float(xd), float(yd), 0.0
    st = np.asarray(state, dtype=float)
    return float(xd), float(yd), float(np.arctan2(yd - st[1], xd - st[0]))


def baseline_controller(t, estimate, scenario: Scenario) -> ControlInput:
    st = np.asarray(estimate, dtype=float)
    xd, yd, thd = reference(t, scenario, st)
    v = scenario.k_v * float(np.hypot(xd - st[0], yd - st[1]))
    return ControlInput(v, scenario.k_omega * float(wrap_angle(thd - st[2])))


def safe_nominal(t, estimate, field: GridField, scenario: Scenario, theta_s_fallback=None) -> ControlInput:
    st = np.asarray(estimate, dtype=float)
    fb = st[2] if theta_s_fallback is None else theta_s_fallback
    theta_s, v_s, _ = theta_s_batch(t, st[:2], field, scenario, fb)
    u = safe_nominal_input(v_s, theta_s, st[2], scenario.k_omega)
    return ControlInput(float(u[0]), float(u[1]))


def _rhs(state, u):
    th = state[..., 2]
    return np.stack([u[0] * np.cos(th), u[0] * np.sin(th), np.full_like(th, u[1])], axis=-1)


def step_dynamics(state, u, dt: float):
    """One classical RK4 step of the unicycle with zero-order-hold input."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    s = state.array if isinstance(state, VehicleState) else np.asarray(state, dtype=float)
    uu = u.array if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    k1 = _rhs(s, uu)
    k2 = _rhs(s + 0.5 * dt * k1, uu)
    k3 = _rhs(s + 0.5 * dt * k2, uu)
    k4 = _rhs(s + dt * k3, uu)
    out = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    out[2] = wrap_angle(out[2])
    return VehicleState.of(out) if isinstance(state, VehicleState) else out


def measure(state, error_box, rng: np.random.Generator):
    """Estimate = state - e, e uniform in the error box."""
    s = state.array if isinstance(state, VehicleState) else np.asarray(state, dtype=float)
    e = rng.uniform(-1.0, 1.0, size=3) * np.asarray(error_box, dtype=float)
    out = s - e
    out[2] = wrap_angle(out[2])
    return VehicleState.of(out) if isinstance(state, VehicleState) else out


@dataclass
class TrajectoryLog:
    data: dict = dc_field(default_factory=dict)
    status: str = "completed"
    variant: str = ""

    def __len__(self):
        return len(self.data.get("t", ()))

    def __getitem__(self, key) -> np.ndarray:
        return self.data[key]

    @property
    def true_states(self) -> np.ndarray:
        return np.stack([self.data["x"], self.data["y"], self.data["theta"]], axis=-1)

    @property
    def inputs(self) -> np.ndarray:
        return np.stack([self.data["v"], self.data["omega"]], axis=-1)

    def to_csv(self, path=None, timing: bool = False) -> str:
        cols = list(LOG_COLUMNS) + ([TIMING_COLUMN] if timing and TIMING_COLUMN in self.data else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for i in range(len(self)):
            row = []
            for c in cols:
                v = self.data[c][i]
                row.append(str(int(v)) if c in ("feasible", "evaluations") else f"{float(v):.17g}")
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "TrajectoryLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty log")
        header = rows[0]
        missing = [c for c in LOG_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        arr = np.array(rows[1:], dtype=float).reshape(-1, len(header))
        return cls(data={c: arr[:, i] for i, c in enumerate(header)})


class _Recorder:
    def __init__(self, n):
        self.cols = {c: np.full(n, np.nan) for c in LOG_COLUMNS + (TIMING_COLUMN,)}
        self.k = 0

    def add(self, **kw):
        for c, v in kw.items():
            self.cols[c][self.k] = v
        self.k += 1

    def finish(self, status, variant) -> TrajectoryLog:
        return TrajectoryLog({c: v[: self.k].copy() for c, v in self.cols.items()}, status, variant)


def run_simulation(scenario: Scenario, variant, field: GridField | None = None,
                   adapt_config: AdaptationConfig | None = None) -> TrajectoryLog:
    """Simulate one run; the log has one record per control step."""
    if isinstance(variant, str):
        variant = ControllerVariant.from_name(variant, scenario)
    if field is None:
        field = solve_poisson(rasterize_domain(scenario))
    cfg = adapt_config or AdaptationConfig.from_scenario(scenario)
    meas_seq, adapt_seq = np.random.SeedSequence(scenario.seed).spawn(2)
    meas_rng = np.random.default_rng(meas_seq)
    adapt_rng = np.random.default_rng(adapt_seq)
    box = np.asarray(scenario.error_box, dtype=float)
    frozen_e = meas_rng.uniform(-1.0, 1.0, size=3) * box if scenario.noise_mode == "frozen" else None
    lo, hi = scenario.input_box.lo, scenario.input_box.hi
    clearance = derivative_clearance(field)
    n = scenario.n_steps
    dt = scenario.dt
    rec = _Recorder(n)
    x = np.array(scenario.x0, dtype=float)
    x[2] = wrap_angle(x[2])
    theta_s_prev = x[2]
    theta_s_true_prev = x[2]
    gamma = RobustnessParams(cfg.gamma_lo, cfg.gamma_lo)
    evals = 0
    status = "completed"

    for k in range(n):
        t = k * dt
        t0 = time.perf_counter()
        if frozen_e is not None:
            xh = x - frozen_e
            xh[2] = wrap_angle(xh[2])
        else:
            xh = measure(x, box, meas_rng)
        if not (field.contains(xh[:2], margin=clearance) and field.contains(x[:2], margin=clearance)):
            status = "left world"
            break

        if variant.kind == "vanilla_h0":
            u_nom = baseline_controller(t, xh, scenario).array
            ev = h0_derivatives_batch(xh[None], field).item(0)
            gamma = RobustnessParams(0.0, 0.0)
            evals = 0
        elif variant.kind == "adaptive":
            if k % scenario.adapt_every == 0:
                samples = sample_perturbations(xh, box, cfg.n_samples, adapt_rng)
                pipe = SafePipeline(t, np.vstack([xh[None], samples]), field, scenario, theta_s_prev)
                res = adapt_with_pipeline(pipe, cfg)
                gamma, evals = res.gamma, res.evaluations
                ev = pipe.eval.item(0)
            else:
                ev = eval_derivatives_batch(t, xh[None], field, scenario, theta_s_prev).item(0)
                evals = 0
            u_nom = safe_nominal_input(ev.v_s, ev.theta_s, xh[2], scenario.k_omega)
        else:
            ev = eval_derivatives_batch(t, xh[None], field, scenario, theta_s_prev).item(0)
            u_nom = safe_nominal_input(ev.v_s, ev.theta_s, xh[2], scenario.k_omega)
            gamma = variant.gamma_at(ev.h)
            evals = 0
        if variant.kind != "vanilla_h0":
            theta_s_prev = ev.theta_s

        row, rhs = constraint_terms(ev, gamma, scenario.alpha_slope)
        u, _, feasible = solve_filter_batch(u_nom, row, rhs, lo, hi)
        wall = (time.perf_counter() - t0) * 1e6

        h0_true = float(sample(field, x[:2]))
        if variant.kind == "vanilla_h0":
            h_true = h0_true
        else:
            th_true, _, _ = theta_s_batch(t, x[:2], field, scenario, theta_s_true_prev)
            theta_s_true_prev = float(th_true)
            h_true = h0_true - (1.0 - np.cos(wrap_angle(x[2] - th_true))) / scenario.mu

        rec.add(t=t, x=x[0], y=x[1], theta=x[2], x_hat=xh[0], y_hat=xh[1], theta_hat=xh[2],
                v_nom=u_nom[0], omega_nom=u_nom[1], v=u[0], omega=u[1],
                h_true=h_true, h_est=ev.h, h0_true=h0_true,
                gamma1=gamma.gamma1, gamma2=gamma.gamma2, feasible=float(feasible),
                evaluations=evals, wall_us=wall)
        x = step_dynamics(x, u, dt)

    return rec.finish(status, variant.kind)
