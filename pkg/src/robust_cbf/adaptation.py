"""Online selection of the robustness parameters (gamma1, gamma2).

At the current estimate we draw N perturbed states from the error box, run
the full safe pipeline (safe-projected nominal + R-CBF-QP) at each of them
for a candidate gamma, and take the largest input deviation from the
unperturbed input as sigma_hat. The candidate minimizing the set-inflation
measure max(sigma_hat - gamma1, 0) / (2 gamma2) over a mesh wins; ties go to
the smallest gamma1, then the smallest gamma2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .barrier import derivative_clearance, eval_derivatives_batch
from .heading import safe_nominal_input
from .poisson import GridField
from .qp import FilterFamily, RobustnessParams
from .world import Scenario

log = logging.getLogger(__name__)

COARSE_POINTS = 20
_CHUNK_ELEMS = 1 << 17


@dataclass(frozen=True)
class AdaptationConfig:
    n_samples: int = 100
    gamma_lo: float = 1e-4
    gamma_hi: float = 4.0
    n1: int = 400
    n2: int = 400
    spacing: str = "log"
    coarse_first: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.gamma_lo > 0:
            raise ValueError("gamma_lo must be > 0")
        if self.gamma_hi < self.gamma_lo:
            raise ValueError("gamma_hi must be >= gamma_lo")
        if self.n1 < 2 or self.n2 < 2:
            raise ValueError("mesh needs at least 2 points per axis")
        if self.spacing not in ("log", "linear"):
            raise ValueError("spacing must be 'log' or 'linear'")

    @classmethod
    def from_scenario(cls, s: Scenario, **overrides) -> "AdaptationConfig":
        kw = dict(n_samples=s.n_samples, gamma_lo=s.gamma_bounds[0], gamma_hi=s.gamma_bounds[1],
                  n1=s.gamma_grid[0], n2=s.gamma_grid[1], spacing=s.gamma_spacing,
                  coarse_first=s.coarse_first, seed=s.seed)
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class AdaptationResult:
    gamma: RobustnessParams
    sigma_hat_at_opt: float
    objective: float
    evaluations: int
    skipped: int = 0


def sample_perturbations(x_hat, error_box, n: int, seed=None) -> np.ndarray:
    """N states drawn uniformly from x_hat + box; zero half-widths stay exact."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    half = np.asarray(error_box, dtype=float)
    unit = rng.uniform(-1.0, 1.0, size=(n, 3))
    return np.asarray(x_hat, dtype=float) + unit * half


def inflation_objective(sigma_hat, gamma1, gamma2=None):
    """max(sigma_hat - gamma1, 0) / (2 gamma2). Accepts RobustnessParams or two arrays."""
    if isinstance(gamma1, RobustnessParams):
        gamma1, gamma2 = gamma1.gamma1, gamma1.gamma2
    g2 = np.asarray(gamma2, dtype=float)
    if np.any(g2 <= 0):
        raise ZeroDivisionError("degenerate denominator: gamma2 must be > 0")
    out = np.maximum(np.asarray(sigma_hat, dtype=float) - gamma1, 0.0) / (2.0 * g2)
    return float(out) if np.ndim(out) == 0 else out


def sigma_hat(t, x_hat, samples, gamma: RobustnessParams, controller: Callable) -> float:
    """max_i ||k(t, x_i) - k(t, x_hat)|| for a controller k(t, states, gamma) -> (m, 2).

    Rows the controller cannot evaluate come back as NaN and are skipped.
    """
    states = np.vstack([np.asarray(x_hat, dtype=float)[None, :], np.asarray(samples, dtype=float)])
    u = np.asarray(controller(t, states, gamma), dtype=float)
    if not np.all(np.isfinite(u[0])):
        raise ValueError("controller undefined at the estimate itself")
    d = np.linalg.norm(u[1:] - u[0], axis=-1)
    ok = np.isfinite(d)
    if not ok.all():
        log.warning("sigma_hat: skipped %d samples outside the field", int((~ok).sum()))
    return float(d[ok].max()) if ok.any() else 0.0


class SafePipeline:
    """Barrier terms of the safe controller at a batch of states, precomputed
    once so that many gamma candidates only re-solve the QP."""

    def __init__(self, t, states, field: GridField, scenario: Scenario, theta_s_fallback=None):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        self.states = states
        self.valid = field.contains(states[:, :2], margin=derivative_clearance(field))
        self.valid = np.atleast_1d(self.valid)
        if not self.valid[0]:
            raise ValueError("estimate is outside the field")
        sub = states[self.valid]
        fb = None
        if theta_s_fallback is not None:
            fb = np.broadcast_to(theta_s_fallback, (states.shape[0],))[self.valid]
        ev = eval_derivatives_batch(t, sub, field, scenario, fb)
        self.eval = ev
        self.k_nom = safe_nominal_input(ev.v_s, ev.theta_s, sub[:, 2], scenario.k_omega)
        self.row = ev.row
        self.base = -ev.L_f - ev.dh_dt - scenario.alpha_slope * ev.h
        self.norm = np.linalg.norm(self.row, axis=-1)
        self.family = FilterFamily(self.k_nom, self.row, scenario.input_box.lo,
                                   scenario.input_box.hi)

    @property
    def skipped(self) -> int:
        return int((~self.valid).sum())

    def inputs(self, gamma1, gamma2):
        """Filtered inputs for gamma arrays of shape (G,). Returns (G, m, 2) over valid states."""
        g1 = np.asarray(gamma1, dtype=float)[:, None]
        g2 = np.asarray(gamma2, dtype=float)[:, None]
        rhs = self.base + g1 * self.norm + g2 * g2 * (self.norm * self.norm)
        return self.family.solve(rhs)

    def sigma(self, gamma1, gamma2) -> np.ndarray:
        g1 = np.atleast_1d(np.asarray(gamma1, dtype=float))
        g2 = np.atleast_1d(np.asarray(gamma2, dtype=float))
        m = self.states[self.valid].shape[0]
        out = np.empty(g1.shape[0])
        step = max(1, _CHUNK_ELEMS // max(m, 1))
        for i in range(0, g1.shape[0], step):
            u = self.inputs(g1[i:i + step], g2[i:i + step])
            d = u[:, 1:, :] - u[:, :1, :]
            out[i:i + step] = np.sqrt((d * d).sum(-1)).max(-1) if m > 1 else 0.0
        return out

    def controller(self, t, states, gamma: RobustnessParams) -> np.ndarray:
        """k(t, x, gamma) at this pipeline's states (NaN rows for skipped ones).

        Only valid for the exact states the pipeline was built on.
        """
        if states.shape != self.states.shape or not np.array_equal(states, self.states):
            raise ValueError("pipeline was built for different states")
        out = np.full(states.shape[:1] + (2,), np.nan)
        out[self.valid] = self.inputs([gamma.gamma1], [gamma.gamma2])[0]
        return out


def gamma_mesh(lo: float, hi: float, n: int, spacing: str) -> np.ndarray:
    if spacing == "log":
        return np.geomspace(lo, hi, n)
    return np.linspace(lo, hi, n)


def _best(g1, g2, sig):
    obj = inflation_objective(sig, g1, g2)
    i = np.lexsort((g2, g1, obj))[0]
    return i, obj


def search_gamma(sigma_fn: Callable, cfg: AdaptationConfig):
    """Grid search of the inflation objective.

    ``sigma_fn(g1, g2)`` maps candidate arrays (G,) to sigma_hat values (G,).
    Returns (gamma1, gamma2, sigma_hat, objective, n_evaluations).
    """
    if not cfg.coarse_first:
        a1 = gamma_mesh(cfg.gamma_lo, cfg.gamma_hi, cfg.n1, cfg.spacing)
        a2 = gamma_mesh(cfg.gamma_lo, cfg.gamma_hi, cfg.n2, cfg.spacing)
        G1, G2 = (m.ravel() for m in np.meshgrid(a1, a2, indexing="ij"))
        sig = np.asarray(sigma_fn(G1, G2), dtype=float)
        i, obj = _best(G1, G2, sig)
        return float(G1[i]), float(G2[i]), float(sig[i]), float(obj[i]), G1.size

    nc = COARSE_POINTS
    c1 = gamma_mesh(cfg.gamma_lo, cfg.gamma_hi, nc, cfg.spacing)
    c2 = gamma_mesh(cfg.gamma_lo, cfg.gamma_hi, nc, cfg.spacing)
    C1, C2 = np.meshgrid(c1, c2, indexing="ij")
    sig_c = np.asarray(sigma_fn(C1.ravel(), C2.ravel()), dtype=float)
    i, _ = _best(C1.ravel(), C2.ravel(), sig_c)
    a, b = np.unravel_index(i, C1.shape)
    r1 = gamma_mesh(c1[max(a - 1, 0)], c1[min(a + 1, nc - 1)], nc, cfg.spacing)
    r2 = gamma_mesh(c2[max(b - 1, 0)], c2[min(b + 1, nc - 1)], nc, cfg.spacing)
    R1, R2 = (m.ravel() for m in np.meshgrid(r1, r2, indexing="ij"))
    # memoize: refine points that coincide with coarse points reuse their sigma
    known = {(x, y): s for x, y, s in zip(C1.ravel(), C2.ravel(), sig_c)}
    fresh = np.array([(x, y) not in known for x, y in zip(R1, R2)])
    sig_r = np.empty(R1.size)
    if fresh.any():
        sig_r[fresh] = sigma_fn(R1[fresh], R2[fresh])
    for k in np.flatnonzero(~fresh):
        sig_r[k] = known[(R1[k], R2[k])]
    G1 = np.concatenate([C1.ravel(), R1])
    G2 = np.concatenate([C2.ravel(), R2])
    sig = np.concatenate([sig_c, sig_r])
    j, obj = _best(G1, G2, sig)
    return float(G1[j]), float(G2[j]), float(sig[j]), float(obj[j]), int(sig_c.size + fresh.sum())


def adapt_with_pipeline(pipe: SafePipeline, cfg: AdaptationConfig) -> AdaptationResult:
    g1, g2, sig, obj, n = search_gamma(pipe.sigma, cfg)
    return AdaptationResult(gamma=RobustnessParams(g1, g2), sigma_hat_at_opt=sig,
                            objective=obj, evaluations=n, skipped=pipe.skipped)


def adapt_gamma(t, x_hat, scenario: Scenario, field: GridField, seed=None,
                cfg: AdaptationConfig | None = None, theta_s_fallback=None) -> AdaptationResult:
    """Sample the error box around x_hat and grid-search (gamma1, gamma2)."""
    cfg = cfg or AdaptationConfig.from_scenario(scenario)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(
        cfg.seed if seed is None else seed)
    samples = sample_perturbations(x_hat, scenario.error_box, cfg.n_samples, rng)
    states = np.vstack([np.asarray(x_hat, dtype=float)[None, :], samples])
    pipe = SafePipeline(t, states, field, scenario, theta_s_fallback)
    return adapt_with_pipeline(pipe, cfg)
