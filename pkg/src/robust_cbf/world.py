"""Scenario description, component safety functions and domain rasterization.

The safe domain is the intersection of the 0-superlevel sets of the circle
and wall functions; ``min_barrier`` expresses it as a single scalar.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

EXTERIOR = 0
INTERIOR = 1
BOUNDARY = 2


class ScenarioError(ValueError):
    pass


class DegenerateMeshError(ValueError):
    pass


@dataclass(frozen=True)
class RectBounds:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ScenarioError(f"empty rectangle {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class CircleObstacle:
    center: tuple[float, float]
    radius: float  # already inflated by half the robot length

    def __post_init__(self):
        if not self.radius > 0:
            raise ScenarioError(f"obstacle radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class Reference:
    v_ref: float = 0.25
    a_d: float = 1.5
    c_d: float = 1.52
    phi_d: float = 0.0
    y_shift: float = 0.0


@dataclass(frozen=True)
class InputBox:
    v_min: float = -2.0
    v_max: float = 2.0
    w_min: float = -2.0
    w_max: float = 2.0

    def __post_init__(self):
        if not (self.v_min <= self.v_max and self.w_min <= self.w_max):
            raise ScenarioError(f"empty input box {self}")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.v_min, self.w_min])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.v_max, self.w_max])


@dataclass(frozen=True)
class Scenario:
    bounds: RectBounds
    obstacles: tuple[CircleObstacle, ...] = ()
    reference: Reference = field(default_factory=Reference)
    k_v: float = 1.0
    k_omega: float = 2.5
    alpha_slope: float = 3.0
    mu: float = 3.3
    alpha_q: float = 1.0
    error_box: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma_bounds: tuple[float, float] = (1e-4, 4.0)
    gamma_grid: tuple[int, int] = (400, 400)
    gamma_spacing: str = "log"
    n_samples: int = 100
    adapt_every: int = 1
    coarse_first: bool = True
    fixed_gamma: tuple[float, float] = (1.4, 0.3)
    tunable_etas: tuple[float, float] = (2.0, 2.0)
    input_box: InputBox = field(default_factory=InputBox)
    dt: float = 0.02
    duration: float = 34.0
    x0: tuple[float, float, float] = (0.0, -0.35, 0.0)
    seed: int = 0
    noise_mode: str = "iid"
    resolution: float = 0.05
    padding: float = 0.5
    forcing_interior: float = -4.0
    forcing_exterior: float = 4.0
    name: str = "custom"

    def __post_init__(self):
        problems = []
        if self.k_v < 0 or self.k_omega < 0:
            problems.append("gains must be >= 0")
        if not self.alpha_slope > 0:
            problems.append("alpha_slope must be > 0")
        if not self.mu > 0:
            problems.append("mu must be > 0")
        if not self.alpha_q > 0:
            problems.append("alpha_q must be > 0")
        if not 0 < self.gamma_bounds[0] <= self.gamma_bounds[1]:
            problems.append("gamma bounds must satisfy 0 < lo <= hi")
        if min(self.gamma_grid) < 2:
            problems.append("gamma grid needs at least 2 points per axis")
        if self.gamma_spacing not in ("log", "linear"):
            problems.append("gamma_spacing must be 'log' or 'linear'")
        if not self.dt > 0:
            problems.append("dt must be > 0")
        if not self.duration > 0:
            problems.append("duration must be > 0")
        if self.n_samples < 1:
            problems.append("n_samples must be >= 1")
        if self.adapt_every < 1:
            problems.append("adapt_every must be >= 1")
        if any(w < 0 for w in self.error_box):
            problems.append("error box half-widths must be >= 0")
        if self.noise_mode not in ("iid", "frozen"):
            problems.append("noise_mode must be 'iid' or 'frozen'")
        if not self.resolution > 0:
            problems.append("resolution must be > 0")
        if not (self.forcing_interior < 0 < self.forcing_exterior):
            problems.append("forcing must be negative inside and positive outside")
        if problems:
            raise ScenarioError("; ".join(problems))

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# safety functions


def component_barriers(scenario: Scenario, point) -> np.ndarray:
    """Circle functions first (one per obstacle), then the four walls.

    ``point`` may carry leading batch dimensions; the component axis is last.
    """
    p = np.asarray(point, dtype=float)
    x, y = p[..., 0], p[..., 1]
    b = scenario.bounds
    vals = [np.hypot(x - o.center[0], y - o.center[1]) - o.radius for o in scenario.obstacles]
    vals += [x - b.x_min, b.x_max - x, y - b.y_min, b.y_max - y]
    return np.stack(vals, axis=-1)


def min_barrier(scenario: Scenario, point) -> np.ndarray | float:
    out = component_barriers(scenario, point).min(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def desired_position(t, scenario: Scenario) -> np.ndarray:
    """Sinusoidal reference: x_d = v_ref t, y_d = a_d sin(c_d x_d + phi_d) + y_shift. Shape (..., 2)."""
    r = scenario.reference
    x_d = r.v_ref * np.asarray(t, dtype=float)
    y_d = r.a_d * np.sin(r.c_d * x_d + r.phi_d) + r.y_shift
    return np.stack([x_d, y_d], axis=-1)


# ---------------------------------------------------------------------------
# rasterization


@dataclass(frozen=True)
class DomainMask:
    origin: tuple[float, float]
    spacing: float
    cells: np.ndarray  # int8, shape (nx, ny), indexed [ix, iy]

    @property
    def nx(self) -> int:
        return self.cells.shape[0]

    @property
    def ny(self) -> int:
        return self.cells.shape[1]

    def centers(self) -> np.ndarray:
        xs = self.origin[0] + self.spacing * np.arange(self.nx)
        ys = self.origin[1] + self.spacing * np.arange(self.ny)
        return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)

    @property
    def interior(self) -> np.ndarray:
        return self.cells == INTERIOR

    @property
    def boundary(self) -> np.ndarray:
        return self.cells == BOUNDARY

    @property
    def exterior(self) -> np.ndarray:
        return self.cells == EXTERIOR


_FOUR = ndimage.generate_binary_structure(2, 1)


def _classify(scenario: Scenario, resolution: float, pad_cells: int) -> DomainMask:
    b = scenario.bounds
    nx = int(np.ceil((b.x_max - b.x_min) / resolution)) + 1 + 2 * pad_cells
    ny = int(np.ceil((b.y_max - b.y_min) / resolution)) + 1 + 2 * pad_cells
    origin = (b.x_min - pad_cells * resolution, b.y_min - pad_cells * resolution)
    xs = origin[0] + resolution * np.arange(nx)
    ys = origin[1] + resolution * np.arange(ny)
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    inside = min_barrier(scenario, pts) > 0
    touching = ndimage.binary_dilation(inside, structure=_FOUR) & ~inside
    cells = np.full((nx, ny), EXTERIOR, dtype=np.int8)
    cells[inside] = INTERIOR
    cells[touching] = BOUNDARY
    return DomainMask(origin=origin, spacing=float(resolution), cells=cells)


def rasterize_domain(scenario: Scenario, resolution: float | None = None,
                     padding: float | None = None) -> DomainMask:
    """Classify grid cells as interior, boundary (4-adjacent to interior) or exterior.

    The grid covers the bounds plus ``padding`` meters (at least 2 cells) on
    every side. Raises DegenerateMeshError when the resolution is too coarse
    to resolve the domain: either nothing is interior, or the interior splits
    into more pieces than it does at a 4x finer resolution (a passage was lost).
    """
    resolution = scenario.resolution if resolution is None else resolution
    padding = scenario.padding if padding is None else padding
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    pad = max(2, int(np.ceil(padding / resolution)))
    mask = _classify(scenario, resolution, pad)
    n_coarse = ndimage.label(mask.interior, structure=_FOUR)[1]
    if n_coarse == 0:
        raise DegenerateMeshError(f"degenerate mesh: no interior cells at resolution {resolution}")
    fine = _classify(scenario, resolution / 4, 2)
    n_fine = ndimage.label(fine.interior, structure=_FOUR)[1]
    if n_coarse != n_fine:
        raise DegenerateMeshError(
            f"degenerate mesh: resolution {resolution} splits the domain into {n_coarse} "
            f"pieces ({n_fine} at finer resolution); a passage is narrower than one cell")
    return mask


# ---------------------------------------------------------------------------
# scenario files (INI-style key/value with sections)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _fmt(values) -> str:
    return ", ".join(repr(float(v)) for v in values)


_TOP_KEYS = {
    "name": str, "alpha_slope": float, "mu": float, "alpha_q": float, "dt": float,
    "duration": float, "seed": int,
}


def parse_scenario(text: str) -> Scenario:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string(text)
    known = {"scenario", "bounds", "reference", "gains", "robustness", "adaptation",
             "input_box", "field", "noise"}
    kwargs: dict = {}
    obstacles = []
    try:
        for section in cp.sections():
            sec = cp[section]
            if section.startswith("obstacle"):
                c = _floats(sec["center"])
                obstacles.append(CircleObstacle(center=(c[0], c[1]), radius=float(sec["radius"])))
                continue
            if section not in known:
                raise ScenarioError(f"unknown section [{section}]")
            if section == "scenario":
                for key, value in sec.items():
                    if key == "x0":
                        kwargs["x0"] = _floats(value)
                    elif key in _TOP_KEYS:
                        kwargs[key] = _TOP_KEYS[key](value)
                    else:
                        raise ScenarioError(f"unknown key {key!r} in [scenario]")
            elif section == "bounds":
                kwargs["bounds"] = RectBounds(**{k: float(v) for k, v in sec.items()})
            elif section == "reference":
                kwargs["reference"] = Reference(**{k: float(v) for k, v in sec.items()})
            elif section == "input_box":
                kwargs["input_box"] = InputBox(**{k: float(v) for k, v in sec.items()})
            elif section == "gains":
                kwargs["k_v"] = float(sec["k_v"])
                kwargs["k_omega"] = float(sec["k_omega"])
            elif section == "noise":
                kwargs["error_box"] = _floats(sec["error_box"])
                if "mode" in sec:
                    kwargs["noise_mode"] = sec["mode"]
            elif section == "robustness":
                for key, value in sec.items():
                    if key not in ("fixed_gamma", "tunable_etas"):
                        raise ScenarioError(f"unknown key {key!r} in [robustness]")
                    kwargs[key] = _floats(value)
            elif section == "adaptation":
                for key, value in sec.items():
                    if key == "gamma_bounds":
                        kwargs[key] = _floats(value)
                    elif key == "gamma_grid":
                        kwargs[key] = tuple(int(v) for v in _floats(value))
                    elif key in ("n_samples", "adapt_every"):
                        kwargs[key] = int(value)
                    elif key == "gamma_spacing":
                        kwargs[key] = value
                    elif key == "coarse_first":
                        kwargs[key] = sec.getboolean(key)
                    else:
                        raise ScenarioError(f"unknown key {key!r} in [adaptation]")
            elif section == "field":
                for key, value in sec.items():
                    if key not in ("resolution", "padding", "forcing_interior", "forcing_exterior"):
                        raise ScenarioError(f"unknown key {key!r} in [field]")
                    kwargs[key] = float(value)
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc
    if "bounds" not in kwargs:
        raise ScenarioError("scenario needs a [bounds] section")
    kwargs["obstacles"] = tuple(obstacles)
    return Scenario(**kwargs)


def format_scenario(s: Scenario) -> str:
    """Serialize to the same INI dialect; ``parse_scenario`` round-trips it exactly."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["scenario"] = {
        "name": s.name, "alpha_slope": repr(s.alpha_slope), "mu": repr(s.mu),
        "alpha_q": repr(s.alpha_q), "dt": repr(s.dt), "duration": repr(s.duration),
        "x0": _fmt(s.x0), "seed": str(s.seed),
    }
    cp["bounds"] = {k: repr(v) for k, v in asdict(s.bounds).items()}
    for i, o in enumerate(s.obstacles, start=1):
        cp[f"obstacle.{i}"] = {"center": _fmt(o.center), "radius": repr(o.radius)}
    cp["reference"] = {k: repr(v) for k, v in asdict(s.reference).items()}
    cp["gains"] = {"k_v": repr(s.k_v), "k_omega": repr(s.k_omega)}
    cp["input_box"] = {k: repr(v) for k, v in asdict(s.input_box).items()}
    cp["noise"] = {"error_box": _fmt(s.error_box), "mode": s.noise_mode}
    cp["robustness"] = {"fixed_gamma": _fmt(s.fixed_gamma), "tunable_etas": _fmt(s.tunable_etas)}
    cp["adaptation"] = {
        "gamma_bounds": _fmt(s.gamma_bounds),
        "gamma_grid": ", ".join(str(n) for n in s.gamma_grid),
        "gamma_spacing": s.gamma_spacing,
        "n_samples": str(s.n_samples),
        "adapt_every": str(s.adapt_every),
        "coarse_first": "true" if s.coarse_first else "false",
    }
    cp["field"] = {
        "resolution": repr(s.resolution), "padding": repr(s.padding),
        "forcing_interior": repr(s.forcing_interior),
        "forcing_exterior": repr(s.forcing_exterior),
    }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_scenario(path_or_name: str | Path) -> Scenario:
    """Load a scenario file, falling back to the bundled presets by name."""
    path = Path(path_or_name)
    if path.is_file():
        return parse_scenario(path.read_text())
    name = path.name if path.suffix == ".scenario" else f"{path.name}.scenario"
    bundled = resources.files("robust_cbf") / "scenarios" / name
    if bundled.is_file():
        return parse_scenario(bundled.read_text())
    raise FileNotFoundError(f"no scenario file or preset named {path_or_name!r}")


def default_scenario(**overrides) -> Scenario:
    s = load_scenario("paper")
    return s.with_(**overrides) if overrides else s
