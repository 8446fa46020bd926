"""Poisson safety field: Dirichlet solve on a rasterized domain plus
bilinear sampling and finite-difference derivatives.

Cells marked BOUNDARY are pinned to zero. Every other cell is an unknown;
interior cells get negative forcing (so the field is positive inside) and
exterior cells positive forcing (negative outside). Neighbours beyond the
grid edge are treated as zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .world import BOUNDARY, INTERIOR, DomainMask

PSF_MAGIC = b"PSF\x00"
PSF_VERSION = 1
_HEADER = struct.Struct("<4sIdddII")


class PoissonConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"SOR did not converge after {iterations} iterations "
                         f"(max residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


class OutOfFieldError(ValueError):
    pass


@dataclass(frozen=True)
class Forcing:
    interior_value: float = -4.0
    exterior_value: float = 4.0

    def __post_init__(self):
        if not (self.interior_value < 0 < self.exterior_value):
            raise ValueError("forcing must be negative inside and positive outside")


@dataclass(frozen=True)
class GridField:
    origin: tuple[float, float]
    spacing: float
    values: np.ndarray  # shape (nx, ny), indexed [ix, iy]
    cells: np.ndarray | None = None
    residual: float = 0.0
    iterations: int = 0

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        ox, oy = self.origin
        return (ox, ox + (self.nx - 1) * self.spacing, oy, oy + (self.ny - 1) * self.spacing)

    def contains(self, points, margin: float = 0.0) -> np.ndarray | bool:
        p = np.asarray(points, dtype=float)
        x0, x1, y0, y1 = self.extent
        ok = ((p[..., 0] >= x0 + margin) & (p[..., 0] <= x1 - margin)
              & (p[..., 1] >= y0 + margin) & (p[..., 1] <= y1 - margin))
        return bool(ok) if np.ndim(ok) == 0 else ok

    @classmethod
    def from_function(cls, func, origin, spacing, nx, ny) -> "GridField":
        """Seed a field from f(x, y) evaluated at cell centers (bypasses the solver)."""
        xs = origin[0] + spacing * np.arange(nx)
        ys = origin[1] + spacing * np.arange(ny)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        return cls(origin=(float(origin[0]), float(origin[1])), spacing=float(spacing),
                   values=np.asarray(func(X, Y), dtype=float) * np.ones_like(X))


# ---------------------------------------------------------------------------
# solver


def _neighbour_sum(u: np.ndarray) -> np.ndarray:
    nb = np.zeros_like(u)
    nb[1:, :] += u[:-1, :]
    nb[:-1, :] += u[1:, :]
    nb[:, 1:] += u[:, :-1]
    nb[:, :-1] += u[:, 1:]
    return nb


def stencil_residual(values: np.ndarray, spacing: float, rhs: np.ndarray) -> np.ndarray:
    """5-point Laplacian minus forcing, at every cell (zero ghost ring)."""
    return (_neighbour_sum(values) - 4.0 * values) / spacing**2 - rhs


def forcing_array(mask: DomainMask, forcing: Forcing) -> np.ndarray:
    rhs = np.where(mask.cells == INTERIOR, forcing.interior_value, forcing.exterior_value)
    rhs[mask.cells == BOUNDARY] = 0.0
    return rhs


def solve_poisson(mask: DomainMask, forcing: Forcing | None = None, tol: float = 1e-6,
                  max_iters: int = 200_000, omega: float = 1.9,
                  check_every: int = 25) -> GridField:
    """Red-black SOR for the joint interior/exterior Dirichlet problem.

    Converged when the max-norm stencil residual over all non-boundary
    cells drops below ``tol``.
    """
    forcing = forcing or Forcing()
    if not mask.interior.any():
        raise ValueError("mask has no interior cells")
    if not tol > 0:
        raise ValueError("tol must be positive")
    s2 = mask.spacing**2
    rhs = forcing_array(mask, forcing)
    free = mask.cells != BOUNDARY
    ix, iy = np.indices(mask.cells.shape)
    colours = [free & ((ix + iy) % 2 == c) for c in (0, 1)]
    u = np.zeros(mask.cells.shape)
    target = s2 * rhs
    residual = np.inf
    it = 0
    while it < max_iters:
        for sel in colours:
            gs = 0.25 * (_neighbour_sum(u) - target)
            u[sel] += omega * (gs[sel] - u[sel])
        it += 1
        if it % check_every == 0 or it == max_iters:
            residual = float(np.abs(stencil_residual(u, mask.spacing, rhs)[free]).max())
            if residual < tol:
                break
    if not residual < tol:
        raise PoissonConvergenceError(residual, it)
    return GridField(origin=mask.origin, spacing=mask.spacing, values=u,
                     cells=mask.cells.copy(), residual=residual, iterations=it)


# ---------------------------------------------------------------------------
# continuous evaluation


def sample(field: GridField, point) -> np.ndarray | float:
    """Bilinear interpolation of the four surrounding cell values."""
    p = np.asarray(point, dtype=float)
    fx = (p[..., 0] - field.origin[0]) / field.spacing
    fy = (p[..., 1] - field.origin[1]) / field.spacing
    nx, ny = field.values.shape
    bad = ~((fx >= 0) & (fx <= nx - 1) & (fy >= 0) & (fy <= ny - 1))
    if np.any(bad):
        raise OutOfFieldError(f"out of field: {p[bad] if p.ndim > 1 else p}")
    i = np.minimum(np.floor(fx).astype(np.intp), nx - 2)
    j = np.minimum(np.floor(fy).astype(np.intp), ny - 2)
    tx = fx - i
    ty = fy - j
    v = field.values
    out = ((1 - tx) * (1 - ty) * v[i, j] + tx * (1 - ty) * v[i + 1, j]
           + (1 - tx) * ty * v[i, j + 1] + tx * ty * v[i + 1, j + 1])
    return float(out) if np.ndim(out) == 0 else out


def _require_clearance(field: GridField, p: np.ndarray, clearance: float) -> None:
    if not np.all(field.contains(p, margin=clearance * (1 - 1e-12))):
        raise OutOfFieldError("point too close to the field edge for differencing")


def gradient(field: GridField, point) -> np.ndarray:
    """Central differences of ``sample`` with step = spacing. Shape (..., 2)."""
    p = np.asarray(point, dtype=float)
    s = field.spacing
    _require_clearance(field, p, s)
    ex = np.array([s, 0.0])
    ey = np.array([0.0, s])
    gx = (sample(field, p + ex) - sample(field, p - ex)) / (2 * s)
    gy = (sample(field, p + ey) - sample(field, p - ey)) / (2 * s)
    return np.stack([gx, gy], axis=-1)


def hessian(field: GridField, point) -> np.ndarray:
    """Second-order central differences; mixed partial symmetrized. Shape (..., 2, 2)."""
    p = np.asarray(point, dtype=float)
    s = field.spacing
    _require_clearance(field, p, s)
    ex = np.array([s, 0.0])
    ey = np.array([0.0, s])
    f0 = sample(field, p)
    fxx = (sample(field, p + ex) - 2 * f0 + sample(field, p - ex)) / s**2
    fyy = (sample(field, p + ey) - 2 * f0 + sample(field, p - ey)) / s**2
    fxy = (sample(field, p + ex + ey) - sample(field, p + ex - ey)
           - sample(field, p - ex + ey) + sample(field, p - ex - ey)) / (4 * s**2)
    # 4-corner stencil is symmetric in x/y, so d2/dxdy == d2/dydx by construction
    return np.stack([np.stack([fxx, fxy], -1), np.stack([fxy, fyy], -1)], -2)


# ---------------------------------------------------------------------------
# .psf persistence


def save_field(field: GridField, path: str | Path) -> None:
    """Header, float64 values (C order over [ix, iy]), then an optional int8 cell mask."""
    header = _HEADER.pack(PSF_MAGIC, PSF_VERSION, field.origin[0], field.origin[1],
                          field.spacing, field.nx, field.ny)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
        if field.cells is not None:
            fh.write(np.ascontiguousarray(field.cells, dtype=np.int8).tobytes())


def load_field(path: str | Path) -> GridField:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated field file")
    magic, version, ox, oy, spacing, nx, ny = _HEADER.unpack_from(data)
    if magic != PSF_MAGIC:
        raise ValueError(f"{path}: not a .psf field file")
    if version != PSF_VERSION:
        raise ValueError(f"{path}: unsupported .psf version {version}")
    n = nx * ny
    start = _HEADER.size
    end = start + 8 * n
    if len(data) < end:
        raise ValueError(f"{path}: truncated value block")
    values = np.frombuffer(data[start:end], dtype="<f8").reshape(nx, ny).astype(float)
    cells = None
    if len(data) >= end + n:
        cells = np.frombuffer(data[end:end + n], dtype=np.int8).reshape(nx, ny).copy()
    return GridField(origin=(ox, oy), spacing=spacing, values=values, cells=cells)
