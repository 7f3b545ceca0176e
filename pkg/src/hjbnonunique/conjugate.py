"""Discrete Legendre-Fenchel transforms and H <-> L duality checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    DEFAULT_HORIZON,
    ORIGINAL,
    ModelVariant,
    eval_hamiltonian,
    eval_lagrangian,
    eval_phi,
)


class ImproperFunctionError(ValueError):
    """Every sample of the function to conjugate is +inf."""


class WindowError(RuntimeError):
    """The slope window is too narrow for the supremum to be attained inside it."""


@dataclass(frozen=True)
class Grid1D:
    lo: float
    hi: float
    count: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if int(self.count) != self.count or self.count < 2:
            raise ValueError(f"grid needs at least 2 nodes, got {self.count}")

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.count - 1)

    def nodes(self) -> np.ndarray:
        # lo + (hi-lo)*k/(count-1): symmetric odd grids hit 0 exactly and
        # refined grids (count -> 2*count-1) contain the coarse nodes bit for bit
        k = np.arange(self.count, dtype=float)
        return self.lo + (self.hi - self.lo) * k / (self.count - 1)

    def refined(self, factor: int = 2) -> "Grid1D":
        """Nested refinement: every node of self is a node of the result."""
        return Grid1D(self.lo, self.hi, (self.count - 1) * factor + 1)

    def widened(self, factor: float) -> "Grid1D":
        """Same spacing, window scaled about its centre."""
        c = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo) * factor
        count = int(np.ceil((self.count - 1) * factor)) + 1
        return Grid1D(c - half, c + half, count)


@dataclass(frozen=True)
class DualityGapReport:
    sup_abs_gap: float
    argmax_point: tuple[float, float, float]  # (t, x, p) or (t, x, v)
    grids: tuple[Grid1D, Grid1D]
    bound: float = float("nan")

    def __post_init__(self):
        if not self.sup_abs_gap >= 0:
            raise ValueError("gap must be nonnegative")


def _conjugate_table(points, values, slopes):
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    finite = np.isfinite(values)
    if not np.any(finite):
        raise ImproperFunctionError("all samples are +inf; the function is not proper")
    pts, vals = points[finite], values[finite]
    slopes = np.atleast_1d(np.asarray(slopes, dtype=float))
    table = slopes[:, None] * pts[None, :] - vals[None, :]
    idx = np.argmax(table, axis=1)
    best = table[np.arange(len(slopes)), idx]
    # map back to indices of the full sample array
    full_idx = np.flatnonzero(finite)[idx]
    return best, full_idx


def discrete_conjugate(points, values, slope):
    """max over finite samples of slope*point - value.

    ``slope`` may be a scalar or an array; +inf samples are skipped.
    """
    best, _ = _conjugate_table(points, values, slope)
    return float(best[0]) if np.ndim(slope) == 0 else best


def duality_gap(t: float, x: float, p_grid: Grid1D, v_grid: Grid1D,
                variant: ModelVariant = ORIGINAL, T: float = DEFAULT_HORIZON) -> DualityGapReport:
    """sup over p of |L*(p) - H(t, x, p)| with the conjugate taken on v_grid."""
    if v_grid.lo > -2.0 or v_grid.hi < 2.0:
        raise ValueError("v_grid must span [-2, 2]")
    v = v_grid.nodes()
    p = p_grid.nodes()
    conj = discrete_conjugate(v, eval_lagrangian(t, x, v, variant, T), p)
    ham = eval_hamiltonian(t, x, p, variant)
    gaps = np.abs(conj - ham)
    k = int(np.argmax(gaps))
    phi = float(eval_phi(t, x, variant))
    lip_v = 1.0 / (2.0 * phi) if phi > 0 else 0.0
    bound = (float(np.max(np.abs(p))) + lip_v) * v_grid.spacing
    return DualityGapReport(float(gaps[k]), (float(t), float(x), float(p[k])),
                            (p_grid, v_grid), bound)


def discrete_biconjugate(t: float, x: float, v, p_grid: Grid1D,
                         variant: ModelVariant = ORIGINAL):
    """sup over p_grid of v*p - H(t, x, p), with no attainment check."""
    p = p_grid.nodes()
    best, _ = _conjugate_table(p, eval_hamiltonian(t, x, p, variant), v)
    return float(best[0]) if np.ndim(v) == 0 else best


def default_p_window(t: float, x: float, variant: ModelVariant = ORIGINAL,
                     spacing: float = 2.5e-3, minimum: float = 5.0) -> Grid1D:
    """Slope window wide enough to contain the maximiser +-1/(2 phi) of v*p - H.

    v*p - H is piecewise linear in p with slope at most 2 away from the
    maximiser, so the discrete supremum is within 2*spacing of the true one.
    """
    phi = float(eval_phi(t, x, variant))
    half = minimum if phi == 0 else max(minimum, 1.0 / phi)
    count = int(np.ceil(2.0 * half / spacing)) + 1
    return Grid1D(-half, half, count)


def biconjugate_gap(t: float, x: float, v_grid: Grid1D, p_grid: Grid1D,
                    variant: ModelVariant = ORIGINAL, T: float = DEFAULT_HORIZON,
                    margin: float = 0.05) -> DualityGapReport:
    """sup over probed v of |H*(v) - L(t, x, v)|.

    Probes nodes with |v| <= 2 - margin where L is finite. If the maximum
    is reached only on the edge of the p window the window is widened once
    (same spacing); a second edge hit raises ``WindowError``.
    """
    v = v_grid.nodes()
    lag = eval_lagrangian(t, x, v, variant, T)
    keep = (np.abs(v) <= 2.0 - margin) & np.isfinite(lag)
    if not np.any(keep):
        raise ValueError("no probe velocities inside the effective domain")
    v, lag = v[keep], lag[keep]

    grid = p_grid
    for attempt in range(2):
        p = grid.nodes()
        ham = eval_hamiltonian(t, x, p, variant)
        best, _ = _conjugate_table(p, ham, v)
        # attained inside when some interior node reaches the max (flat ties count)
        inner, _ = _conjugate_table(p[1:-1], ham[1:-1], v)
        if np.all(inner >= best):
            break
        if attempt == 0:
            grid = grid.widened(4.0)
    else:
        raise WindowError(f"supremum not attained inside p window at (t={t}, x={x})")

    gaps = np.abs(best - lag)
    k = int(np.argmax(gaps))
    return DualityGapReport(float(gaps[k]), (float(t), float(x), float(v[k])),
                            (v_grid, grid), 2.0 * grid.spacing)
