"""Semi-Lagrangian dynamic programming for the Bolza value function.

Backward recursion
    W(t_j, x_i) = min_v [ cost_j(x_i, v) + W(t_{j+1}, x_i + v dt) ]
with linear interpolation in x. The running cost over one step is, by
default, the exact integral of L along the straight segment, using a
closed-form antiderivative of 1/phi; the plain left-point rule
dt * L(t_j, x_i, v) is kept as an option.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import exp1

from .model import (
    DEFAULT_HORIZON,
    ORIGINAL,
    ModelVariant,
    Trajectory,
    check_horizon,
    eval_lagrangian,
    eval_terminal_g,
    phi_of_gap,
    solution_field,
)

DEFAULT_REGION = (-1.0, 2.0)
DEFAULT_LEVELS = ((201, 41), (401, 81), (801, 161))  # (t_nodes, v_nodes)
RUNNING_COSTS = ("exact", "left")


class QuadratureError(ArithmeticError):
    """Adaptive quadrature missed its accuracy target."""


@dataclass(frozen=True)
class GridSpec:
    t_nodes: int
    x_lo: float
    x_hi: float
    x_nodes: int
    v_nodes: int
    stagger: float = 0.5
    region: tuple[float, float] = DEFAULT_REGION

    def __post_init__(self):
        if self.t_nodes < 2 or self.x_nodes < 2:
            raise ValueError("need at least 2 time and 2 space nodes")
        if not self.x_lo < self.x_hi:
            raise ValueError("need x_lo < x_hi")
        if self.v_nodes < 3 or self.v_nodes % 2 == 0:
            raise ValueError("v_nodes must be odd and >= 3 so that v = 0 is a node")
        if not 0.0 <= self.stagger < 1.0:
            raise ValueError("stagger must lie in [0, 1)")
        if not self.region[0] < self.region[1]:
            raise ValueError("empty region of interest")

    @classmethod
    def aligned(cls, t_nodes: int, v_nodes: int, T: float = DEFAULT_HORIZON,
                region: tuple[float, float] = DEFAULT_REGION, stagger: float = 0.5) -> "GridSpec":
        """Grid with dx = dt covering region +- 2T, so |v| = 2 feet land on nodes."""
        T = check_horizon(T)
        dt = T / (t_nodes - 1)
        a, b = region
        x_lo, x_hi = a - 2.0 * T, b + 2.0 * T
        x_nodes = int(round((x_hi - x_lo) / dt)) + 1
        return cls(t_nodes, x_lo, x_lo + (x_nodes - 1) * dt, x_nodes, v_nodes, stagger, tuple(region))

    def dt(self, T: float) -> float:
        return T / (self.t_nodes - 1)

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / (self.x_nodes - 1)

    def times(self, T: float) -> np.ndarray:
        return T * np.arange(self.t_nodes) / (self.t_nodes - 1)

    def xs(self) -> np.ndarray:
        return self.x_lo + (np.arange(self.x_nodes) + self.stagger) * self.dx

    def vs(self) -> np.ndarray:
        k = np.arange(self.v_nodes)
        return -2.0 + 4.0 * k / (self.v_nodes - 1)

    def validate(self, T: float) -> None:
        a, b = self.region
        if self.x_lo > a - 2.0 * T + 1e-12 or self.x_hi < b + 2.0 * T - 1e-12:
            raise ValueError("x-grid must cover the region of interest inflated by 2T")
        if self.stagger != 0.0:
            ts = self.times(T)
            xs = self.xs()
            if np.intersect1d(ts, xs).size:
                raise ValueError("a grid node lies exactly on the diagonal t == x")


# ------------------------------------------------------------ running costs

def _signed_antiderivative(y, variant: ModelVariant):
    """G with G'(y) = 1/phi(|y|); G(0) = 0 where the integral converges."""
    y = np.asarray(y, dtype=float)
    u = np.abs(y)
    if variant.kind == "original":
        a = -np.expm1(-2.0 * np.sqrt(u))
    elif variant.kind == "approx":
        n = variant.n
        kappa = math.exp(-2.0 / math.sqrt(n))
        c = math.sqrt(n) * kappa
        a = np.where(u <= 1.0 / n, c * u, c / n + kappa - np.exp(-2.0 * np.sqrt(np.maximum(u, 1.0 / n))))
    else:
        # 1/phi_hat is not integrable at 0; -E1(2u) is an antiderivative on u > 0
        with np.errstate(divide="ignore"):
            a = -exp1(2.0 * u)
    return np.sign(y) * a


def gap_integral(y0, y1, variant: ModelVariant = ORIGINAL):
    """Integral of 1/phi(|y|) for y from y0 to y1 (+inf when it diverges)."""
    y0, y1 = np.broadcast_arrays(np.asarray(y0, dtype=float), np.asarray(y1, dtype=float))
    with np.errstate(invalid="ignore"):
        val = np.abs(_signed_antiderivative(y1, variant) - _signed_antiderivative(y0, variant))
    if variant.kind == "hat":
        crosses = (np.sign(y0) != np.sign(y1)) | (y0 == 0) | (y1 == 0)
        val = np.where(crosses & (y0 != y1), math.inf, val)
    return val if val.ndim else float(val)


def segment_cost(t: float, xs, vs, dt: float, variant: ModelVariant = ORIGINAL,
                 T: float = DEFAULT_HORIZON, rule: str = "exact"):
    """Cost of holding velocity v over [t, t + dt] from each x; shape (len(vs), len(xs))."""
    xs = np.asarray(xs, dtype=float)
    vs = np.asarray(vs, dtype=float)
    if rule == "left":
        return eval_lagrangian(t, xs[None, :], vs[:, None], variant, T)
    if rule != "exact":
        raise ValueError(f"unknown running cost rule {rule!r}")
    d0 = t - xs[None, :]
    s = 1.0 - vs[:, None]  # y = t - x moves at rate 1 - v
    y1 = d0 + s * dt
    with np.errstate(divide="ignore", invalid="ignore"):
        g0 = _signed_antiderivative(d0, variant)
        integral = np.abs(_signed_antiderivative(y1, variant) - g0) / np.abs(s)
        if variant.kind == "hat":
            crosses = (np.sign(d0) != np.sign(y1)) | (y1 == 0)
            integral = np.where(crosses, math.inf, integral)
    # v == 1 keeps t - x fixed
    still = np.abs(s) < 1e-12
    if np.any(still):
        flat = dt * 2.0 * np.asarray(eval_lagrangian(t, xs[None, :], np.ones_like(s), variant, T))
        integral = np.where(still, flat, integral)
    cost = 0.5 * np.abs(vs)[:, None] * integral
    cost = np.where(np.abs(vs)[:, None] > 2.0, math.inf, cost)
    return np.where(vs[:, None] == 0.0, 0.0, cost)


# -------------------------------------------------------------------- solver

@dataclass
class ValueField:
    grid: GridSpec
    T: float
    variant: ModelVariant
    running_cost: str
    values: np.ndarray
    clamp_events: int = 0
    seconds: float = 0.0
    ts: np.ndarray = field(init=False)
    xs: np.ndarray = field(init=False)

    def __post_init__(self):
        self.ts = self.grid.times(self.T)
        self.xs = self.grid.xs()
        if self.values.shape != (len(self.ts), len(self.xs)):
            raise ValueError("values shape does not match the grid")

    def at(self, t, x):
        """Bilinear interpolation of the field at arbitrary (t, x) inside the grid."""
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError("t outside [0, T]")
        dt = self.grid.dt(self.T)
        pos = t / dt
        j = np.clip(np.floor(pos).astype(int), 0, len(self.ts) - 2)
        w = pos - j
        out = np.empty(t.shape)
        flat_j, flat_w = j.ravel(), w.ravel()
        flat_x, res = x.ravel(), out.ravel()
        for jj in np.unique(flat_j):
            m = flat_j == jj
            lo = np.interp(flat_x[m], self.xs, self.values[jj])
            hi = np.interp(flat_x[m], self.xs, self.values[jj + 1])
            res[m] = (1.0 - flat_w[m]) * lo + flat_w[m] * hi
        out = res.reshape(t.shape)
        return float(out) if out.ndim == 0 else out


def solve_dp(grid: GridSpec, variant: ModelVariant = ORIGINAL, T: float = DEFAULT_HORIZON,
             running_cost: str = "exact") -> ValueField:
    T = check_horizon(T)
    grid.validate(T)
    start = time.perf_counter()
    ts, xs, vs = grid.times(T), grid.xs(), grid.vs()
    dt = grid.dt(T)
    a, b = grid.region
    W = np.empty((len(ts), len(xs)))
    W[-1] = eval_terminal_g(xs, T)
    clamps = 0
    for j in range(len(ts) - 2, -1, -1):
        feet = xs[None, :] + vs[:, None] * dt
        cone = (xs >= a - 2.0 * ts[j]) & (xs <= b + 2.0 * ts[j])
        outside = (feet < xs[0]) | (feet > xs[-1])
        clamps += int(np.count_nonzero(outside[:, cone]))
        cont = np.interp(feet.ravel(), xs, W[j + 1]).reshape(feet.shape)
        total = segment_cost(ts[j], xs, vs, dt, variant, T, running_cost) + cont
        W[j] = np.min(total, axis=0)
        if not np.all(np.isfinite(W[j])):
            raise ArithmeticError(f"every control is excluded at some node of slice {j}")
    return ValueField(grid, T, variant, running_cost, W, clamps, time.perf_counter() - start)


# ---------------------------------------------------------- Bolza objective

def _ray_objective(t0, x0, T, variant):
    c = 2.0 * t0 - x0  # t - x(t) = c - t along the ray
    yT = c - T
    # terminal cost from the same gap as the integral: rounding x(T) on its
    # own would break the cancellation of the sqrt terms near x(T) = T
    g = math.expm1(-2.0 * math.sqrt(-yT)) if yT < 0 else float(eval_terminal_g(T - yT, T))
    return g + gap_integral(c - t0, yT, variant)


def _custom_objective(traj: Trajectory, variant, T, rtol):
    # On a straight piece y = t - x moves at rate 1 - v, so the running cost is
    # |v| / (2 |1 - v|) times the integral of 1/phi(|y|) dy. Integrating in y
    # puts any diagonal crossing exactly at y = 0, where the pieces are split.
    s = traj.samples
    inv_phi = lambda y: 1.0 / float(phi_of_gap(abs(y), variant))  # noqa: E731
    total, err = 0.0, 0.0
    for k in range(len(s) - 1):
        ta, tb = s[k, 0], s[k + 1, 0]
        xa, xb = s[k, 1], s[k + 1, 1]
        v = (xb - xa) / (tb - ta)
        if v == 0.0:
            continue
        ya, yb = ta - xa, tb - xb
        if abs(1.0 - v) < 1e-3 and ya * yb > 0:
            # y barely moves: the substitution would divide rounding noise, so
            # integrate in t along the segment instead
            path = lambda t, ta=ta, ya=ya, v=v: inv_phi(ya + (1.0 - v) * (t - ta))  # noqa: E731
            val, abserr = integrate.quad(path, ta, tb, epsabs=1e-15, epsrel=1e-11, limit=200)
            total += abs(v) / 2.0 * val
            err += abs(v) / 2.0 * abserr
            continue
        if ya == yb:
            # y == 0 along the whole segment
            if variant.has_diagonal:
                return math.inf, 0.0
            total += abs(v) / 2.0 * (tb - ta) * inv_phi(ya)
            continue
        if variant.kind == "hat" and ya * yb <= 0:
            # 1/phi_hat is not integrable across the diagonal
            return math.inf, 0.0
        scale = abs(v) / (2.0 * abs(1.0 - v))
        lo, hi = min(ya, yb), max(ya, yb)
        pieces = [(lo, 0.0), (0.0, hi)] if lo < 0.0 < hi else [(lo, hi)]
        for a, b in pieces:
            with warnings.catch_warnings():
                # judged by the returned error estimate below
                warnings.simplefilter("ignore", integrate.IntegrationWarning)
                val, abserr = integrate.quad(inv_phi, a, b, epsabs=1e-15, epsrel=1e-11, limit=200)
            total += scale * val
            err += scale * abserr
    if not math.isfinite(total) or err > rtol * max(abs(total), 1e-300):
        raise QuadratureError(f"quadrature error {err:.3g} exceeds relative {rtol}")
    return total, err


def evaluate_bolza_objective(traj: Trajectory, variant: ModelVariant = ORIGINAL,
                             T: float = DEFAULT_HORIZON, rtol: float = 1e-8) -> float:
    """g(x(T)) + integral of L along the trajectory."""
    T = check_horizon(T)
    if abs(traj.t[-1] - T) > 1e-12:
        raise ValueError("trajectory must end at the horizon T")
    if traj.kind == "fast_ray":
        return _ray_objective(traj.t0, traj.x0, T, variant)
    if traj.kind == "constant":
        # L(t, x, 0) = 0 for every variant, on and off the diagonal
        return float(eval_terminal_g(traj.x0, T))
    integral, _ = _custom_objective(traj, variant, T, rtol)
    return float(eval_terminal_g(traj.x[-1], T)) + integral


def extract_trajectory(field_: ValueField, t0: float, x0: float) -> Trajectory:
    """Greedy forward rollout of the DP argmin from (t0, x0).

    t0 must be a time node of the field. Ties (within 1e-12 relative) go to
    the larger |v|, then to positive v.
    """
    g = field_.grid
    a, b = g.region
    if not a <= x0 <= b:
        raise ValueError("starting point outside the region of interest")
    n = g.t_nodes - 1
    j0 = int(round(t0 / field_.T * n))
    if not 0 <= j0 < n or abs(field_.ts[j0] - t0) > 1e-12:
        raise ValueError("t0 must be a time node of the field before T")
    vs = g.vs()
    order = np.lexsort((-vs, -np.abs(vs)))  # preference order for ties
    dt = g.dt(field_.T)
    steps = [0.0]
    chosen = []
    x = float(x0)
    for j in range(j0, n):
        cost = segment_cost(field_.ts[j], np.array([x]), vs, dt, field_.variant, field_.T,
                            field_.running_cost)[:, 0]
        total = cost + np.interp(x + vs * dt, field_.xs, field_.values[j + 1])
        best = np.min(total)
        ties = np.abs(total - best) <= 1e-12 * (1.0 + abs(best))
        k = next(i for i in order if ties[i])
        chosen.append(vs[k])
        steps.append(steps[-1] + vs[k])
        # positions from the integer-like sum keep a ray of speed 2 exact
        x = x0 + field_.T * steps[-1] / n
    xs = x0 + field_.T * np.asarray(steps) / n
    ts = field_.ts[j0:]
    v = np.append(chosen, chosen[-1])
    return Trajectory(float(t0), float(x0), np.column_stack([ts, xs, v]), "custom")


# -------------------------------------------------------- convergence study

@dataclass(frozen=True)
class ConvergenceRow:
    level: int
    t_nodes: int
    x_nodes: int
    v_nodes: int
    sup_err: float
    mean_err: float
    seconds: float
    clamp_events: int


def reference_field(reference: str, T: float):
    """'V', 'U' or 'Vn:<n>' as a callable f(t, x)."""
    if reference in ("V", "U"):
        return solution_field(reference, T)
    if reference.startswith("Vn:"):
        return solution_field("Vn", T, int(reference[3:]))
    raise ValueError(f"unknown reference {reference!r}")


def sample_points(T: float = DEFAULT_HORIZON, region=DEFAULT_REGION, t_rows: int = 201,
                  per_row: int = 500, seed: int = 0):
    """Fixed evaluation points: t on a uniform row grid, x seeded uniform in the region."""
    rng = np.random.default_rng(seed)
    t = np.repeat(T * np.arange(t_rows) / (t_rows - 1), per_row)
    x = rng.uniform(region[0], region[1], t.size)
    return t, x


def strip_points(T: float = DEFAULT_HORIZON, count: int = 50):
    """The family (T/2 + s, T/4 + s/2) inside the strip where U and V differ by >= 0.3."""
    s = np.linspace(-0.4 * T, 0.15 * T, count)
    return T / 2 + s, T / 4 + s / 2


def field_errors(field_: ValueField, reference: str, points, band: float = 2.0):
    """Absolute errors at points, dropping those within band*dx of x = 2t - T."""
    t, x = points
    keep = np.abs(x - (2.0 * t - field_.T)) > band * field_.grid.dx
    ref = reference_field(reference, field_.T)
    return np.abs(field_.at(t[keep], x[keep]) - ref(t[keep], x[keep]))


def convergence_study(grids, variant: ModelVariant = ORIGINAL, reference: str = "V",
                      T: float = DEFAULT_HORIZON, points=None, running_cost: str = "exact",
                      keep_fields: bool = False):
    """Error of solve_dp against a closed-form reference on each grid level."""
    T = check_horizon(T)
    rows, fields = [], []
    for level, g in enumerate(grids):
        pts = points if points is not None else sample_points(T, g.region)
        f = solve_dp(g, variant, T, running_cost)
        err = field_errors(f, reference, pts)
        rows.append(ConvergenceRow(level, g.t_nodes, g.x_nodes, g.v_nodes, float(err.max()),
                                   float(err.mean()), f.seconds, f.clamp_events))
        if keep_fields:
            fields.append(f)
    return (rows, fields) if keep_fields else rows
