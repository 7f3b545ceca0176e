"""Lipschitz-type probes of H and L near the diagonal t == x.

The ratio scans report a growth exponent from a log-log fit so that
blow-up (Original) and boundedness (Hat, Approx) can be told apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .model import (
    DEFAULT_HORIZON,
    ORIGINAL,
    ModelVariant,
    check_horizon,
    eval_hamiltonian,
    eval_lagrangian,
    eval_phi,
    phi_of_gap,
    sigma_n,
)

DIVERGENCE_SLOPE = -0.25
MIN_R_SQUARED = 0.99
FIT_POINTS = 5


@dataclass(frozen=True)
class BoxSpec:
    """Box of half-width r around (t0, x0, p0), intersected with [0, T] in t."""

    t0: float
    x0: float
    p0: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("box half-width must be positive")


@dataclass(frozen=True)
class RatioScan:
    parameters: np.ndarray
    ratios: np.ndarray
    exponent: float
    r_squared: float
    verdict: str  # "diverges" or "bounded"

    @property
    def sup(self) -> float:
        return float(np.max(self.ratios))

    def rows(self):
        return list(zip(self.parameters.tolist(), self.ratios.tolist()))


def fit_growth(params, ratios, last: int = FIT_POINTS):
    """Least-squares slope and R^2 of log ratio against log parameter on the last points."""
    p = np.asarray(params, dtype=float)[-last:]
    r = np.asarray(ratios, dtype=float)[-last:]
    if np.any(r <= 0):
        return math.nan, math.nan
    lx, ly = np.log(p), np.log(r)
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 0.0
    return float(slope), r2


def _scan(params, ratios) -> RatioScan:
    params = np.asarray(params, dtype=float)
    ratios = np.asarray(ratios, dtype=float)
    slope, r2 = fit_growth(params, ratios)
    diverges = math.isfinite(slope) and r2 >= MIN_R_SQUARED and slope <= DIVERGENCE_SLOPE
    return RatioScan(params, ratios, slope, r2, "diverges" if diverges else "bounded")


def _check_decreasing_positive(vals, name):
    vals = np.asarray(vals, dtype=float)
    if vals.ndim != 1 or len(vals) < 2:
        raise ValueError(f"{name} must be a 1-d sequence of at least 2 values")
    if np.any(vals <= 0) or np.any(np.diff(vals) >= 0):
        raise ValueError(f"{name} must be positive and strictly decreasing")
    return vals


# ---------------------------------------------------------------- LLC in (x, p)

def llc_constant(box: BoxSpec, samples: int = 200, variant: ModelVariant = ORIGINAL,
                 T: float = DEFAULT_HORIZON, seed: int = 0) -> float:
    """Largest |H(t,x,p) - H(s,y,q)| / (|t-s| + |x-y| + |p-q|) over sampled pairs in the box.

    Pairs are all combinations of ``samples`` random points, plus small
    axis-aligned perturbations of each point.
    """
    T = check_horizon(T)
    if samples < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    lo_t, hi_t = max(box.t0 - box.r, 0.0), min(box.t0 + box.r, T)
    lo = np.array([lo_t, box.x0 - box.r, box.p0 - box.r])
    hi = np.array([hi_t, box.x0 + box.r, box.p0 + box.r])
    pts = rng.uniform(lo, hi, (samples, 3))
    h = np.asarray(eval_hamiltonian(pts[:, 0], pts[:, 1], pts[:, 2], variant))

    dist = np.abs(pts[:, None, :] - pts[None, :, :]).sum(axis=2)
    diff = np.abs(h[:, None] - h[None, :])
    mask = dist > 0
    best = float(np.max(diff[mask] / dist[mask])) if np.any(mask) else 0.0

    # axis-aligned perturbations capture the steepest local slopes
    delta = box.r * 1e-3
    for axis in range(3):
        for sign in (1.0, -1.0):
            moved = pts.copy()
            moved[:, axis] = np.clip(moved[:, axis] + sign * delta, lo[axis], hi[axis])
            d = np.abs(moved - pts).sum(axis=1)
            ok = d > 0
            h1 = np.asarray(eval_hamiltonian(moved[:, 0], moved[:, 1], moved[:, 2], variant))
            if np.any(ok):
                best = max(best, float(np.max(np.abs(h1 - h)[ok] / d[ok])))
    return best


# ---------------------------------------------------------- SLC in t at the diagonal

def slc_ratio_scan(anchor_t: float, anchor_x: float, h_values, variant: ModelVariant = ORIGINAL,
                   T: float = DEFAULT_HORIZON) -> RatioScan:
    """|H(t0+h, x0, p_h) - H(t0, x0, p_h)| / ((1 + |p_h|) h) with p_h = 1/phi(t0+h, x0)."""
    T = check_horizon(T)
    if anchor_t != anchor_x:
        raise ValueError("slc anchor must lie on the diagonal t == x")
    h = _check_decreasing_positive(h_values, "h_values")
    if anchor_t < 0 or anchor_t + h[0] > T:
        raise ValueError("anchor_t + h must stay inside [0, T]")
    th = anchor_t + h
    p = 1.0 / np.asarray(eval_phi(th, anchor_x, variant))
    num = np.abs(eval_hamiltonian(th, anchor_x, p, variant) - eval_hamiltonian(anchor_t, anchor_x, p, variant))
    return _scan(h, num / ((1.0 + np.abs(p)) * h))


# ------------------------------------------------------- L-side growth near the diagonal

def _log_derivative(u, variant: ModelVariant):
    # phi'(u) / phi(u) for u = t - x > 0
    if variant.kind == "original":
        return 1.0 / (2.0 * u) + 1.0 / np.sqrt(u)
    if variant.kind == "hat":
        return 1.0 / u + 2.0
    # approx: phi_n is frozen for u < 1/n
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore"):
        full = 1.0 / (2.0 * u) + 1.0 / np.sqrt(u)
    return np.where(u >= 1.0 / variant.n, full, 0.0)


def lagrangian_subgradient(t, x, v, variant: ModelVariant = ORIGINAL):
    """Gradient (w1, w2, p) of L in (t, x, v) for t > x and 0 < v <= 2."""
    t, x, v = (np.asarray(a, dtype=float) for a in (t, x, v))
    u = t - x
    if np.any(u <= 0) or np.any(v <= 0) or np.any(v > 2):
        raise ValueError("need t > x and 0 < v <= 2")
    phi = np.asarray(phi_of_gap(u, variant))
    lag = v / (2.0 * phi)
    k = _log_derivative(u, variant)
    w1 = -lag * k
    w2 = lag * k
    p = 1.0 / (2.0 * phi)
    return w1, w2, p


def cond6_ratio_scan(u_values, variant: ModelVariant = ORIGINAL,
                     T: float = DEFAULT_HORIZON) -> RatioScan:
    """|(w1, w2)|_2 / ((1 + |v| + L)(1 + |p|)) along v = 2 phi(u) as u -> 0+."""
    T = check_horizon(T)
    u = _check_decreasing_positive(u_values, "u_values")
    phi = np.asarray(phi_of_gap(u, variant))
    v = 2.0 * phi
    if np.any(v > 2.0):
        raise ValueError("2 phi(u) exceeds the speed bound 2; use smaller u")
    x = np.zeros_like(u)
    w1, w2, p = lagrangian_subgradient(u, x, v, variant)
    lag = np.asarray(eval_lagrangian(u, x, v, variant, max(T, float(u.max()))))
    lhs = np.hypot(w1, w2)
    rhs = (1.0 + np.abs(v) + lag) * (1.0 + np.abs(p))
    return _scan(u, lhs / rhs)


# ------------------------------------------------------------ modulus condition

@dataclass(frozen=True)
class ModulusReport:
    checked: int
    violations: int
    worst_slack_speed: float
    worst_slack_cost: float
    first_violation: tuple | None
    modulus: str


def _phi_fn(variant):
    return lambda u: np.asarray(phi_of_gap(u, variant), dtype=float)


def window_modulus(variant: ModelVariant, umax: float, deltas, dense: int = 4001):
    """sup over u in [0, umax - delta] of phi(u + delta) - phi(u), for each delta.

    Dense sampling followed by a bounded scalar refinement around the best node.
    """
    f = _phi_fn(variant)
    out = []
    for d in np.asarray(deltas, dtype=float):
        if d <= 0:
            out.append(0.0)
            continue
        d = min(d, umax)
        us = np.linspace(0.0, umax - d, dense)
        inc = f(us + d) - f(us)
        k = int(np.argmax(inc))
        best = float(inc[k])
        if dense > 2 and umax - d > 0:
            a, b = us[max(k - 1, 0)], us[min(k + 1, dense - 1)]
            if b > a:
                res = minimize_scalar(lambda s: -(f(s + d) - f(s)), bounds=(a, b), method="bounded",
                                      options={"xatol": 1e-14})
                best = max(best, float(-res.fun))
        out.append(best)
    return np.array(out)


def lipschitz_estimate(variant: ModelVariant, umax: float, dense: int = 4001, refine: int = 40) -> float:
    """Largest secant slope of phi on [0, umax], refined by repeated halving."""
    f = _phi_fn(variant)
    us = np.linspace(0.0, umax, dense)
    slopes = np.diff(f(us)) / np.diff(us)
    k = int(np.argmax(slopes))
    a, b = us[k], us[k + 1]
    best = float(slopes[k])
    floor = 1e-6 * max(1.0, umax)  # narrower secants drown in round-off
    for _ in range(refine):
        if b - a < floor:
            break
        m = 0.5 * (a + b)
        left = float((f(m) - f(a)) / (m - a))
        right = float((f(b) - f(m)) / (b - m))
        if left >= right:
            b, best = m, max(best, left)
        else:
            a, best = m, max(best, right)
    return best


def _modulus_factory(variant: ModelVariant, umax: float):
    if variant.kind == "hat":
        k = 1.01 * lipschitz_estimate(variant, umax)
        return (lambda d: k * np.asarray(d, dtype=float)), f"linear k={k:.6g}"
    if variant.kind != "original":
        raise ValueError("modulus check is defined for the original and hat variants")
    # tabulate on a grid of deltas and take the upper envelope (w is nondecreasing)
    grid = np.concatenate([[0.0], np.geomspace(1e-12, umax, 1200)])
    table = window_modulus(variant, umax, grid)
    table = np.maximum.accumulate(table)

    def w(d):
        d = np.asarray(d, dtype=float)
        idx = np.searchsorted(grid, d, side="left")
        idx = np.clip(idx, 0, len(grid) - 1)
        return table[idx]

    return w, "sampled window sup"


def construct_velocity(t, x, s, y, v, variant: ModelVariant = ORIGINAL):
    """The comparison velocity nu built from (t, x), (s, y) and v by case analysis."""
    t, x, s, y, v = (np.asarray(a, dtype=float) for a in (t, x, s, y, v))
    phi_tx = np.asarray(eval_phi(t, x, variant))
    phi_sy = np.asarray(eval_phi(s, y, variant))
    on_tx = t == x
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = np.where(phi_tx <= phi_sy, v, v * phi_sy / phi_tx)
    nu = np.where(on_tx, 0.0, nu)
    return nu


def modulus_condition_check(pairs, v_samples, r: float, variant: ModelVariant = ORIGINAL,
                            T: float = DEFAULT_HORIZON, tol: float = 1e-12) -> ModulusReport:
    """Check |nu - v| <= 2(1+|v|+L) w(delta) and L(s,y,nu) <= L + 2(1+|v|+L) w(delta).

    ``pairs`` is an (N, 4) array of (t, x, s, y) with delta = |t-s| + |x-y|,
    ``v_samples`` holds velocities with L(t, x, v) finite.
    """
    T = check_horizon(T)
    pairs = np.asarray(pairs, dtype=float)
    t, x, s, y = pairs.T
    v = np.asarray(v_samples, dtype=float)
    lag = np.asarray(eval_lagrangian(t, x, v, variant, T))
    if not np.all(np.isfinite(lag)):
        raise ValueError("every v sample must have finite L(t, x, v)")
    umax = T + r
    gaps = np.concatenate([np.abs(t - x), np.abs(s - y)])
    if np.any(gaps > umax + 1e-12):
        raise ValueError("pairs leave the band |t - x| <= T + r")
    w, label = _modulus_factory(variant, umax)
    delta = np.abs(t - s) + np.abs(x - y)
    nu = construct_velocity(t, x, s, y, v, variant)
    bound = 2.0 * (1.0 + np.abs(v) + lag) * w(delta)
    slack_speed = bound - np.abs(nu - v)
    slack_cost = lag + bound - np.asarray(eval_lagrangian(s, y, nu, variant, T))
    allow = tol * (1.0 + np.abs(lag) + bound)
    bad = (slack_speed < -allow) | (slack_cost < -allow)
    first = None
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        first = (float(t[i]), float(x[i]), float(s[i]), float(y[i]), float(v[i]))
    return ModulusReport(len(t), int(np.count_nonzero(bad)), float(np.min(slack_speed)),
                         float(np.min(slack_cost)), first, label)


# --------------------------------------------------------- monotone approximation

@dataclass(frozen=True)
class MonotoneReport:
    checks: int
    violations: int
    first_violation: tuple | None


def monotone_family_check(t, x, p, v, n_max: int, T: float = DEFAULT_HORIZON) -> MonotoneReport:
    """Check sigma_n, phi_n, H_n decrease and L_n increases in n, with H <= H_n, L_n <= L.

    Runs over the battery (t, x, p, v) for n = 1 .. n_max.
    """
    from .model import ORIGINAL as orig, approx

    T = check_horizon(T)
    t, x, p, v = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, x, p, v)))
    z = np.abs(t - x)
    checks = 0
    first = None
    violations = 0

    def tally(name, n, ok):
        nonlocal checks, first, violations
        checks += ok.size
        bad = ~ok
        if np.any(bad):
            violations += int(np.count_nonzero(bad))
            if first is None:
                i = int(np.flatnonzero(bad.ravel())[0])
                first = (name, n, float(t.ravel()[i]), float(x.ravel()[i]))

    h_lim = np.asarray(eval_hamiltonian(t, x, p, orig))
    l_lim = np.asarray(eval_lagrangian(t, x, v, orig, T))
    prev = None
    for n in range(1, n_max + 1):
        var = approx(n)
        cur = {
            "sigma": np.asarray(sigma_n(z, n)),
            "phi": np.asarray(eval_phi(t, x, var)),
            "H": np.asarray(eval_hamiltonian(t, x, p, var)),
            "L": np.asarray(eval_lagrangian(t, x, v, var, T)),
        }
        tally("H>=H_lim", n, cur["H"] >= h_lim)
        tally("L<=L_lim", n, cur["L"] <= l_lim)
        if prev is not None:
            tally("sigma", n, cur["sigma"] <= prev["sigma"])
            tally("phi", n, cur["phi"] <= prev["phi"])
            tally("H", n, cur["H"] <= prev["H"])
            tally("L", n, prev["L"] <= cur["L"])
        prev = cur
    return MonotoneReport(checks, violations, first)
