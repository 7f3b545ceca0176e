"""Closed-form evaluators for the nonuniqueness example.

Every function here is pure and accepts scalars or numpy arrays (broadcast
together). Scalar inputs give Python floats back.

Extended reals are plain floats: ``math.inf`` stands for +infinity and NaN
never appears in a result. There is no -infinity; every Lagrangian is proper.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

INF = math.inf
DEFAULT_HORIZON = 1.0

# Cases of V_n that share a closed boundary must agree to this level.
VN_OVERLAP_TOL = 1e-9


class CaseMismatchError(ArithmeticError):
    """Two piecewise formulas disagree on a shared boundary."""


@dataclass(frozen=True)
class ModelVariant:
    """Selects which phi family builds H and L.

    ``original`` uses sqrt|t-x| exp(2 sqrt|t-x|), ``hat`` the Lipschitz
    |t-x| exp(2|t-x|), and ``approx`` the n-th smoothed approximation.
    """

    kind: str = "original"
    n: int | None = None

    def __post_init__(self):
        if self.kind not in ("original", "hat", "approx"):
            raise ValueError(f"unknown variant kind {self.kind!r}")
        if self.kind == "approx":
            if self.n is None or int(self.n) != self.n or self.n < 1:
                raise ValueError("approx variant needs an integer n >= 1")
        elif self.n is not None:
            raise ValueError(f"variant {self.kind!r} takes no n")

    @classmethod
    def parse(cls, text: str) -> "ModelVariant":
        """Parse ``original``, ``hat`` or ``approx:<n>``."""
        text = text.strip().lower()
        m = re.fullmatch(r"approx[:(](\d+)\)?", text)
        if m:
            return cls("approx", int(m.group(1)))
        return cls(text)

    @property
    def has_diagonal(self) -> bool:
        # H and L get a separate branch on t == x
        return self.kind != "approx"

    def __str__(self):
        return f"approx:{self.n}" if self.kind == "approx" else self.kind


ORIGINAL = ModelVariant("original")
HAT = ModelVariant("hat")


def approx(n: int) -> ModelVariant:
    return ModelVariant("approx", n)


class SpacetimePoint(NamedTuple):
    t: float
    x: float


class Costate(NamedTuple):
    p_t: float
    p_x: float


def check_horizon(T: float) -> float:
    T = float(T)
    if not T > 0 or not math.isfinite(T):
        raise ValueError(f"horizon must be a positive finite number, got {T}")
    return T


def _ret(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


def _check_times(t, T):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > T):
        raise ValueError(f"times must lie in [0, {T}]")
    return t


# ---------------------------------------------------------------- phi family

def sigma_n(z, n: int):
    """sqrt(z) for z >= 1/n, frozen at 1/sqrt(n) below."""
    z = np.asarray(z, dtype=float)
    # max() before sqrt keeps sigma_n >= sigma_{n+1} exact in floating point
    return _ret(np.sqrt(np.maximum(z, 1.0 / n)))


def phi_of_gap(u, variant: ModelVariant = ORIGINAL):
    """phi as a function of u = |t - x| >= 0."""
    u = np.asarray(u, dtype=float)
    if variant.kind == "original":
        s = np.sqrt(u)
        return _ret(s * np.exp(2.0 * s))
    if variant.kind == "hat":
        return _ret(u * np.exp(2.0 * u))
    s = np.sqrt(np.maximum(u, 1.0 / variant.n))
    return _ret(s * np.exp(2.0 * s))


def eval_phi(t, x, variant: ModelVariant = ORIGINAL):
    t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
    return phi_of_gap(np.abs(t - x), variant)


def inv_phi_of_gap(u, variant: ModelVariant = ORIGINAL):
    """1/phi(u); +inf where phi vanishes (u == 0 for original and hat)."""
    with np.errstate(divide="ignore"):
        return _ret(1.0 / np.asarray(phi_of_gap(u, variant)))


# ------------------------------------------------------- Hamiltonian / Lagrangian

def eval_hamiltonian(t, x, p, variant: ModelVariant = ORIGINAL):
    t, x, p = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, x, p)))
    u = np.abs(t - x)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        h = np.maximum(0.0, 2.0 * np.abs(p) - 1.0 / np.asarray(phi_of_gap(u, variant)))
    if variant.has_diagonal:
        h = np.where(t == x, 0.0, h)
    return _ret(h)


def eval_lagrangian(t, x, v, variant: ModelVariant = ORIGINAL, T: float = DEFAULT_HORIZON):
    """L(t, x, v) with +inf outside the effective domain.

    Times outside [0, T] are clamped, i.e. L(t,.,.) = L(0,.,.) for t < 0 and
    L(T,.,.) for t > T.
    """
    T = check_horizon(T)
    t, x, v = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, x, v)))
    t = np.clip(t, 0.0, T)
    av = np.abs(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        cost = av / (2.0 * np.asarray(phi_of_gap(np.abs(t - x), variant)))
    out = np.where(av <= 2.0, cost, INF)
    if variant.has_diagonal:
        on_diag = t == x
        out = np.where(on_diag, np.where(v == 0.0, 0.0, INF), out)
    return _ret(out)


# ------------------------------------------------------------ terminal cost, U, V

def eval_terminal_g(x, T: float = DEFAULT_HORIZON):
    T = check_horizon(T)
    x = np.asarray(x, dtype=float)
    d = np.maximum(x - T, 0.0)
    return _ret(np.where(x >= T, np.expm1(-2.0 * np.sqrt(d)), 1.0))


def eval_solution_U(t, x, T: float = DEFAULT_HORIZON):
    T = check_horizon(T)
    t = _check_times(t, T)
    t, x = np.broadcast_arrays(t, np.asarray(x, dtype=float))
    d = np.maximum(x - t, 0.0)
    return _ret(np.where(x >= t, np.expm1(-2.0 * np.sqrt(d)), 1.0))


def eval_solution_V(t, x, T: float = DEFAULT_HORIZON):
    T = check_horizon(T)
    t = _check_times(t, T)
    t, x = np.broadcast_arrays(t, np.asarray(x, dtype=float))
    upper = np.expm1(-2.0 * np.sqrt(np.maximum(x - t, 0.0)))
    strip = -np.expm1(-2.0 * np.sqrt(np.maximum(t - x, 0.0)))
    out = np.where(x >= t, upper, np.where(x >= 2.0 * t - T, strip, 1.0))
    return _ret(out)


# ----------------------------------------------------------------------- V_n

def _vn_cases(n: int, t, x, T):
    """Formulas (a)-(e) for V_n on x >= 2t - T, evaluated everywhere."""
    rn = math.sqrt(n)
    kappa = math.exp(-2.0 / rn)
    d = t - x
    w = T - 2.0 * t + x
    sd = np.sqrt(np.maximum(d, 0.0))
    sw = np.sqrt(np.maximum(w, 0.0))
    se = np.sqrt(np.maximum(-d, 0.0))
    return {
        "a": d * rn * kappa + (1.0 + 1.0 / rn) * kappa - 1.0,
        "b": np.exp(-2.0 * sw) + (T - t) * rn * kappa - 1.0,
        "c": 2.0 * (1.0 + 1.0 / rn) * kappa - np.exp(-2.0 * sd) - 1.0,
        "d": (1.0 + rn * w + 1.0 / rn) * kappa + np.exp(-2.0 * sw) - np.exp(-2.0 * sd) - 1.0,
        "e": np.expm1(-2.0 * se),
    }


def _vn_conditions(n: int, t, x, T):
    inv = 1.0 / n
    d = t - x
    w = T - 2.0 * t + x
    return {
        "a": (np.abs(d) <= inv) & (w >= inv),
        "b": (np.abs(d) <= inv) & (w <= inv),
        "c": (d >= inv) & (w >= inv),
        "d": (d >= inv) & (w <= inv),
        "e": -d >= inv,
    }


def vn_case_labels(n: int, t, x, T: float = DEFAULT_HORIZON):
    """Label of the dispatched case per point: 'a'..'e', or 'const' for x < 2t-T."""
    t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
    cond = _vn_conditions(n, t, x, T)
    labels = np.full(t.shape, "const", dtype=object)
    upper = x >= 2.0 * t - T
    # first matching case wins; order only matters on shared boundaries
    for name in "edcba":
        labels = np.where(upper & cond[name], name, labels)
    return labels if labels.ndim else str(labels)


def eval_Vn(n: int, t, x, T: float = DEFAULT_HORIZON, check_overlaps: bool = __debug__):
    """Closed form of V_n, dispatched over cases (a)-(e) plus the constant region.

    With ``check_overlaps`` every point that satisfies more than one case's
    closed condition is evaluated with all of them, and a disagreement above
    ``VN_OVERLAP_TOL`` raises ``CaseMismatchError``.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    n = int(n)
    T = check_horizon(T)
    t = _check_times(t, T)
    t, x = np.broadcast_arrays(t, np.asarray(x, dtype=float))
    vals = _vn_cases(n, t, x, T)
    cond = _vn_conditions(n, t, x, T)
    upper = x >= 2.0 * t - T
    out = np.ones(t.shape)
    done = np.zeros(t.shape, dtype=bool)
    for name in "abcde":
        sel = upper & cond[name] & ~done
        out = np.where(sel, vals[name], out)
        done |= sel
    if check_overlaps:
        for name in "abcde":
            sel = upper & cond[name]
            bad = sel & (np.abs(vals[name] - out) > VN_OVERLAP_TOL)
            if np.any(bad):
                i = np.argwhere(bad)[0]
                i = tuple(i)
                raise CaseMismatchError(
                    f"V_{n} case {name} disagrees at t={t[i]!r}, x={x[i]!r}: "
                    f"{vals[name][i]!r} vs {out[i]!r}"
                )
    return _ret(out)


# ---------------------------------------------------------------- gradients

def _psi(u):
    # 1/phi for the original family, u > 0
    s = math.sqrt(u)
    return math.exp(-2.0 * s) / s


def _branch_gradient(which: str, t: float, x: float, T: float, n: int | None = None):
    """Gradient of the closed-form branch active at (t, x), or None on kinks.

    Valid up to and including t = 0 and t = T, where it is the one-sided
    gradient of the branch formula.
    """
    if which == "U":
        if x > t:
            psi = _psi(x - t)
            return Costate(psi, -psi)
        if x < t:
            return Costate(0.0, 0.0)
        return None
    if which == "V":
        if x > t:
            psi = _psi(x - t)
            return Costate(psi, -psi)
        if x == t or x == 2.0 * t - T:
            return None
        if x > 2.0 * t - T:
            psi = _psi(t - x)
            return Costate(psi, -psi)
        return Costate(0.0, 0.0)
    if which == "Vn":
        if n is None:
            raise ValueError("Vn gradient needs n")
        if x == 2.0 * t - T:
            return None
        if x < 2.0 * t - T:
            return Costate(0.0, 0.0)
        rn = math.sqrt(n)
        c = rn * math.exp(-2.0 / rn)  # 1/phi_n inside the frozen band
        d, w = t - x, T - 2.0 * t + x
        label = vn_case_labels(n, t, x, T)
        if label == "e":
            psi = _psi(-d)
            return Costate(psi, -psi)
        if label == "a":
            return Costate(c, -c)
        if label == "c":
            psi = _psi(d)
            return Costate(psi, -psi)
        pw = _psi(w)
        if label == "b":
            return Costate(2.0 * pw - c, -pw)
        pd = _psi(d)
        return Costate(-2.0 * c + 2.0 * pw + pd, c - pw - pd)
    raise ValueError(f"unknown solution {which!r}")


def analytic_gradient(which: str, t: float, x: float, T: float = DEFAULT_HORIZON,
                      n: int | None = None) -> Costate | None:
    """Unique gradient of U, V or V_n at an interior point; None on kink sets.

    Raises ValueError for t outside the open interval (0, T): the
    subdifferential there is a set and is handled by ``subgrad``.
    """
    T = check_horizon(T)
    if not 0.0 < t < T:
        raise ValueError(f"analytic_gradient needs 0 < t < T, got t={t}")
    return _branch_gradient(which, float(t), float(x), T, n)


def solution_field(which: str, T: float = DEFAULT_HORIZON, n: int | None = None):
    """Return f(t, x) for U, V or V_n."""
    if which == "U":
        return lambda t, x: eval_solution_U(t, x, T)
    if which == "V":
        return lambda t, x: eval_solution_V(t, x, T)
    if which == "Vn":
        if n is None:
            raise ValueError("Vn needs n")
        return lambda t, x: eval_Vn(n, t, x, T)
    raise ValueError(f"unknown solution {which!r}")


# --------------------------------------------------------------- trajectories

@dataclass(frozen=True)
class Trajectory:
    """Sampled trajectory. ``samples`` rows are (t, x, v); v is the velocity
    held on [t_k, t_{k+1}] (the last row repeats the final velocity)."""

    t0: float
    x0: float
    samples: np.ndarray
    kind: str = "custom"

    SPEED_TOL = 1e-9

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != 3 or len(s) < 2:
            raise ValueError("samples must be an (N, 3) array with N >= 2")
        if self.kind not in ("fast_ray", "constant", "custom"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        dt = np.diff(s[:, 0])
        if np.any(dt <= 0):
            raise ValueError("sample times must be strictly increasing")
        speed = np.abs(np.diff(s[:, 1])) / dt
        if np.any(speed > 2.0 + self.SPEED_TOL):
            raise ValueError("trajectory exceeds the speed bound 2")
        object.__setattr__(self, "samples", s)

    @property
    def t(self):
        return self.samples[:, 0]

    @property
    def x(self):
        return self.samples[:, 1]

    @property
    def v(self):
        return self.samples[:, 2]


def optimal_trajectory(t0: float, x0: float, T: float = DEFAULT_HORIZON,
                       num: int = 101) -> Trajectory:
    """Optimal trajectory of the value function V from (t0, x0)."""
    T = check_horizon(T)
    if not 0.0 <= t0 < T:
        raise ValueError(f"need 0 <= t0 < T, got t0={t0}")
    ts = np.linspace(t0, T, num)
    if x0 >= 2.0 * t0 - T:
        xs = 2.0 * (ts - t0) + x0
        vs = np.full(num, 2.0)
        kind = "fast_ray"
    else:
        xs = np.full(num, float(x0))
        vs = np.zeros(num)
        kind = "constant"
    return Trajectory(float(t0), float(x0), np.column_stack([ts, xs, vs]), kind)
