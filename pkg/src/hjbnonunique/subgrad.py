"""Numerical regular subdifferentials and pointwise HJB residuals.

A costate c belongs to the regular subdifferential of f at z when
liminf (f(z + tau e) - f(z) - tau c.e) / tau >= 0 for every direction e.
We probe a fixed fan of directions along a geometric ladder of radii and
call c refuted only when the quotient stays below -tol on the finest rungs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import (
    DEFAULT_HORIZON,
    ORIGINAL,
    Costate,
    ModelVariant,
    _branch_gradient,
    check_horizon,
    eval_hamiltonian,
    solution_field,
)

DEFAULT_RADII = tuple(10.0 ** -k for k in range(2, 9))  # 1e-2 ... 1e-8

REGIMES = ("Interior", "InitialTime", "FinalTime", "EmptySubdifferential")


@dataclass(frozen=True)
class DirectionalDerivative:
    value: float  # may be +-inf
    direction: tuple[float, float]
    radii: tuple[float, ...]
    quotients: tuple[float, ...]


def extended_field(f, T: float):
    """Wrap f(t, x) so points with t outside [0, T] evaluate to +inf."""

    def g(t, x):
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        out = np.full(t.shape, math.inf)
        ok = (t >= 0.0) & (t <= T)
        if np.any(ok):
            out[ok] = f(t[ok], x[ok])
        return out

    return g


def _unit(e):
    e = np.asarray(e, dtype=float)
    norm = float(np.hypot(e[0], e[1]))
    if norm == 0:
        raise ValueError("direction must be nonzero")
    return e / norm


def _quotients(f, z, e, radii):
    radii = np.asarray(radii, dtype=float)
    f0 = float(np.asarray(f(z[0], z[1])))
    if not math.isfinite(f0):
        raise ValueError(f"f is not finite at the base point {tuple(z)}")
    vals = np.asarray(f(z[0] + radii * e[0], z[1] + radii * e[1]), dtype=float)
    with np.errstate(invalid="ignore"):
        return (vals - f0) / radii


def _diverges(radii, q):
    # blow-up like tau^(-s), s >= 1/4, on the last three rungs
    tail_r, tail_q = radii[-3:], q[-3:]
    if not (np.all(tail_q > 0) or np.all(tail_q < 0)):
        return 0
    mag = np.abs(tail_q)
    if abs(mag[-1]) <= 10.0 or not np.all(np.diff(mag) > 0):
        return 0
    slope = np.polyfit(np.log(tail_r), np.log(mag), 1)[0]
    if slope <= -0.25:
        return 1 if tail_q[-1] > 0 else -1
    return 0


def directional_quotient(f, z, e, radii=DEFAULT_RADII) -> DirectionalDerivative:
    """One-sided directional derivative of f at z along the unit vector e.

    Returns +-inf when the quotients blow up algebraically, and +inf when
    f(z + tau e) is +inf on the finest rungs (e.g. leaving the time interval).
    Otherwise the limit is extrapolated from consecutive rungs.
    """
    e = _unit(e)
    z = np.asarray(z, dtype=float)
    radii = np.asarray(sorted(radii, reverse=True), dtype=float)
    if len(radii) < 3:
        raise ValueError("need at least three radii")
    q = _quotients(f, z, e, radii)
    meta = (tuple(float(c) for c in e), tuple(radii.tolist()), tuple(q.tolist()))
    if np.all(np.isposinf(q[-3:])):
        return DirectionalDerivative(math.inf, *meta)
    if not np.all(np.isfinite(q)):
        raise ValueError("f is infinite on part of the radius ladder only")
    sign = _diverges(radii, q)
    if sign:
        return DirectionalDerivative(sign * math.inf, *meta)
    # linear extrapolation in tau through consecutive rungs; keep the pair
    # where successive extrapolations agree best
    r0, r1 = radii[:-1], radii[1:]
    ext = (r0 * q[1:] - r1 * q[:-1]) / (r0 - r1)
    k = 1 + int(np.argmin(np.abs(np.diff(ext))))
    return DirectionalDerivative(float(ext[k]), *meta)


def default_directions(count: int = 32) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(count) / count
    fan = np.column_stack([np.cos(ang), np.sin(ang)])
    extra = np.array([[1, 2], [-1, -2], [1, -2], [-1, 2]], dtype=float) / math.sqrt(5.0)
    return np.vstack([fan, extra])


@dataclass(frozen=True)
class MembershipPlan:
    directions: np.ndarray = field(default_factory=default_directions)
    radii: tuple[float, ...] = DEFAULT_RADII
    tol: float = 1e-6
    persist: int = 3


@dataclass(frozen=True)
class MembershipVerdict:
    consistent: bool
    witness: tuple[tuple[float, float], float, float] | None = None  # (e, tau, quotient)


def subgradient_membership(f, z, candidate, plan: MembershipPlan | None = None) -> MembershipVerdict:
    """Test whether ``candidate`` is consistent with the regular subdifferential of f at z.

    A refutation needs the normalised excess to stay below -tol on the
    ``persist`` finest radii of one direction without decaying towards 0.
    """
    plan = plan or MembershipPlan()
    z = np.asarray(z, dtype=float)
    c = np.asarray(candidate, dtype=float)
    radii = np.asarray(sorted(plan.radii, reverse=True), dtype=float)
    dirs = np.asarray(plan.directions, dtype=float)
    dirs = dirs / np.hypot(dirs[:, 0], dirs[:, 1])[:, None]
    f0 = float(np.asarray(f(z[0], z[1])))
    if not math.isfinite(f0):
        raise ValueError(f"f is not finite at {tuple(z)}")
    tt = z[0] + radii[None, :] * dirs[:, :1]
    xx = z[1] + radii[None, :] * dirs[:, 1:]
    vals = np.asarray(f(tt, xx), dtype=float)
    lin = radii[None, :] * (dirs @ c)[:, None]
    with np.errstate(invalid="ignore"):
        excess = (vals - f0 - lin) / radii[None, :]
    tail = excess[:, -plan.persist:]
    # an excess that shrinks in proportion to tau is curvature, not a refutation
    refuted = np.all(tail < -plan.tol, axis=1) & (np.abs(tail[:, -1]) >= 0.5 * np.abs(tail[:, 0]))
    if not np.any(refuted):
        return MembershipVerdict(True)
    rows = np.flatnonzero(refuted)
    k = rows[int(np.argmin(tail[rows, -1]))]
    return MembershipVerdict(False, ((float(dirs[k, 0]), float(dirs[k, 1])),
                                     float(radii[-1]), float(excess[k, -1])))


def hjb_residual(t, x, costate, variant: ModelVariant = ORIGINAL) -> float:
    """-p_t + H(t, x, -p_x)."""
    p_t, p_x = costate
    return float(-p_t + eval_hamiltonian(t, x, -p_x, variant))


# ------------------------------------------------------------------ reports

@dataclass(frozen=True)
class ResidualReport:
    t: float
    x: float
    p_t: float
    p_x: float
    residual: float
    regime: str
    kind: str
    passed: bool
    witness: str = ""

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")

    @property
    def point(self):
        return (self.t, self.x)

    @property
    def costate(self):
        return Costate(self.p_t, self.p_x)

    def to_json(self) -> str:
        d = asdict(self)
        for k in ("p_t", "p_x", "residual"):
            if not math.isfinite(d[k]):
                d[k] = None
        return json.dumps(d)


def write_reports_jsonl(reports, path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


@dataclass(frozen=True)
class SamplePlan:
    smooth: int = 500
    near: int = 100
    boundary: int = 100
    kink: int = 50
    jump: int = 20
    region: tuple[float, float] = (-1.0, 2.0)
    margin: float = 0.05
    near_floor: float = 1e-4
    far_tol: float = 1e-9
    near_tol: float = 1e-6
    seed: int = 0


def kink_distance(which: str, t, x, T: float, n: int | None = None):
    """Horizontal distance from (t, x) to the non-smooth set of the solution."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    diag = np.abs(x - t)
    jump = np.abs(x - (2.0 * t - T))
    if which == "U":
        return diag
    if which == "V":
        return np.minimum(diag, jump)
    if which == "Vn":
        return jump
    raise ValueError(f"unknown solution {which!r}")


def _kink_lines(which: str, T: float):
    # (slope, intercept) of x = slope*t + intercept with empty subdifferential
    if which in ("U", "V"):
        return [(1.0, 0.0)]
    return [(2.0, -T)]


def _draw(rng, count, T, region, accept, interior=True):
    out = []
    while len(out) < count:
        m = 4 * (count - len(out)) + 16
        t = rng.uniform(0.0, T, m)
        x = rng.uniform(region[0], region[1], m)
        ok = accept(t, x)
        if interior:
            ok &= (t > 0) & (t < T)
        out.extend(zip(t[ok].tolist(), x[ok].tolist()))
    return out[:count]


def _interior_reports(which, f, variant, T, n, pts, tol, kind, mplan):
    reports = []
    for t, x in pts:
        c = _branch_gradient(which, t, x, T, n)
        r = hjb_residual(t, x, c, variant)
        verdict = subgradient_membership(f, (t, x), c, mplan)
        ok = abs(r) <= tol and verdict.consistent
        note = "" if verdict.consistent else f"gradient refuted: {verdict.witness}"
        if abs(r) > tol:
            note = (note + "; " if note else "") + f"|residual| {abs(r):.3e} > {tol:g}"
        reports.append(ResidualReport(t, x, c.p_t, c.p_x, r, "Interior", kind, ok, note))
    return reports


BOUNDARY_DIRECTIONS = {
    "InitialTime": [(1, 0), (0, 1), (0, -1), (1, 2), (1, -2)],
    "FinalTime": [(-1, 0), (0, 1), (0, -1), (-1, -2), (-1, 2)],
}


def _boundary_reports(which, f, variant, T, n, pts, tol):
    # The one-sided branch gradient g reproduces every admissible directional
    # derivative; admissible costates are (p_t, g_x) with p_t <= g_t at t = 0
    # and p_t >= g_t at t = T, so g is the extreme one for the residual sign.
    reports = []
    shifts = (0.0, 0.5, 5.0, 50.0)
    for t, x in pts:
        regime = "InitialTime" if t == 0.0 else "FinalTime"
        g = _branch_gradient(which, t, x, T, n)
        mismatch = []
        for e in BOUNDARY_DIRECTIONS[regime]:
            d = directional_quotient(f, (t, x), e)
            u = _unit(e)
            pred = g.p_t * u[0] + g.p_x * u[1]
            if not abs(d.value - pred) <= 1e-6 * max(1.0, abs(pred)):
                mismatch.append((e, d.value, pred))
        sgn = -1.0 if regime == "InitialTime" else 1.0
        res = [hjb_residual(t, x, (g.p_t + sgn * s, g.p_x), variant) for s in shifts]
        if regime == "InitialTime":
            ok = min(res) >= -tol
            worst = min(res)
        else:
            ok = max(res) <= tol
            worst = max(res)
        note = f"directional derivative mismatch: {mismatch}" if mismatch else ""
        if not ok:
            note = (note + "; " if note else "") + f"residual sign violated: {worst:.3e}"
        reports.append(ResidualReport(t, x, g.p_t, g.p_x, worst, regime, "boundary",
                                      ok and not mismatch, note))
    return reports


def _kink_candidates(which, t, x, T, n):
    grid = (-20.0, -5.0, -1.0, 0.0, 1.0, 5.0, 20.0)
    cands = [(a, b) for a in grid for b in grid]
    for dx in (-1e-3, 1e-3):
        c = _branch_gradient(which, min(max(t, 0.0), T), x + dx, T, n)
        if c is not None:
            cands.append(tuple(c))
    return cands


def _kink_reports(which, f, variant, T, n, pts, mplan):
    reports = []
    for t, x in pts:
        hardest = None
        all_refuted = True
        for c in _kink_candidates(which, t, x, T, n):
            verdict = subgradient_membership(f, (t, x), c, mplan)
            if verdict.consistent:
                all_refuted = False
                hardest = (c, None)
                break
            if hardest is None or verdict.witness[2] > hardest[1][2]:
                hardest = (c, verdict.witness)
        c, wit = hardest
        note = f"hardest refutation {wit}" if all_refuted else f"candidate {c} not refuted"
        reports.append(ResidualReport(t, x, c[0], c[1], math.nan, "EmptySubdifferential",
                                      "kink", all_refuted, note))
    return reports


def _jump_reports(f, variant, T, pts, tol, mplan):
    # On the jump line of V the subdifferential is the ray g + mu*(2, -1).
    reports = []
    for t, x in pts:
        psi = math.exp(-2.0 * math.sqrt(t - x)) / math.sqrt(t - x)
        worst, ok, note = 0.0, True, ""
        for mu in (0.0, 0.1, 1.0, 10.0):
            c = (psi + 2.0 * mu, -psi - mu)
            r = hjb_residual(t, x, c, variant)
            verdict = subgradient_membership(f, (t, x), c, mplan)
            if abs(r) > abs(worst):
                worst = r
            if abs(r) > tol or not verdict.consistent:
                ok = False
                note = f"mu={mu}: residual {r}, membership {verdict}"
        reports.append(ResidualReport(t, x, psi, -psi, worst, "Interior", "jump", ok, note))
    return reports


def verify_lsc_solution(which: str, variant: ModelVariant = ORIGINAL,
                        plan: SamplePlan | None = None, T: float = DEFAULT_HORIZON,
                        n: int | None = None,
                        mplan: MembershipPlan | None = None) -> list[ResidualReport]:
    """Residual reports for U, V or V_n over smooth, near-kink, boundary and kink samples."""
    T = check_horizon(T)
    plan = plan or SamplePlan()
    mplan = mplan or MembershipPlan()
    if which == "Vn" and n is None:
        raise ValueError("Vn needs n")
    rng = np.random.default_rng(plan.seed)
    f = extended_field(solution_field(which, T, n), T)
    dist = lambda t, x: kink_distance(which, t, x, T, n)  # noqa: E731

    smooth = _draw(rng, plan.smooth, T, plan.region, lambda t, x: dist(t, x) >= plan.margin)
    near = _draw(rng, plan.near, T, plan.region,
                 lambda t, x: (dist(t, x) >= plan.near_floor) & (dist(t, x) < plan.margin))

    boundary = []
    for k in range(plan.boundary):
        tb = 0.0 if k % 2 == 0 else T
        while True:
            xb = float(rng.uniform(*plan.region))
            if dist(tb, xb) >= plan.margin:
                boundary.append((tb, xb))
                break

    kinks = []
    lines = _kink_lines(which, T)
    for k in range(plan.kink):
        slope, icpt = lines[k % len(lines)]
        while True:
            # endpoints included so t = 0 and t = T kinks get probed too
            tk = 0.0 if k == 0 else (T if k == 1 else float(rng.uniform(0.0, T)))
            xk = slope * tk + icpt
            if plan.region[0] <= xk <= plan.region[1] or k < 2:
                kinks.append((tk, xk))
                break

    reports = []
    reports += _interior_reports(which, f, variant, T, n, smooth, plan.far_tol, "smooth", mplan)
    reports += _interior_reports(which, f, variant, T, n, near, plan.near_tol, "near", mplan)
    reports += _boundary_reports(which, f, variant, T, n, boundary, plan.far_tol)
    reports += _kink_reports(which, f, variant, T, n, kinks, mplan)
    if which == "V" and plan.jump:
        # interior of the jump line, away from its corner at t = T
        tj = rng.uniform(plan.margin, T - plan.margin, plan.jump)
        reports += _jump_reports(f, variant, T, [(t, 2.0 * t - T) for t in tj.tolist()],
                                 plan.far_tol, mplan)
    return reports


def summarize_reports(reports) -> dict:
    by_kind: dict[str, list[int]] = {}
    for r in reports:
        tot = by_kind.setdefault(r.kind, [0, 0])
        tot[0] += 1
        tot[1] += int(r.passed)
    return {k: {"count": v[0], "passed": v[1]} for k, v in by_kind.items()}
