import json
import math

import numpy as np
import pytest

from hjbnonunique.model import HAT, ORIGINAL, analytic_gradient, approx, solution_field
from hjbnonunique.subgrad import (
    REGIMES,
    MembershipPlan,
    ResidualReport,
    SamplePlan,
    default_directions,
    directional_quotient,
    extended_field,
    hjb_residual,
    kink_distance,
    subgradient_membership,
    summarize_reports,
    verify_lsc_solution,
    write_reports_jsonl,
)

T = 1.0
U = extended_field(solution_field("U", T), T)
V = extended_field(solution_field("V", T), T)
PSI_025 = math.exp(-1.0) / 0.5  # 1/phi at gap 0.25


# ----------------------------------------------------- directional quotients

def test_quotient_examples():
    d = directional_quotient(U, (0.5, 0.5), (0, 1))
    assert d.value == -math.inf
    # the quotients follow -2/sqrt(tau)
    r = np.array(d.radii)
    assert np.allclose(np.array(d.quotients)[-3:] * np.sqrt(r[-3:]), -2.0, rtol=1e-3)
    d = directional_quotient(U, (0.0, 0.5), (1, 0))
    assert d.value == pytest.approx(math.exp(-math.sqrt(2)) / math.sqrt(0.5), abs=1e-6)
    assert d.value == pytest.approx(0.3438029, abs=1e-4)
    d = directional_quotient(V, (0.5, 0.25), (1, 2))
    # the direction is normalised, so the quotient is -psi / |(1, 2)|
    assert d.value * math.sqrt(5) == pytest.approx(-PSI_025, abs=1e-6)
    assert PSI_025 == pytest.approx(0.7357589, abs=1e-7)


def test_quotient_leaving_time_interval_is_plus_inf():
    assert directional_quotient(U, (1.0, 0.5), (1, 0)).value == math.inf
    assert directional_quotient(U, (0.0, 0.5), (-1, 0)).value == math.inf


def test_quotient_errors():
    with pytest.raises(ValueError):
        directional_quotient(U, (1.5, 0.0), (1, 0))
    with pytest.raises(ValueError):
        directional_quotient(U, (0.5, 0.0), (0, 0))
    with pytest.raises(ValueError):
        directional_quotient(U, (0.5, 0.0), (1, 0), radii=(1e-2, 1e-3))


def test_quotient_radii_strictly_decreasing():
    d = directional_quotient(U, (0.3, 0.9), (1, 1), radii=(1e-5, 1e-2, 1e-3, 1e-4))
    assert list(d.radii) == sorted(d.radii, reverse=True)


# ----------------------------------------------------------------- membership

def test_membership_examples():
    assert subgradient_membership(U, (0.5, 0.75), (PSI_025, -PSI_025)).consistent
    v = subgradient_membership(U, (0.5, 0.75), (0.0, 0.0))
    assert not v.consistent
    e, tau, q = v.witness
    assert q < 0 and tau == 1e-8
    # the quotient along e is below the candidate's linear term
    assert directional_quotient(U, (0.5, 0.75), e).value < 0
    for cand in [(0, 0), (1, -1), (-5, 3), (100, 100)]:
        assert not subgradient_membership(U, (0.5, 0.5), cand).consistent


def test_membership_of_flat_region():
    assert subgradient_membership(U, (0.5, 0.25), (0.0, 0.0)).consistent
    assert not subgradient_membership(U, (0.5, 0.25), (0.1, 0.0)).consistent


def test_membership_curvature_is_not_refutation():
    # grad plus a small offset is refuted; grad itself survives curvature terms
    g = analytic_gradient("V", 0.5, 0.1)
    assert subgradient_membership(V, (0.5, 0.1), g).consistent
    assert not subgradient_membership(V, (0.5, 0.1), (g.p_t + 1e-4, g.p_x)).consistent


def test_jump_line_subdifferential_is_a_ray():
    z = (0.5, 0.0)
    # left branch gradient at the jump line, plus multiples of the normal (2, -1)
    g = (math.exp(-2 * math.sqrt(0.5)) / math.sqrt(0.5),) * 2
    g = (g[0], -g[1])
    for mu in (0.0, 0.5, 10.0, 1e3):
        c = (g[0] + 2 * mu, g[1] - mu)
        assert subgradient_membership(V, z, c).consistent
        assert hjb_residual(*z, c) == pytest.approx(0.0, abs=1e-9)
    assert not subgradient_membership(V, z, (g[0] - 2.0, g[1] + 1.0)).consistent


# ------------------------------------------------------------------- residual

def test_residual_examples():
    assert hjb_residual(0.5, 0.75, (PSI_025, -PSI_025)) == pytest.approx(0.0, abs=1e-12)
    assert hjb_residual(0.5, 0.25, (0.0, 0.0)) == 0.0
    assert hjb_residual(0.4, 0.4, (-1.0, 3.0)) == 1.0
    # Hat on the same costate off the diagonal leaves a residual
    assert abs(hjb_residual(0.5, 0.75, (PSI_025, -PSI_025), HAT)) > 1e-3


def test_report_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        ResidualReport(0.5, 0.5, 0, 0, 0, "Sideways", "smooth", True)
    reps = [ResidualReport(0.5, 0.5, math.nan, math.nan, math.nan, "EmptySubdifferential",
                           "kink", True, "refuted all"),
            ResidualReport(0.2, 0.9, 1.0, -1.0, 1e-12, "Interior", "smooth", True)]
    path = tmp_path / "r.jsonl"
    write_reports_jsonl(reps, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert first["residual"] is None and first["regime"] == "EmptySubdifferential"
    second = json.loads(lines[1])
    assert ResidualReport(**second) == reps[1]


# --------------------------------------------------------------- full checks

SMALL = SamplePlan(smooth=120, near=40, boundary=40, kink=20, jump=10, seed=3)


@pytest.fixture(scope="module")
def u_reports():
    return verify_lsc_solution("U", ORIGINAL, SMALL)


@pytest.fixture(scope="module")
def v_reports():
    return verify_lsc_solution("V", ORIGINAL, SMALL)


def _regime_ok(r):
    if r.regime == "EmptySubdifferential":
        return True
    return r.regime == {0.0: "InitialTime", T: "FinalTime"}.get(r.t, "Interior")


@pytest.mark.parametrize("name", ["u", "v"])
def test_original_solutions_pass(name, u_reports, v_reports):
    reps = u_reports if name == "u" else v_reports
    bad = [r for r in reps if not r.passed]
    assert not bad, bad[:3]
    kinds = summarize_reports(reps)
    assert {"smooth", "near", "boundary", "kink"} <= set(kinds)
    if name == "v":
        assert kinds["jump"]["count"] == SMALL.jump


def test_regimes_are_exhaustive(u_reports, v_reports):
    for r in u_reports + v_reports:
        assert r.regime in REGIMES
        assert _regime_ok(r), r


def test_tolerance_split(u_reports):
    for r in u_reports:
        if r.kind == "smooth":
            assert abs(r.residual) <= 1e-9
        elif r.kind == "near":
            assert abs(r.residual) <= 1e-6


def test_vn_solves_its_own_equation():
    reps = verify_lsc_solution("Vn", approx(10), SMALL, n=10)
    assert all(r.passed for r in reps)


def test_hat_is_a_negative_control():
    reps = verify_lsc_solution("U", HAT, SMALL)
    assert any(not r.passed for r in reps)
    assert all(r.witness for r in reps if not r.passed)


def test_wpon_consistency():
    # every unrefuted candidate lies below the directional derivative
    rng = np.random.default_rng(11)
    dirs = default_directions(16)
    for which, f in (("U", U), ("V", V)):
        pts = []
        while len(pts) < 25:
            t, x = rng.uniform(0.05, 0.95), rng.uniform(-1, 2)
            if kink_distance(which, t, x, T) >= 0.05:
                pts.append((t, x))
        pts.append((0.5, 0.0) if which == "V" else (0.5, 0.2))
        for z in pts:
            g = analytic_gradient(which, *z) or (math.exp(-math.sqrt(2)) / math.sqrt(0.5) + 2.0,
                                                  -math.exp(-math.sqrt(2)) / math.sqrt(0.5) - 1.0)
            assert subgradient_membership(f, z, g).consistent
            for e in dirs:
                d = directional_quotient(f, z, e)
                if math.isfinite(d.value):
                    assert d.value >= g[0] * e[0] + g[1] * e[1] - 1e-6


def test_sample_plan_respects_margin():
    plan = SamplePlan(smooth=50, near=20, boundary=0, kink=0, jump=0, seed=1)
    reps = verify_lsc_solution("U", ORIGINAL, plan, mplan=MembershipPlan())
    for r in reps:
        d = kink_distance("U", r.t, r.x, T)
        if r.kind == "smooth":
            assert d >= plan.margin
        else:
            assert plan.near_floor <= d < plan.margin
