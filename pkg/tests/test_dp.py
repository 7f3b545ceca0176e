import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from hjbnonunique import records
from hjbnonunique.dp import (
    GridSpec,
    QuadratureError,
    ValueField,
    convergence_study,
    evaluate_bolza_objective,
    extract_trajectory,
    field_errors,
    gap_integral,
    segment_cost,
    solve_dp,
    strip_points,
)
from hjbnonunique.model import (
    HAT,
    ORIGINAL,
    Trajectory,
    approx,
    eval_lagrangian,
    eval_phi,
    eval_solution_U,
    eval_solution_V,
    eval_terminal_g,
    optimal_trajectory,
)

T = 1.0


@pytest.fixture(scope="module")
def small_grid():
    return GridSpec.aligned(41, 21)


@pytest.fixture(scope="module")
def small_field(small_grid):
    return solve_dp(small_grid)


def _quad_L(t0, t1, x_of_t, v, var):
    # independent oracle: integrate L(t, x(t), v) in t with scipy
    f = lambda t: float(eval_lagrangian(t, x_of_t(t), v, var, 10.0))  # noqa: E731
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(f, t0, t1, limit=400, epsabs=1e-13, epsrel=1e-12)
    assert err <= 1e-10 * max(1.0, abs(val))
    return val


# -------------------------------------------------------------- objectives

def test_objective_examples():
    assert evaluate_bolza_objective(optimal_trajectory(0.0, 0.0)) == pytest.approx(0.0, abs=1e-15)
    ray = optimal_trajectory(0.5, 0.25)
    assert evaluate_bolza_objective(ray) == pytest.approx(1 - math.exp(-1), abs=1e-15)
    assert evaluate_bolza_objective(optimal_trajectory(0.9, 0.0)) == 1.0


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 0.999), st.floats(-1, 2))
def test_fast_ray_objective_identity(t0, x0):
    if x0 < 2 * t0 - T:
        return
    tr = optimal_trajectory(t0, x0)
    assert evaluate_bolza_objective(tr) == pytest.approx(eval_solution_V(t0, x0), abs=1e-10)


@pytest.mark.parametrize("var", [ORIGINAL, approx(10), HAT])
def test_gap_integral_matches_quadrature(var):
    f = lambda y: 1.0 / float(eval_phi(0.0, -y, var))  # noqa: E731  phi(|y|)
    for a, b in [(0.1, 0.9), (0.02, 1.7), (-0.8, -0.05)]:
        want, _ = integrate.quad(f, a, b, epsabs=1e-14, epsrel=1e-13)
        assert gap_integral(a, b, var) == pytest.approx(want, rel=1e-10)
    if var == HAT:
        assert gap_integral(-0.1, 0.2, var) == math.inf
    else:
        want = sum(integrate.quad(f, a, b, epsabs=1e-14, epsrel=1e-12)[0] for a, b in [(-0.1, 0), (0, 0.2)])
        assert gap_integral(-0.1, 0.2, var) == pytest.approx(want, rel=1e-8)


@pytest.mark.parametrize("var", [ORIGINAL, approx(10)])
def test_custom_objective_matches_independent_quadrature(var):
    # a kinked path that crosses the diagonal twice
    ts = np.array([0.0, 0.3, 0.6, 1.0])
    xs = np.array([0.5, 0.2, 0.7, 1.1])
    vs = np.append(np.diff(xs) / np.diff(ts), 0.0)
    tr = Trajectory(0.0, 0.5, np.column_stack([ts, xs, vs]))
    want = float(eval_terminal_g(1.1))
    for k in range(3):
        x_of_t = lambda t, k=k: xs[k] + vs[k] * (t - ts[k])  # noqa: E731
        # split at the crossing t = x(t) so quad sees the singularity at an endpoint
        cuts = [ts[k], ts[k + 1]]
        if vs[k] != 1:
            tc = (xs[k] - vs[k] * ts[k]) / (1 - vs[k])
            if ts[k] < tc < ts[k + 1]:
                cuts.insert(1, tc)
        want += sum(_quad_L(a, b, x_of_t, vs[k], var) for a, b in zip(cuts, cuts[1:]))
    assert evaluate_bolza_objective(tr, var) == pytest.approx(want, rel=1e-8)


def test_custom_objective_agrees_with_ray_formula():
    t = np.linspace(0.25, 1.0, 31)
    x = 0.1 + 2 * (t - 0.25)
    tr = Trajectory(0.25, 0.1, np.column_stack([t, x, np.full_like(t, 2.0)]))
    ray = optimal_trajectory(0.25, 0.1)
    assert evaluate_bolza_objective(tr) == pytest.approx(evaluate_bolza_objective(ray), rel=1e-10)


def test_hat_crossing_is_infinite_and_budget_errors():
    t = np.array([0.0, 1.0])
    tr = Trajectory(0.0, 0.5, np.column_stack([t, [0.5, 0.0], [-0.5, -0.5]]))
    assert evaluate_bolza_objective(tr, HAT) == math.inf
    with pytest.raises(QuadratureError):
        evaluate_bolza_objective(tr, ORIGINAL, rtol=1e-30)
    with pytest.raises(ValueError):
        evaluate_bolza_objective(Trajectory(0.0, 0.0, np.array([[0, 0, 0], [0.5, 0, 0]])))


@pytest.mark.parametrize("var", [ORIGINAL, approx(10)])
def test_segment_cost_matches_quadrature(var):
    xs = np.array([-0.3, 0.17, 0.52, 0.9])
    vs = np.array([-2.0, -0.6, 0.0, 0.7, 1.0, 2.0])
    t, dt = 0.5, 0.05
    got = segment_cost(t, xs, vs, dt, var)
    for i, v in enumerate(vs):
        for k, x in enumerate(xs):
            x_of_t = lambda s, x=x, v=v: x + v * (s - t)  # noqa: E731
            cuts = [t, t + dt]
            if v != 1 and t < (x - v * t) / (1 - v) < t + dt:
                cuts.insert(1, (x - v * t) / (1 - v))
            want = sum(_quad_L(a, b, x_of_t, v, var) for a, b in zip(cuts, cuts[1:]))
            assert got[i, k] == pytest.approx(want, rel=1e-9, abs=1e-14)


def test_segment_cost_rules():
    xs = np.array([0.1, 0.9])
    vs = np.array([-3.0, 0.0, 1.5])
    left = segment_cost(0.5, xs, vs, 0.1, rule="left")
    assert np.all(np.isinf(left[0])) and np.all(left[1] == 0)
    with pytest.raises(ValueError):
        segment_cost(0.5, xs, vs, 0.1, rule="midpoint")


# ---------------------------------------------------------------- grid

def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(11, -3, 4, 71, 20)
    with pytest.raises(ValueError):
        GridSpec(11, -3, 4, 71, 21, stagger=1.0)
    with pytest.raises(ValueError):
        GridSpec(11, 1, 0, 71, 21)
    narrow = GridSpec(11, -1, 2, 31, 21)
    with pytest.raises(ValueError):
        narrow.validate(T)
    # stagger 0.25 on dx = 0.5 from -3.125 puts nodes on t = 0, 0.5, 1
    trap = GridSpec(3, -3.125, 4.375, 16, 5, stagger=0.25)
    with pytest.raises(ValueError):
        trap.validate(T)


def test_aligned_grid_properties(small_grid):
    small_grid.validate(T)
    assert small_grid.dx == pytest.approx(small_grid.dt(T), rel=1e-12)
    assert 0.0 in small_grid.vs()
    assert small_grid.x_lo <= -3.0 and small_grid.x_hi >= 4.0


# --------------------------------------------------------------- solver

def test_terminal_slice_and_bounds(small_field):
    assert np.array_equal(small_field.values[-1], eval_terminal_g(small_field.xs))
    a, b = small_field.grid.region
    roi = (small_field.xs >= a) & (small_field.xs <= b)
    assert np.all(small_field.values[:, roi] >= -1 - 1e-12)
    assert np.all(small_field.values[:, roi] <= 1 + 1e-12)
    assert small_field.clamp_events == 0


@pytest.mark.parametrize("levels", [(21, 11), (41, 21), (81, 41)])
def test_value_is_one_below_the_line(levels):
    f = solve_dp(GridSpec.aligned(*levels))
    tt, xx = np.meshgrid(f.ts, f.xs, indexing="ij")
    a, b = f.grid.region
    below = (xx < 2 * tt - T) & (xx >= a)
    assert below.any()
    assert np.max(np.abs(f.values[below] - 1.0)) <= 1e-9


def test_control_refinement_never_increases_values():
    coarse = solve_dp(GridSpec.aligned(41, 11))
    fine = solve_dp(GridSpec.aligned(41, 21))
    assert np.isin(coarse.grid.vs(), fine.grid.vs()).all()
    assert np.all(fine.values <= coarse.values + 1e-12)


def test_value_field_interpolation(small_field):
    j, i = 10, 123
    assert small_field.at(small_field.ts[j], small_field.xs[i]) == small_field.values[j, i]
    with pytest.raises(ValueError):
        small_field.at(1.5, 0.0)
    with pytest.raises(ValueError):
        ValueField(small_field.grid, T, ORIGINAL, "exact", np.zeros((3, 3)))


def test_coarse_field_examples(coarse_field):
    assert coarse_field.at(0.0, 0.0) == pytest.approx(0.0, abs=0.05)
    w = coarse_field.at(0.5, 0.25)
    assert w == pytest.approx(1 - math.exp(-1), abs=0.05)
    assert abs(w - eval_solution_U(0.5, 0.25)) > 0.3


def test_errors_shrink_on_small_levels():
    grids = [GridSpec.aligned(nt, nv) for nt, nv in ((21, 11), (41, 21), (81, 41))]
    rows = convergence_study(grids)
    sup = [r.sup_err for r in rows]
    assert sup[0] > sup[1] > sup[2]
    assert all(r.clamp_events == 0 for r in rows)


def test_strip_points_separate_u_and_v(small_field):
    t, x = strip_points(T)
    assert np.all(eval_solution_U(t, x) - eval_solution_V(t, x) >= 0.3)
    assert np.min(field_errors(small_field, "U", (t, x))) >= 0.25


# --------------------------------------------------------------- rollouts

def test_rollouts_approx():
    f = solve_dp(GridSpec.aligned(81, 41), approx(10))
    tr = extract_trajectory(f, 0.0, 0.0)
    assert np.max(np.abs(tr.x - 2 * tr.t)) <= 2 * f.grid.dx
    tr = extract_trajectory(f, 0.9, 0.0)
    assert np.max(np.abs(tr.x)) <= 2 * f.grid.dx


@pytest.mark.parametrize("pt", [(0.0, 0.0), (0.5, 0.25), (0.25, 1.3), (0.75, -0.9)])
def test_rollout_objective_matches_field(small_field, pt):
    tr = extract_trajectory(small_field, *pt)
    obj = evaluate_bolza_objective(tr)
    eps = small_field.grid.dx + small_field.grid.dt(T)
    assert abs(obj - small_field.at(*pt)) <= eps
    # V is the infimum over all admissible paths
    assert eval_solution_V(*pt) - 1e-12 <= obj <= eval_solution_V(*pt) + eps


def test_rollout_on_the_jump_line(small_field):
    tr = extract_trajectory(small_field, 0.5, 0.0)
    obj = evaluate_bolza_objective(tr)
    assert obj == pytest.approx(eval_solution_V(0.5, 0.0), abs=1e-8)
    assert eval_solution_V(0.5, 0.0) == pytest.approx(1 - math.exp(-math.sqrt(2)), abs=1e-15)


def test_rollout_validation(small_field):
    with pytest.raises(ValueError):
        extract_trajectory(small_field, 0.013, 0.0)
    with pytest.raises(ValueError):
        extract_trajectory(small_field, 0.0, 5.0)


# ------------------------------------------------------------------ records

def test_field_csv_round_trip(tmp_path, small_field):
    path = tmp_path / "field.csv"
    records.write_field_csv(small_field.ts, small_field.xs, small_field.values, path)
    assert path.read_text().splitlines()[0] == "t,x,value"
    ts, xs, vals = records.read_field_csv(path)
    assert np.array_equal(ts, small_field.ts)
    assert np.array_equal(xs, small_field.xs)
    assert np.array_equal(vals, small_field.values)


def test_error_table_round_trip(tmp_path):
    grids = [GridSpec.aligned(21, 11), GridSpec.aligned(41, 11)]
    rows = convergence_study(grids)
    path = tmp_path / "err.csv"
    records.write_error_table(rows, path)
    back = records.read_error_table(path)
    assert [(r.level, r.sup_err, r.mean_err) for r in rows] == back
