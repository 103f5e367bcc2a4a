import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ezinvest import ConstantParams, EZPreferences, Grid, HestonParams, SolverConfig, SolverError, make_grid, make_model, solve_value_pde
from ezinvest.market import h_function
from ezinvest.policy import extract_policy
from ezinvest.solver import (
    PolicySpec,
    apriori_lower_bound,
    constant_lyapunov,
    derivative,
    feynman_kac_running,
    generator_H,
    log_linear_lyapunov,
    lyapunov_F,
    lyapunov_scan,
    policy_evaluation_pde,
    quadratic_lyapunov,
    riccati_value,
    second_derivative,
    stationary_consumption_limit,
    upper_bound,
)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(np.array([0.0, 1.0]), 10, 1.0)
    with pytest.raises(ValueError):
        Grid(np.array([0.0, 2.0, 1.0]), 10, 1.0)
    with pytest.raises(ValueError):
        Grid(np.linspace(0, 1, 5), 10, 0.0)
    g = Grid.uniform(0, 1, 5, 2.0, 8)
    assert g.dt == 0.25 and g.t[-1] == 2.0


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(iteration="anderson")
    with pytest.raises(ValueError):
        SolverConfig(time_weight=1.5)
    with pytest.raises(ValueError):
        SolverConfig.from_dict({"nx": 10})
    assert SolverConfig.from_dict({"n_x": 10}).n_x == 10


def test_default_domains(heston, kim_omberg):
    g = make_grid(heston, 10.0)
    assert g.x[0] == pytest.approx(0.0225 / 50) and g.x[-1] == pytest.approx(0.225)
    assert g.x.size == 400 and g.n_t == 2000
    k = make_grid(kim_omberg, 12.0)
    half = 6 * 0.0189 / math.sqrt(2 * 0.0226)
    assert k.x[0] == pytest.approx(-half) and k.x[-1] == pytest.approx(half)
    np.testing.assert_allclose(np.diff(k.x), np.diff(k.x)[0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=4, max_size=30))
def test_differences_exact_on_quadratics(steps):
    x = np.cumsum(steps)
    y = 3.0 * x * x - 2.0 * x + 1.0
    np.testing.assert_allclose(derivative(x, y)[1:-1], (6.0 * x - 2.0)[1:-1], rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(second_derivative(x, y)[1:-1], 6.0, rtol=1e-7)
    # one-sided at the edges: exact for affine functions
    np.testing.assert_allclose(derivative(x, 4.0 * x - 1.0), 4.0, rtol=1e-9)


# ---- generator

def test_generator_hand_value(heston, ez):
    assert float(generator_H(heston, ez, 0.04, 0.0, 0.0)) == pytest.approx(0.5754466, abs=5e-7)


def test_generator_large_y(heston, ez):
    H = [float(generator_H(heston, ez, 0.04, y, 0.0)) for y in (0.0, 10.0, 50.0, 100.0)]
    assert all(a > b for a, b in zip(H, H[1:]))
    assert H[-1] < -1e3


@settings(max_examples=200, deadline=None)
@given(x=st.floats(1e-4, 1.0), y1=st.floats(-5, 20), y2=st.floats(-5, 20), z=st.floats(-3, 3))
def test_generator_monotone_in_y(heston, ez, x, y1, y2, z):
    lo, hi = min(y1, y2), max(y1, y2)
    assert generator_H(heston, ez, x, lo, z) >= generator_H(heston, ez, x, hi, z)


@settings(max_examples=200, deadline=None)
@given(gamma=st.floats(1.1, 20), rho=st.floats(-1, 1), z=st.floats(-5, 5).filter(lambda v: abs(v) > 1e-6))
def test_quadratic_term_bounded_below(gamma, rho, z):
    ez = EZPreferences(gamma, 1.5, 0.08)
    m = make_model(HestonParams(rho=rho))
    from ezinvest.market import derived_coefficients

    M = float(derived_coefficients(m, ez, 0.04).M)
    assert 0.5 * M * z * z >= z * z / (2 * gamma) * (1 - 1e-12)


# ---- value equation

def test_riccati_oracle(constant, ez):
    cfg = SolverConfig(n_x=5)
    g = make_grid(constant, 10.0, cfg)
    s = solve_value_pde(constant, ez, g, cfg)
    exact = riccati_value(constant, ez, 10.0, g.t)
    assert np.max(np.abs(s.y - exact[:, None])) < 1e-6
    assert np.ptp(s.y[0]) < 1e-12


def test_riccati_oracle_state_dependent_window(ez):
    """Constant coefficients with a live state: still x-independent."""
    m = make_model(ConstantParams(a=0.3, b=0.1, rho=-0.4))
    cfg = SolverConfig(n_x=41)
    g = make_grid(m, 5.0, cfg)
    s = solve_value_pde(m, ez, g, cfg)
    assert np.max(np.abs(s.y[0] - riccati_value(m, ez, 5.0, 0.0))) < 1e-6


def test_terminal_slice(heston_solution):
    _, s = heston_solution
    assert np.all(s.y[-1] == 0.0)
    assert s.t[-1] == s.T


def test_heston_upper_constant(heston_solution, ez):
    _, s = heston_solution
    assert s.info["h_max"] < -0.2
    assert np.max(s.y[0]) <= 0.76 * 10 + 1e-12
    assert s.upper_violation <= 1e-3


def test_bound_sandwich_heston(heston, ez, heston_solution):
    grid, s = heston_solution
    lower = apriori_lower_bound(heston, ez, grid)
    upper = upper_bound(heston, ez, grid)
    assert np.all(lower - 1e-3 <= s.y)
    assert np.all(s.y <= upper + 1e-3)


def test_bound_sandwich_kim_omberg(kim_omberg):
    ez = EZPreferences(5.0, 1.5, 0.0052)
    cfg = SolverConfig(n_x=200, steps_per_unit=20)
    g = make_grid(kim_omberg, 12.0, cfg)
    s = solve_value_pde(kim_omberg, ez, g, cfg)
    lower = apriori_lower_bound(kim_omberg, ez, g, cfg)
    assert np.all(lower - 1e-3 <= s.y)
    assert np.all(s.y <= upper_bound(kim_omberg, ez, g) + 1e-3)


def test_lower_bound_zero_h(ez):
    m = make_model(ConstantParams(r=0.0, lam=0.0, a=0.2, b=0.5))
    cfg = SolverConfig(n_x=21, steps_per_unit=20)
    g = make_grid(m, 3.0, cfg)
    assert np.max(np.abs(feynman_kac_running(m, ez, g, cfg))) < 1e-14
    lower = apriori_lower_bound(m, ez, g, cfg)
    d, psi, th = ez.delta, ez.psi, ez.theta
    k = -d * th + th * d**psi / psi * math.exp(d * psi * 3.0)
    np.testing.assert_allclose(lower, np.broadcast_to(k * (3.0 - g.t)[:, None], lower.shape), atol=1e-12)


def test_lower_bound_constant_h(constant, ez):
    cfg = SolverConfig(n_x=11, steps_per_unit=20)
    g = make_grid(constant, 4.0, cfg)
    h = float(h_function(constant, ez, 0.0))
    fk = feynman_kac_running(constant, ez, g, cfg)
    np.testing.assert_allclose(fk, np.broadcast_to(h * (4.0 - g.t)[:, None], fk.shape), rtol=1e-12, atol=1e-13)


def test_upper_bound_failure_raises(constant, ez):
    # an artificially tight tolerance cannot be broken by an exact solve, so
    # check the reported number instead and the error path by a negative tol
    cfg = SolverConfig(n_x=5, bound_tol=-1.0)
    with pytest.raises(SolverError, match="upper"):
        solve_value_pde(constant, ez, make_grid(constant, 1.0, cfg), cfg)


def test_nonfinite_detected(constant):
    ez = EZPreferences(5.0, 1.5, 0.08)
    cfg = SolverConfig(n_x=5, steps_per_unit=0.2, iter_max=3)
    with pytest.raises(SolverError):
        # one enormous step: Newton cannot converge within three sweeps
        solve_value_pde(constant, EZPreferences(40.0, 8.0, 3.0), make_grid(constant, 50.0, cfg), cfg)


@pytest.mark.parametrize("weight,order", [(1.0, 1.0), (0.5, 2.0)])
def test_grid_convergence_order(constant, ez, weight, order):
    """Successive halvings shrink the change in y(0, x0) at the scheme's order."""
    ys = []
    for spu in (2, 4, 8, 16):
        cfg = SolverConfig(n_x=5, steps_per_unit=spu, time_weight=weight)
        ys.append(solve_value_pde(constant, ez, make_grid(constant, 10.0, cfg), cfg).y[0, 2])
    d = np.abs(np.diff(ys))
    ratios = d[:-1] / d[1:]
    assert np.all(ratios > 2.0**order * 0.8)
    assert np.all(ratios < 2.0**order * 1.25)
    assert abs(ys[-1] - riccati_value(constant, ez, 10.0, 0.0)) < abs(ys[0] - riccati_value(constant, ez, 10.0, 0.0))


def test_heston_space_time_refinement(heston, ez):
    ys = []
    for n_x, spu in ((100, 25), (200, 50), (400, 100)):
        cfg = SolverConfig(n_x=n_x, steps_per_unit=spu)
        s = solve_value_pde(heston, ez, make_grid(heston, 5.0, cfg), cfg)
        ys.append(np.interp(0.04, s.x, s.y[0]))
    d = np.abs(np.diff(ys))
    assert d[1] < d[0]


def test_picard_matches_newton(constant, ez):
    a = SolverConfig(n_x=5, iteration="picard", iter_max=200)
    b = SolverConfig(n_x=5)
    g = make_grid(constant, 5.0, a)
    assert np.max(np.abs(solve_value_pde(constant, ez, g, a).y - solve_value_pde(constant, ez, g, b).y)) < 1e-9


def test_csv_round_trip(tmp_path, constant, ez):
    cfg = SolverConfig(n_x=5, steps_per_unit=2)
    s = solve_value_pde(constant, ez, make_grid(constant, 1.0, cfg), cfg)
    p = tmp_path / "v.csv"
    s.to_csv(p)
    rows = np.loadtxt(p, delimiter=",", skiprows=1)
    assert p.read_text().splitlines()[0] == "t,x,y,z"
    assert rows.shape == (s.t.size * s.x.size, 4)
    np.testing.assert_array_equal(rows[:, 2], s.y.ravel())


# ---- policy evaluation

def test_policy_evaluation_self_consistency(heston, ez, heston_solution):
    grid, s = heston_solution
    pol = extract_policy(heston, ez, s).as_spec()
    ypi = policy_evaluation_pde(heston, ez, grid, pol)
    assert np.max(np.abs(ypi.y - s.y)) <= 5e-3


def test_naive_policy_is_worse(heston, ez, heston_small):
    grid, s = heston_small
    naive = PolicySpec(pi=0.0, ctilde=ez.delta**ez.psi)
    ypi = policy_evaluation_pde(heston, ez, grid, naive, SolverConfig(n_x=200, steps_per_unit=100))
    # utility is decreasing in y because 1 - gamma < 0
    assert np.all(ypi.y[0] >= s.y[0] - 1e-9)
    assert np.min(ypi.y[0] - s.y[0]) > 0


def test_zero_consumption_policy(constant, ez):
    cfg = SolverConfig(n_x=5, steps_per_unit=10)
    g = make_grid(constant, 2.0, cfg)
    with pytest.warns(UserWarning, match="zero consumption"):
        s = policy_evaluation_pde(constant, ez, g, PolicySpec(pi=0.0, ctilde=0.0), cfg)
    # y' = -((1-g) r - delta theta): linear in time
    slope = (1 - ez.gamma) * 0.05 - ez.delta * ez.theta
    np.testing.assert_allclose(s.y[0], slope * 2.0, rtol=1e-10)
    with pytest.raises(ValueError):
        policy_evaluation_pde(constant, EZPreferences(5.0, 0.5, 0.08), g, PolicySpec(pi=0.0, ctilde=0.0), cfg)
    with pytest.raises(ValueError):
        policy_evaluation_pde(constant, ez, g, PolicySpec(pi=0.0, ctilde=-0.1), cfg)


def test_policy_callable_fields(constant, ez):
    cfg = SolverConfig(n_x=5, steps_per_unit=10)
    g = make_grid(constant, 2.0, cfg)
    a = policy_evaluation_pde(constant, ez, g, PolicySpec(pi=0.3, ctilde=0.05), cfg)
    b = policy_evaluation_pde(constant, ez, g, PolicySpec(pi=lambda t, x: 0.3 + 0 * x, ctilde=lambda t, x: 0.05), cfg)
    np.testing.assert_array_equal(a.y, b.y)


# ---- Lyapunov

def test_constant_phi_gives_h(heston, ez):
    x = np.geomspace(1e-3, 1.0, 20)
    np.testing.assert_allclose(lyapunov_F(heston, ez, constant_lyapunov(3.0), x), h_function(heston, ez, x))
    scan = lyapunov_scan(heston, ez, [constant_lyapunov()], x)
    assert scan.sup == pytest.approx(float(np.max(h_function(heston, ez, x))))


def test_heston_log_linear_blows_down(heston, ez):
    F = lyapunov_F(heston, ez, log_linear_lyapunov(0.01, 0.01), np.array([1e-8, 1e-6, 0.02, 10.0, 1e4]))
    assert F[0] < F[1] < F[2] and F[-1] < F[-2] < F[2]


def test_heston_scan(heston, ez):
    cs = [10.0**k for k in np.linspace(-3, -1, 5)]
    fam = [log_linear_lyapunov(c, cb) for c in cs for cb in cs]
    scan = lyapunov_scan(heston, ez, fam, make_grid(heston, 1.0).x)
    assert scan.decreasing_outward
    assert scan.argsup > make_grid(heston, 1.0).x[0]


def test_kim_omberg_scan(kim_omberg):
    ez = EZPreferences(5.0, 1.5, 0.0052)
    fam = [quadratic_lyapunov(10.0**k) for k in range(-4, 0)]
    scan = lyapunov_scan(kim_omberg, ez, fam, make_grid(kim_omberg, 1.0).x)
    assert scan.decreasing_outward
    assert np.isfinite(scan.sup)


def test_empty_family(heston, ez):
    with pytest.raises(ValueError):
        lyapunov_scan(heston, ez, [], np.array([0.1, 0.2]))


# ---- horizon

def test_horizon_series_reuses_autonomy(heston, ez):
    cfg = SolverConfig(n_x=100, steps_per_unit=20)
    series = stationary_consumption_limit(heston, ez, 0.04, 6.0, 1.0, cfg)
    assert series.horizons.tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    s3 = solve_value_pde(heston, ez, make_grid(heston, 3.0, cfg), cfg)
    direct = ez.delta**ez.psi * math.exp(-ez.psi / ez.theta * np.interp(0.04, s3.x, s3.y[0]))
    assert series.value_at(3.0) == pytest.approx(direct, rel=1e-10)
    assert series.gap()[-1] == 0.0
    with pytest.raises(KeyError):
        series.value_at(2.5)


def test_horizon_bad_step(heston, ez):
    with pytest.raises(ValueError):
        stationary_consumption_limit(heston, ez, 0.04, 2.0, 0.013, SolverConfig(n_x=50, steps_per_unit=20))
