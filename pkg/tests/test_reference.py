import math

import mpmath as mp
import numpy as np
import pytest

from jumpbsde.levy import build_partition, power_law_measure, psd_sqrt, small_jump_covariance
from jumpbsde.models import build_coefficients, martingale_model
from jumpbsde.paths import Driver, TimeGrid, simulate_forward
from jumpbsde.reference import (BasisRegression, FixedPointError, ManufacturedSolution, RegressionWarning,
                                apply_nonlocal_B, apply_nonlocal_J, brownian_projection_experiment, cell_rule,
                                fit_loglog, isometry_check, linear_solution, manufactured_driver, pde_residual,
                                project_cell, project_time, projection_error_estimates, sine_solution,
                                smalljump_rate_experiment, solve_intermediate)
from jumpbsde.solver import SolverConfig, run_algorithm1


def min1(e):
    return np.minimum(1.0, np.linalg.norm(e, axis=1))


# -- regression -----------------------------------------------------------------


def test_cubic_recovered_exactly():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((500, 2))
    y = 1 + x[:, 0] - 2 * x[:, 1] ** 2 + 0.5 * x[:, 0] * x[:, 1] ** 2
    reg = BasisRegression(3, ridge=0.0).fit(x, y)
    xt = rng.standard_normal((20, 2))
    yt = 1 + xt[:, 0] - 2 * xt[:, 1] ** 2 + 0.5 * xt[:, 0] * xt[:, 1] ** 2
    assert np.allclose(reg(xt), yt, atol=1e-9)
    assert reg.normal_residual < 1e-10
    assert not reg.flagged


def test_constant_state_gives_mean():
    reg = BasisRegression().fit(np.ones((10, 1)), np.arange(10.0))
    assert reg.constant_only
    assert np.allclose(reg(np.array([[1.0], [7.0]])), 4.5)


def test_ill_conditioned_flagged():
    rng = np.random.default_rng(1)
    a = rng.standard_normal(100)
    x = np.column_stack([a, a])
    with pytest.warns(RegressionWarning):
        reg = BasisRegression(2).fit(x, a)
    assert reg.flagged
    assert np.all(np.isfinite(reg.coef))


def test_projection_residual_orthogonal_to_basis():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((20_000, 1))
    y = np.exp(x[:, 0]) + rng.standard_normal(20_000)
    reg = BasisRegression(3).fit(x, y)
    r = y - reg(x)
    phi = reg.features(x)
    for k in range(phi.shape[1]):
        prod = r * phi[:, k]
        assert abs(prod.mean()) <= 3 * prod.std() / math.sqrt(len(r))


def test_multi_output_regression():
    x = np.linspace(-1, 1, 50)[:, None]
    y = np.column_stack([x[:, 0], x[:, 0] ** 2])
    reg = BasisRegression(2).fit(x, y)
    assert reg.coef.shape == (3, 2)
    assert np.allclose(reg(x), y, atol=1e-7)


# -- time and cell projections --------------------------------------------------


def test_project_time_constant():
    anchors = np.random.default_rng(0).standard_normal((30, 1))
    _, pi = project_time(np.full((30, 11), 2.5), anchors)
    assert np.allclose(pi, 2.5)


def test_project_time_deterministic_ramp():
    s, t = 0.3, 0.9
    times = np.linspace(s, t, 41)
    anchors = np.random.default_rng(0).standard_normal((10, 1))
    _, pi = project_time(np.tile(times, (10, 1)), anchors, times)
    assert np.allclose(pi, 0.5 * (s + t), atol=1e-12)


def test_project_time_brownian_is_anchor():
    rng = np.random.default_rng(3)
    B, M, s, t = 20_000, 40, 0.5, 1.0
    Ws = math.sqrt(s) * rng.standard_normal(B)
    incs = rng.standard_normal((B, M)) * math.sqrt((t - s) / M)
    W = np.column_stack([Ws, Ws[:, None] + np.cumsum(incs, axis=1)])
    reg, _ = project_time(W, Ws[:, None], np.linspace(s, t, M + 1), degree=1)
    # standardised basis: slope on W_s is coef[1] / sd(W_s)
    sd = Ws.std()
    slope = reg.coef[1] / sd
    icpt = reg.coef[0] - reg.coef[1] * Ws.mean() / sd
    se_slope = reg.resid_std / (math.sqrt(B) * sd)
    se_icpt = reg.resid_std / math.sqrt(B)
    assert abs(slope - 1.0) <= 3 * se_slope
    assert abs(icpt) <= 3 * se_icpt * math.sqrt(1 + Ws.mean() ** 2 / sd ** 2)


def test_project_cell_constant_and_first_moment(measure05):
    part = build_partition(measure05, 0.5, 1.0, edges=[0.5, 1.0])
    j = int(np.flatnonzero(part.sign == 1)[0])
    e, w = cell_rule(part, j)
    assert w.sum() == pytest.approx(part.masses[j], rel=1e-10)
    anchors = np.random.default_rng(0).standard_normal((20, 1))
    _, pi = project_cell(np.full((20, 5, len(w)), -1.5), w, anchors)
    assert np.allclose(pi, -1.5)
    vals = np.broadcast_to(e[:, 0], (20, 5, len(w)))
    _, pi = project_cell(vals, w, anchors)
    closed = 2 * (1 - 0.5 ** 0.5) / (2 * (0.5 ** -0.5 - 1))
    assert np.allclose(pi, closed, rtol=1e-10)


def test_project_cell_independent_noise_gives_mean(measure05):
    part = build_partition(measure05, 0.5, 1.0, edges=[0.5, 1.0])
    _, w = cell_rule(part, 0)
    rng = np.random.default_rng(4)
    anchors = rng.standard_normal((40_000, 1))
    vals = 0.8 + rng.standard_normal((40_000, 3, 1)) * np.ones((1, 1, len(w)))
    _, pi = project_cell(vals, w, anchors, degree=1)
    assert abs(pi.mean() - 0.8) <= 4 / math.sqrt(40_000)


# -- intermediate scheme ----------------------------------------------------------


@pytest.fixture(scope="module")
def martingale_cloud(partition05):
    m = martingale_model(0.3, 1)
    grid = TimeGrid.uniform(1.0, 5)
    pb = simulate_forward(m, grid, partition05, [1.0], 20_000, seed=2)
    return m, grid, pb


def test_intermediate_constant_terminal(partition05):
    m = build_coefficients(1, 1, 0, terminal="constant", terminal_params={"value": 3.0})
    grid = TimeGrid.uniform(1.0, 1)
    pb = simulate_forward(m, grid, partition05, [0.0], 300, seed=0)
    sol = solve_intermediate(m, grid, partition05, pb)
    assert sol.v0 == pytest.approx(3.0, abs=1e-14)
    assert np.allclose(sol.evaluate(0, [[0.0]])["v"], 3.0, rtol=0, atol=1e-15)


def test_intermediate_martingale(martingale_cloud, partition05):
    m, grid, pb = martingale_cloud
    sol = solve_intermediate(m, grid, partition05, pb)
    assert sol.mode == "lsmc"
    assert abs(sol.v0 - 1.0) <= 4 * sol.v0_stderr
    for i in (1, 3):
        out = sol.evaluate(i, pb.X[:2000, i, :])
        err = np.abs(out["v"] - pb.X[:2000, i, 0])
        # pure regression noise in the bulk; the cubic basis is loose only in the far tails
        assert np.median(err) < 0.02 and np.percentile(err, 90) < 0.03
        # Z = sigma^T Du = sigma; the regression noise is about 0.02 per state here
        assert abs(np.median(out["z"][:, 0]) - 0.3) < 0.02
        assert abs(np.median(out["u"][:, 0]) - partition05.representatives[0, 0]) < 0.2
    for st in sol.steps:
        assert st.fixed_point_residual <= 1e-8


def test_intermediate_guards(partition05):
    q4 = martingale_model(0.3, 0, q=4)
    grid = TimeGrid.uniform(1.0, 2)
    with pytest.raises(ValueError):
        solve_intermediate(q4, grid, partition05, None)
    stiff = build_coefficients(1, 1, 0, driver="linear", driver_params={"rate": 5.0})
    pb = simulate_forward(stiff, grid, partition05, [0.0], 50, seed=0)
    with pytest.raises(ValueError):
        solve_intermediate(stiff, grid, partition05, pb)


def test_intermediate_fixed_point_failure(partition05):
    drv = Driver(lambda t, x, y, z, p: 0.9 * np.cos(y), name="cos")
    m = build_coefficients(1, 1, 0, driver_obj=drv)
    grid = TimeGrid.uniform(1.0, 2)
    pb = simulate_forward(m, grid, partition05, [0.0], 200, seed=0)
    with pytest.raises(FixedPointError) as info:
        solve_intermediate(m, grid, partition05, pb, max_iter=2)
    assert info.value.step == 1 and info.value.residual > 1e-8


def test_intermediate_with_nets(partition05):
    m = build_coefficients(1, 1, 1, driver="linear", driver_params={"rate": 0.5})
    grid = TimeGrid.uniform(1.0, 3)
    sol = run_algorithm1(m, grid, partition05, [1.0], SolverConfig(epochs=40, hidden=8), seed=0, batch=4096)
    pb = simulate_forward(m, grid, partition05, [1.0], 4096, 0)
    a = solve_intermediate(m, grid, partition05, pb, solution=sol)
    b = solve_intermediate(m, grid, partition05, pb)
    assert a.mode == "nets"
    exact = math.exp(-0.5)
    assert abs(a.v0 - exact) <= 4 * a.v0_stderr and abs(b.v0 - exact) <= 4 * b.v0_stderr


# -- nonlocal operators -------------------------------------------------------------


def test_J_vanishes_on_linear(measure05):
    x = np.array([[0.0], [1.3]])
    assert np.allclose(apply_nonlocal_J(lambda z: 2 * z[:, 0] - 1, x, measure05), 0.0, atol=1e-12)


def test_J_square_is_full_second_moment(measure05):
    out = apply_nonlocal_J(lambda z: z[:, 0] ** 2, np.array([[0.0], [2.0]]), measure05)
    assert np.allclose(out, 2 / 1.5, rtol=1e-8)


def test_J_exponential_oracle():
    m = power_law_measure(1.2, 0.5, 1.0, c_neg=0.8)
    a, x = 0.7, 0.4

    def dens(e):
        return (0.5 if e > 0 else 0.8) * abs(e) ** -2.2

    with mp.workdps(40):
        k = mp.quad(lambda e: (mp.expm1(a * e) - a * e) * dens(e), [-1, 0]) + \
            mp.quad(lambda e: (mp.expm1(a * e) - a * e) * dens(e), [0, 1])
    # inner Taylor remainder ~ eps_inner^(3 - alpha) on an asymmetric measure
    out = apply_nonlocal_J(lambda z: np.exp(a * z[:, 0]), np.array([[x]]), m, epsilon_inner=1e-4)
    assert out[0] == pytest.approx(math.exp(a * x) * float(k), rel=1e-7)


def test_J_state_dependent_beta_oracle(measure05):
    beta = (lambda x, e: (1 + 0.5 * np.sin(x)) * e)
    x0 = 0.3
    s = 1 + 0.5 * math.sin(x0)
    k = mp.quad(lambda e: (mp.sin(x0 + s * e) - mp.sin(x0) - mp.cos(x0) * s * e) * abs(e) ** -1.5, [-1, 0, 1])
    out = apply_nonlocal_J(lambda z: np.sin(z[:, 0]), np.array([[x0]]), measure05, beta=beta,
                           dbeta0=lambda x: (1 + 0.5 * np.sin(x))[:, :, None])
    assert out[0] == pytest.approx(float(k), rel=1e-6)


def test_J_truncated_drops_small_jumps(measure05):
    eps = 0.1
    out = apply_nonlocal_J(lambda z: z[:, 0] ** 2, np.array([[0.0]]), measure05, epsilon=eps)
    assert out[0] == pytest.approx(2 / 1.5 * (1 - eps ** 1.5), rel=1e-8)


def test_B_constant_is_zero(measure05):
    out = apply_nonlocal_B(lambda z: np.full(len(z), 4.0), np.array([[0.2]]), measure05, min1, 0.05, 1,
                           dgamma0=[0.3])
    assert out[0] == pytest.approx(0.0, abs=1e-12)


def test_B_linear_closed_form():
    eps = 0.05
    m = power_law_measure(0.5, 1.0, 1.0, c_neg=0.5)
    out = apply_nonlocal_B(lambda z: z[:, 0], np.array([[0.7]]), m, min1, eps, 0)
    # int_eps^1 e * e * (1 - 0.5) e^{-1.5} de
    assert out[0] == pytest.approx(0.5 * (1 - eps ** 1.5) / 1.5, rel=1e-9)


def test_B_zeta_term_difference(measure05):
    eps, dg = 0.1, 0.7
    S = psd_sqrt(small_jump_covariance(measure05, eps))
    beta = (lambda x, e: (1 + 0.5 * np.sin(x)) * e)
    x = np.array([[0.4], [-1.0]])
    kw = dict(beta=beta, dbeta0=lambda z: (1 + 0.5 * np.sin(z))[:, :, None], dgamma0=[dg], Sigma_eps_sqrt=S)
    on = apply_nonlocal_B(lambda z: np.sin(z[:, 0]), x, measure05, min1, eps, 1, **kw)
    off = apply_nonlocal_B(lambda z: np.sin(z[:, 0]), x, measure05, min1, eps, 0, **kw)
    want = dg * S[0, 0] ** 2 * (1 + 0.5 * np.sin(x[:, 0])) * np.cos(x[:, 0])
    assert np.allclose(on - off, want, rtol=1e-9, atol=1e-14)


def test_B_smooth_function_oracle():
    m = power_law_measure(1.2, 0.5, 1.0)
    eps, x0 = 0.02, 0.6
    k = mp.quad(lambda e: (mp.sin(x0 + e) - mp.sin(x0)) * min(1, abs(e)) * 0.5 * abs(e) ** -2.2,
                [-1, -eps]) + mp.quad(lambda e: (mp.sin(x0 + e) - mp.sin(x0)) * min(1, abs(e)) * 0.5 * abs(e) ** -2.2,
                                      [eps, 1])
    out = apply_nonlocal_B(lambda z: np.sin(z[:, 0]), np.array([[x0]]), m, min1, eps, 0)
    assert out[0] == pytest.approx(float(k), rel=1e-6)


# -- manufactured solutions ---------------------------------------------------------


def test_manufactured_constant_gives_zero_driver(measure05):
    const = ManufacturedSolution(u=lambda t, x: np.full(len(x), 0.0), name="zero")
    m = martingale_model(0.3, 0)
    drv = manufactured_driver(const, m, measure05, kappa=0.0)
    x = np.linspace(-2, 2, 7)[:, None]
    assert np.allclose(drv(0.3, x, np.zeros(7), np.zeros((7, 1)), np.zeros(7)), 0.0, atol=1e-8)


def test_manufactured_linear_solution(measure05):
    m = martingale_model(0.3, 0)
    drv = manufactured_driver(linear_solution(1.0), m, measure05, kappa=0.5)
    x = np.linspace(-2, 2, 9)[:, None]
    y = np.linspace(-1, 1, 9)
    f = drv(0.5, x, y, np.zeros((9, 1)), np.zeros(9))
    assert np.allclose(f, 0.5 * (np.sin(y) - np.sin(x[:, 0])), atol=1e-10)
    assert drv.lipschitz == 0.5


def test_manufactured_pde_residual_random_points():
    meas = power_law_measure(1.2, 0.5, 1.0)
    base = build_coefficients(1, 1, 1, sigma_params={"value": 0.3}, beta="state", beta_params={"amp": 0.3})
    us = sine_solution(0.5, 1.0)
    drv = manufactured_driver(us, base, meas, kappa=0.5)
    rng = np.random.default_rng(5)
    for t in rng.random(4):
        x = rng.uniform(-2, 3, size=(25, 1))
        assert np.max(np.abs(pde_residual(us, drv, t, x, base, meas))) < 1e-6


def test_manufactured_truncated_equation(measure05):
    base = build_coefficients(1, 1, 1, sigma_params={"value": 0.3})
    us = sine_solution(0.5, 1.0)
    drv = manufactured_driver(us, base, measure05, kappa=0.5, epsilon=0.1, zeta=1)
    x = np.linspace(-1, 1, 5)[:, None]
    r = pde_residual(us, drv, 0.2, x, base, measure05, epsilon=0.1, zeta=1)
    assert np.max(np.abs(r)) < 1e-6
    # without compensation the truncation gap shows up against the full generator
    drv0 = manufactured_driver(us, base, measure05, kappa=0.5, epsilon=0.1, zeta=0)
    assert np.max(np.abs(pde_residual(us, drv0, 0.2, x, base, measure05, epsilon=0.1, zeta=0))) < 1e-6
    assert np.max(np.abs(pde_residual(us, drv0, 0.2, x, base, measure05))) > 1e-3


def test_manufactured_tables_match_direct():
    meas = power_law_measure(1.2, 0.5, 1.0)
    base = build_coefficients(1, 1, 1, sigma_params={"value": 0.3})
    us = sine_solution()
    times = np.linspace(0, 1, 5)
    drv = manufactured_driver(us, base, meas, times=times, x_range=(-4, 6))
    x = np.random.default_rng(0).uniform(-5, 7, size=(200, 1))
    for t in times:
        assert np.max(np.abs(drv.h_value(t, x) - drv.h(t, x))) < 1e-6


# -- projection errors ---------------------------------------------------------------


def test_projection_error_constant_is_zero():
    B, N, M = 100, 4, 5
    times = np.linspace(0, 1, N * M + 1)
    anchors = [np.random.default_rng(i).standard_normal((B, 1)) for i in range(N)]
    Z = np.full((B, N * M + 1, 2), 0.3)
    out = projection_error_estimates(times, anchors, M, Z=Z, L=Z[:, :, :1])
    assert out.R2_Z == pytest.approx(0.0, abs=1e-20) and out.R2_L == pytest.approx(0.0, abs=1e-20)


def test_brownian_projection_error():
    T, N = 1.0, 10
    r = brownian_projection_experiment(T, N, 20, 20_000, seed=1)
    assert abs(r.R2_Z - T * (T / N) / 2) <= 3 * r.R2_Z_se
    half = brownian_projection_experiment(T, 2 * N, 10, 20_000, seed=2)
    assert half.R2_Z / r.R2_Z == pytest.approx(0.5, rel=0.2)


def test_projection_error_U_cells(measure05):
    part = build_partition(measure05, 0.5, 1.0, edges=[0.5, 1.0])
    B, N, M = 400, 2, 4
    times = np.linspace(0, 1, N * M + 1)
    anchors = [np.zeros((B, 1)) for _ in range(N)]
    U, W = [], []
    for j in range(part.n_cells):
        e, w = cell_rule(part, j)
        U.append(np.broadcast_to(e[:, 0], (B, N * M + 1, len(w))))
        W.append(w)
    out = projection_error_estimates(times, anchors, M, U=U, U_weights=W, U_tail=[True, False])
    # R^2_U = T * sum_j int_K (e - bary_j)^2 nu(de)
    lam = 2 * (0.5 ** -0.5 - 1)
    bary = 2 * (1 - 0.5 ** 0.5) / lam
    per_cell = (2 / 3) * (1 - 0.5 ** 1.5) - 2 * bary * 2 * (1 - 0.5 ** 0.5) + bary ** 2 * lam
    assert out.R2_U == pytest.approx(2 * per_cell, rel=1e-6)
    assert out.R2_U_tail == pytest.approx(per_cell, rel=1e-6)


def test_isometry_check(partition05):
    u = np.sin(np.arange(partition05.n_cells) + 1.0)
    mc, se, exact = isometry_check(partition05, u, 0.05, 200_000, seed=3)
    assert abs(mc - exact) <= 4 * se


# -- strong rate -----------------------------------------------------------------------


def test_fit_loglog():
    x = np.array([1.0, 2.0, 4.0])
    s, c = fit_loglog(x, 3 * x ** 1.5)
    assert s == pytest.approx(1.5) and math.exp(c) == pytest.approx(3.0)


def test_rate_experiment_small(measure05):
    m = martingale_model(0.3, 1)
    tab = smalljump_rate_experiment(m, measure05, [0.2, 0.1, 0.05, 0.025, 0.003], 1, 0.003, 20_000, seed=1,
                                    x0=[1.0])
    assert tab.error[0] == 0.0  # the reference row reproduces the reference paths
    assert tab.monotone(3.0)
    assert 0.7 <= tab.slope <= 1.3
    assert tab.rows_used == 4
    with pytest.raises(ValueError):
        smalljump_rate_experiment(m, measure05, [0.1], 1, 0.2, 10, seed=0)
