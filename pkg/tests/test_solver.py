import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_network
from oracles import banded_toy, lyapunov, overloaded_toy, qp_oracle
from gridshed.cascade import SmoothingParams, simulate
from gridshed.netmodel import apply_disturbance, sever
from gridshed.solver import (
    NPS,
    RPS,
    SaddleState,
    SolverConfig,
    SolverDivergenceError,
    build_nps_problem,
    integrate,
    kkt_residual,
    lagrangian,
    nps_lagrangian,
    nps_problem,
    nps_rhs,
    primal_gradient,
    projection,
    rps_lagrangian,
    rps_linearize,
    rps_problem,
    rps_rhs,
    two_step_flows,
)

TIGHT = SolverConfig(dt=0.05, horizon=2000.0, convergence_tol=1e-9)


def random_state(problem, rng):
    K, n = problem.n_steps, problem.base_injection.size
    return SaddleState(
        primal=problem.base_injection + rng.normal(scale=0.3, size=(K, n)),
        lam=rng.uniform(0, 2, problem.n_edges),
        tau_upper=rng.uniform(0, 1, (K, n)),
        tau_lower=rng.uniform(0, 1, (K, n)),
    )


def fd_gradient(fun, state, h=1e-6):
    g = np.zeros_like(state.primal)
    for idx in np.ndindex(*state.primal.shape):
        up, dn = state.copy(), state.copy()
        up.primal[idx] += h
        dn.primal[idx] -= h
        g[idx] = (fun(up) - fun(dn)) / (2 * h)
    return g


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0)
    with pytest.raises(ValueError):
        SolverConfig(dt=1.0, horizon=0.5)


@pytest.mark.parametrize("x,y,out", [(-2, 0, 0), (-2, 1, -2), (3, 0, 3)])
def test_projection(x, y, out):
    assert projection(x, y) == out


def test_projection_rejects_negative_multiplier():
    with pytest.raises(ValueError):
        projection(1.0, -1.0)


def test_lagrangian_basics():
    net = overloaded_toy(0)
    pr = nps_problem(net, net.admittance)
    s = pr.initial_state()
    assert nps_lagrangian(s, pr) == 0.0
    rng = np.random.default_rng(1)
    s.primal = s.primal + rng.normal(size=s.primal.shape)
    assert nps_lagrangian(s, pr) == pytest.approx(pr.objective(s.primal))


def test_lagrangian_term_by_term():
    net = overloaded_toy(3)
    pr = nps_problem(net, net.admittance)
    s = random_state(pr, np.random.default_rng(0))
    P = s.primal[0]
    flows = (net.admittance[:, None] * (net.incidence @ np.linalg.pinv(
        net.incidence.T @ (net.admittance[:, None] * net.incidence)))) @ P
    expect = np.sum((net.weights * (P - net.p0)) ** 2)
    expect += s.lam @ (flows[pr.edges] ** 2 - net.thresholds[pr.edges] ** 2)
    expect += s.tau_upper[0] @ (P - net.pmax) + s.tau_lower[0] @ (net.pmin - P)
    assert lagrangian(s, pr) == pytest.approx(expect, rel=1e-10)


def test_variant_guards():
    net = overloaded_toy(0)
    pr = nps_problem(net, net.admittance)
    with pytest.raises(ValueError):
        rps_lagrangian(pr.initial_state(), pr)
    with pytest.raises(ValueError):
        rps_rhs(pr.initial_state(), pr)


@given(st.integers(0, 10_000))
def test_nps_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    net = overloaded_toy(seed)
    net = net.with_weights(rng.uniform(0.5, 2.0, net.n))
    pr = nps_problem(net, net.admittance)
    s = random_state(pr, rng)
    g = primal_gradient(s, pr)
    fd = fd_gradient(lambda st_: nps_lagrangian(st_, pr), s)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(nps_rhs(s, pr).primal, -g)


@given(st.integers(0, 10_000))
def test_rps_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    net = banded_toy(seed % 50)
    pr = rps_problem(net, net.admittance, SmoothingParams(5.0))
    s = random_state(pr, rng)
    fd = fd_gradient(lambda st_: rps_lagrangian(st_, pr), s)
    np.testing.assert_allclose(primal_gradient(s, pr), fd, rtol=1e-5, atol=1e-7)


def test_feasible_start_is_stationary(triangle):
    pr = nps_problem(triangle, triangle.admittance)
    d = nps_rhs(pr.initial_state(), pr)
    assert not d.primal.any() and not d.lam.any()
    r = kkt_residual(pr.initial_state(), pr)
    assert r.max() == 0.0


def test_unconstrained_stays_put(triangle):
    net = triangle.with_thresholds(100.0)
    sol = integrate(nps_problem(net, net.admittance))
    np.testing.assert_array_equal(sol.solution.P, net.p0)
    assert sol.converged


def test_three_bus_matches_oracle():
    net = overloaded_toy(11, n=3, extra=1)
    pr = nps_problem(net, net.admittance)
    sol = integrate(pr, TIGHT)
    assert sol.converged
    np.testing.assert_allclose(sol.solution.P, qp_oracle(pr).primal[0], atol=1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_oracle_point_satisfies_kkt(seed):
    pr = nps_problem(*(lambda n: (n, n.admittance))(overloaded_toy(seed)))
    r = kkt_residual(qp_oracle(pr).state(), pr)
    assert r.max() <= 1e-6, r.as_dict()


def test_kkt_point_has_small_rhs():
    net = overloaded_toy(2)
    pr = nps_problem(net, net.admittance)
    d = nps_rhs(qp_oracle(pr).state(), pr)
    assert np.abs(d.primal).max() <= 1e-4
    assert np.abs(d.lam).max() <= 1e-4


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_converged_solution_matches_oracle(seed):
    net = overloaded_toy(seed)
    pr = nps_problem(net, net.admittance)
    sol = integrate(pr, TIGHT)
    assert sol.converged
    assert np.abs(sol.solution.P - qp_oracle(pr).primal[0]).max() <= 1e-3
    assert kkt_residual(sol.solution, pr).max() <= 1e-4


def test_multipliers_stay_nonnegative():
    net = overloaded_toy(4)
    tr = integrate(nps_problem(net, net.admittance), SolverConfig(horizon=20)).trajectory
    assert tr.lam.min() >= 0 and tr.tau_upper.min() >= 0 and tr.tau_lower.min() >= 0


def test_trajectory_sampled_every_step():
    net = overloaded_toy(4)
    sol = integrate(nps_problem(net, net.admittance), SolverConfig(horizon=3),
                    run_to_horizon=True)
    np.testing.assert_allclose(np.diff(sol.trajectory.times), 0.1)
    assert sol.trajectory.primal.shape == (31, 1, net.n)


def test_divergence_raises():
    net = overloaded_toy(4)
    with pytest.raises(SolverDivergenceError):
        integrate(nps_problem(net, net.admittance), SolverConfig(dt=50.0, horizon=1e5))


def _lyapunov_violation(pr, opt, dt, horizon=5.0):
    cfg = SolverConfig(dt=dt, horizon=horizon, convergence_tol=0.0)
    V = lyapunov(integrate(pr, cfg, run_to_horizon=True).trajectory, opt)
    return max(float(np.diff(V).max()), 0.0)


@pytest.mark.parametrize("seed", range(4))
def test_lyapunov_descent_nps(seed):
    net = overloaded_toy(seed, n=4, extra=1)
    pr = nps_problem(net, net.admittance)
    opt = qp_oracle(pr)
    coarse, fine = _lyapunov_violation(pr, opt, 0.1), _lyapunov_violation(pr, opt, 0.01)
    assert coarse <= 0.5 * 0.1 ** 2
    assert fine <= coarse / 50 or fine <= 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_lyapunov_descent_rps(seed):
    pr = rps_problem(banded_toy(seed), banded_toy(seed).admittance, SmoothingParams(5.0))
    opt = qp_oracle(pr)
    coarse, fine = _lyapunov_violation(pr, opt, 0.1), _lyapunov_violation(pr, opt, 0.01)
    assert coarse <= 0.5 * 0.1 ** 2
    assert fine <= coarse / 50 or fine <= 1e-12


def _saddle_gaps(pr, opt, rng, count=1000):
    star = opt.state()
    L_star = lagrangian(star, pr)
    worst = 0.0
    for _ in range(count):
        s = random_state(pr, rng)
        # L(P*, y) <= L(P*, y*) <= L(P, y*)
        dual = star.copy()
        dual.lam, dual.tau_upper, dual.tau_lower = s.lam, s.tau_upper, s.tau_lower
        primal = star.copy()
        primal.primal = s.primal
        worst = max(worst, lagrangian(dual, pr) - L_star, L_star - lagrangian(primal, pr))
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_saddle_inequalities(seed):
    net = overloaded_toy(seed)
    pr = nps_problem(net, net.admittance)
    assert _saddle_gaps(pr, qp_oracle(pr), np.random.default_rng(seed)) <= 1e-8


def test_nps_problem_from_trajectory(net57):
    Y1 = apply_disturbance(net57, sever(net57, [10]))
    traj = simulate(net57, Y1, net57.p0, SmoothingParams())
    pr = build_nps_problem(net57, traj, 4)
    np.testing.assert_array_equal(pr.frozen_admittance, traj.state_at(4).admittance)
    assert pr.variant == NPS and pr.step == 4
    late = build_nps_problem(net57, traj, 30)
    np.testing.assert_array_equal(late.frozen_admittance, traj.final.admittance)


def test_nps_problem_undisturbed(triangle):
    traj = simulate(triangle, triangle.admittance, triangle.p0, SmoothingParams())
    np.testing.assert_array_equal(build_nps_problem(triangle, traj, 1).frozen_admittance,
                                  triangle.admittance)


def test_linearization_exact_at_expansion_point():
    sm = SmoothingParams(5.0)
    net = banded_toy(0)
    model = rps_linearize(net, net.admittance, net.p0, sm)
    _, exact = two_step_flows(net, net.admittance, net.p0, net.p0, sm)
    assert np.abs(model.evaluate(net.p0, net.p0) - exact).max() <= 1e-10
    assert np.abs(model.coeff_prev).max() > 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_linearization_second_order(seed):
    sm = SmoothingParams(5.0)
    net = banded_toy(seed)
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=net.n), rng.normal(size=net.n)
    model = rps_linearize(net, net.admittance, net.p0, sm)
    errs = []
    for h in (1e-3, 1e-4, 1e-5):
        Pp, Pc = net.p0 + h * u, net.p0 + h * v
        _, exact = two_step_flows(net, net.admittance, Pp, Pc, sm)
        errs.append(np.abs(model.evaluate(Pp, Pc) - exact).max())
    # each tenfold step in h cuts the error about a hundredfold
    assert errs[0] / errs[1] > 50 and errs[1] / errs[2] > 50


def test_flows_outside_band_decouple_first_step(triangle):
    pr = rps_problem(triangle, triangle.admittance, SmoothingParams())
    assert pr.variant == RPS
    assert not pr.coeffs[0].any()
    net = triangle.with_thresholds(0.5)
    pr = rps_problem(net, net.admittance, SmoothingParams())
    sol = integrate(pr, TIGHT)
    np.testing.assert_allclose(sol.solution.primal[0], net.p0, atol=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_rps_matches_linearized_oracle(seed):
    net = banded_toy(seed)
    pr = rps_problem(net, net.admittance, SmoothingParams(5.0))
    sol = integrate(pr, SolverConfig(dt=0.02, horizon=3000.0, convergence_tol=1e-9))
    assert sol.converged
    np.testing.assert_allclose(sol.solution.primal, qp_oracle(pr).primal, atol=1e-3)


def test_rhs_with_explicit_model():
    net = banded_toy(1)
    sm = SmoothingParams(5.0)
    pr = rps_problem(net, net.admittance, sm)
    s = random_state(pr, np.random.default_rng(0))
    a = rps_rhs(s, pr)
    b = rps_rhs(s, pr, rps_linearize(net, net.admittance, net.p0, sm))
    np.testing.assert_allclose(a.primal, b.primal)
