import csv

import numpy as np
import pytest

from elder import data
from elder import forward_model as fm
from elder import gradcheck as gc
from elder import regularizer as rg
from elder import solver as sv
from elder.cli import toy_problem
from elder.errors import ConfigError, StepFailure

STENCIL = np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]]) / 8.0


def dense(op, n_side):
    n = n_side * n_side
    cols = [op(np.eye(n)[i].reshape(n_side, n_side)).ravel() for i in range(n)]
    return np.array(cols).T


def test_paper_defaults():
    cfg = sv.SolverConfig()
    assert cfg.epsilon == 1e-2
    assert cfg.max_iters == 100


@pytest.mark.parametrize("bad", [dict(rho=0.5), dict(rho=0.0), dict(beta=1.0), dict(gamma0=0.0),
                                 dict(epsilon=0.0), dict(max_iters=0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        sv.SolverConfig(**bad)


def test_objective_zero_for_consistent_identity(rng):
    x = rng.random((4, 4))
    problem = fm.Problem(fm.GenericLinear(np.eye(16), (4, 4)), x.ravel())
    assert sv.objective(problem, None, x) == 0.0


def test_objective_least_squares_solution(rng):
    a = rng.standard_normal((10, 16))
    x = rng.random((4, 4))
    problem = fm.Problem(fm.GenericLinear(a, (4, 4)), a @ x.ravel())
    xs = np.linalg.lstsq(a, problem.y, rcond=None)[0].reshape(4, 4)
    assert sv.objective(problem, None, xs) == pytest.approx(0.0, abs=1e-20)


def test_objective_hand_computed(rng, tiny_weights):
    a = rng.standard_normal((30, 64))
    problem = fm.Problem(fm.GenericLinear(a, (8, 8)), rng.standard_normal(30))
    reg = rg.Regularizer("red", tiny_weights, 0.7)
    x = rng.random((8, 8))
    expected = 0.5 * np.sum((problem.y - a @ x.ravel()) ** 2) + 0.7 * rg.value(reg, x)
    assert sv.objective(problem, reg, x) == pytest.approx(expected, rel=1e-13)


def test_pure_projection_step(rng):
    y = rng.random((8, 8))
    problem = fm.Problem(fm.InpaintMask(np.ones((8, 8), bool)), y)
    assert np.array_equal(sv.pgm_step(problem, None, rng.random((8, 8)), 1.0), y)


def test_inert_regularizer_reduces_to_prox(rng):
    model = fm.BlurDownsample(fm.uniform_kernel(3), 2, (8, 8))
    problem = fm.simulate(model, rng.random((8, 8)), 0.01, seed=1)
    reg = rg.Regularizer("lsr", rg.IdentityNetwork(), 2.0)
    x = rng.random((8, 8))
    np.testing.assert_allclose(sv.pgm_step(problem, reg, x, 0.6), fm.prox_data(model, x, 0.6, problem.y), atol=1e-15)


def test_iterates_match_dense_recursion(rng):
    a = rng.standard_normal((12, 16))
    model = fm.GenericLinear(a, (4, 4))
    problem = fm.Problem(model, rng.standard_normal(12))
    gamma, tau = 0.05, 0.5
    reg = rg.Regularizer("lsr", rg.LinearFilter(STENCIL), tau)
    k = dense(lambda e: reg.weights.forward(reg.weights.params, e), 4)
    q = (np.eye(16) - k).T @ (np.eye(16) - k)
    inv = np.linalg.inv(np.eye(16) + gamma * a.T @ a)
    x = rng.random(16)
    cfg = sv.SolverConfig(gamma0=gamma, line_search=False, epsilon=1e-300, max_iters=15)
    seen = []
    sv.run_forward(problem, reg, cfg, x0=x.reshape(4, 4), callback=lambda s: seen.append(s.x.ravel().copy()))
    for got in seen:
        x = inv @ (x - gamma * tau * q @ x + gamma * a.T @ problem.y)
        np.testing.assert_allclose(got, x, rtol=1e-10, atol=1e-12)


def test_tau_zero_dense_recursion(rng):
    a = rng.standard_normal((8, 16))
    problem = fm.Problem(fm.GenericLinear(a, (4, 4)), rng.standard_normal(8))
    inv = np.linalg.inv(np.eye(16) + 0.3 * a.T @ a)
    x = np.zeros(16)
    seen = []
    sv.run_forward(problem, None, sv.SolverConfig(gamma0=0.3, line_search=False, epsilon=1e-300, max_iters=5),
                   x0=np.zeros((4, 4)), callback=lambda s: seen.append(s.x.ravel().copy()))
    for got in seen:
        x = inv @ (x + 0.3 * a.T @ problem.y)
        np.testing.assert_allclose(got, x, atol=1e-12)


def quadratic_state(rng):
    problem, reg, lip = toy_problem()
    state = sv.SolverState(x=problem.model.initial_estimate(problem.y))
    return problem, reg, lip, state


def test_small_step_accepted_immediately(rng):
    problem, reg, lip, state = quadratic_state(rng)
    x, gamma, _, _, trials = sv.backtrack(problem, reg, state, sv.SolverConfig(gamma0=1e-3), gamma=1e-3)
    assert trials == 0 and gamma == 1e-3


def test_huge_step_is_shrunk(rng):
    problem, reg, lip, state = quadratic_state(rng)
    cfg = sv.SolverConfig(gamma0=1e4)
    state.f, state.grad = sv._evaluate(problem, reg, state.x)
    gamma = 1e4
    x, accepted, f_new, _, trials = sv.backtrack(problem, reg, state, cfg, gamma=gamma)
    assert accepted < gamma and accepted == gamma * cfg.beta ** trials
    assert sv.sufficient_decrease(state.f, f_new, state.x, x, accepted, cfg.rho)
    for j in range(trials):
        g = gamma * cfg.beta ** j
        cand = sv.pgm_step(problem, reg, state, g)
        assert not sv.sufficient_decrease(state.f, sv.objective(problem, reg, cand), state.x, cand, g, cfg.rho)


def test_exhausted_backtracking_raises_with_candidate(rng, monkeypatch):
    problem, reg, lip, state = quadratic_state(rng)
    real = sv.smooth_value_and_grad
    monkeypatch.setattr(sv, "smooth_value_and_grad", lambda r, x: (real(r, x)[0], -real(r, x)[1] - 1.0))
    with pytest.raises(StepFailure) as info:
        sv.backtrack(problem, reg, state, sv.SolverConfig(max_backtracks=3))
    assert info.value.candidate is not None and info.value.gamma == pytest.approx(0.125)


def test_step_failure_stops_run_with_partial_result(rng, monkeypatch):
    problem, reg, lip, state = quadratic_state(rng)
    real = sv.smooth_value_and_grad
    monkeypatch.setattr(sv, "smooth_value_and_grad", lambda r, x: (real(r, x)[0], -real(r, x)[1] - 1.0))
    result = sv.run_forward(problem, reg, sv.SolverConfig(max_backtracks=3))
    assert not result.converged and result.failure and result.iterations == 0


@pytest.mark.parametrize("kind", ["lsr", "red", "dsv"])
@pytest.mark.parametrize("task", ["sisr", "csmri", "inpaint"])
def test_monotone_descent_with_random_weights(kind, task):
    x_gt = data.synthetic_image((8, 8), 0, 0)
    model = {"sisr": fm.BlurDownsample(fm.uniform_kernel(3), 2, (8, 8)),
             "csmri": fm.FourierMask(fm.radial_mask((8, 8), 0.3)),
             "inpaint": fm.InpaintMask(fm.random_inpaint_mask((8, 8), 0.5, 1))}[task]
    problem = fm.simulate(model, x_gt, 0.01 if task != "inpaint" else 0.0, seed=2)
    reg = rg.Regularizer(kind, gc.tiny_weights(1), 0.1)
    cfg = sv.SolverConfig(max_iters=40)
    xs = [problem.model.initial_estimate(problem.y)]
    res = sv.run_forward(problem, reg, cfg, callback=lambda s: xs.append(s.x.copy()))
    f = np.array(res.f_history)
    assert np.all(np.diff(f) <= 0)
    for k, gamma in enumerate(res.gamma_history, 1):
        assert sv.sufficient_decrease(f[k - 1], f[k], xs[k - 1], xs[k], gamma, cfg.rho)


def test_tau_zero_inpainting_converges_fast(rng):
    x = rng.random((8, 8))
    problem = fm.simulate(fm.InpaintMask(fm.random_inpaint_mask((8, 8), 0.3, 0)), x, 0.0)
    res = sv.run_forward(problem, None, sv.SolverConfig(), x0=rng.random((8, 8)))
    assert res.converged and res.iterations <= 2
    assert np.array_equal(problem.model.forward(res.x_bar), problem.y)


def test_converged_runs_satisfy_stopping_rule(tiny_weights):
    x_gt = data.synthetic_image((8, 8), 0, 1)
    problem = fm.simulate(fm.BlurDownsample(fm.uniform_kernel(3), 1, (8, 8)), x_gt, 0.01, seed=0)
    reg = rg.Regularizer("lsr", tiny_weights, 0.1)
    res = sv.run_forward(problem, reg, sv.SolverConfig())
    assert res.converged and res.final_residual < 1e-2
    assert sv.fixed_point_gap(problem, reg, res.x_bar, res.gamma) < 0.1


def test_zero_previous_iterate_uses_unit_denominator():
    assert sv.relative_change(np.ones(4), np.zeros(4)) == 2.0


def test_fixed_step_below_inverse_lipschitz_decreases():
    problem, reg, lip = toy_problem()
    res = sv.run_forward(problem, reg, sv.SolverConfig(gamma0=1.0 / (reg.tau * lip), line_search=False,
                                                       epsilon=1e-8, max_iters=300))
    assert np.all(np.diff(res.f_history) <= 1e-15)


def test_residuals_have_no_sustained_increase():
    problem, reg, lip = toy_problem()
    res = sv.run_forward(problem, reg, sv.SolverConfig(gamma0=10.0, epsilon=1e-8, max_iters=500))
    r = np.array(res.residual_history)
    for i in range(len(r) - 10):
        assert not np.all(np.diff(r[i:i + 11]) > 0)


def test_step_expansion_recovers_gamma0():
    problem, reg, lip = toy_problem()
    res = sv.run_forward(problem, reg, sv.SolverConfig(gamma0=4.0, epsilon=1e-6, max_iters=200))
    strict = sv.run_forward(problem, reg, sv.SolverConfig(gamma0=4.0, epsilon=1e-6, max_iters=200,
                                                          expand_step=False))
    assert np.all(np.diff(strict.gamma_history) <= 0)
    assert max(res.gamma_history) <= 4.0


def test_trace_csv(tmp_path):
    problem, reg, lip = toy_problem()
    res = sv.run_forward(problem, reg, sv.SolverConfig())
    path = tmp_path / "trace.csv"
    sv.write_trace(res, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["k", "f", "residual", "gamma"]
    assert len(rows) == res.iterations + 2
    assert [float(r[1]) for r in rows[1:]] == res.f_history
