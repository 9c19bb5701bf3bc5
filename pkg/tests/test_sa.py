import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from onoffsa.convexity import LatticeFunction, pli_evaluate
from onoffsa.estimator import ExactEstimator
from onoffsa.sa import (
    METHODS,
    CalibrationError,
    StepSchedule,
    calibrate_a,
    cspsa_gradient,
    dspsa_gradient,
    lnatural_subgradient,
    perturbation_size,
    project_random_round,
    round_nearest,
    run_sa,
    step_size,
)
from test_convexity import lnatural_table


class TableEstimator:
    """Noise-free lattice function with a call counter."""

    def __init__(self, func):
        self.func = func
        self.n_calls = 0

    def __call__(self, theta):
        self.n_calls += 1
        return float(self.func(np.asarray(theta)))


def linear(c):
    c = np.asarray(c, float)
    return TableEstimator(lambda t: float(c @ t))


def test_step_size_examples():
    assert step_size(1, StepSchedule(1.0, 1.0, 1.0)) == 0.5
    assert step_size(1, StepSchedule(0.75)) == pytest.approx(0.75 / 48.5**0.602)
    a = [step_size(n, StepSchedule(0.75)) for n in range(1, 200)]
    assert all(x > y > 0 for x, y in zip(a, a[1:]))
    assert perturbation_size(1, StepSchedule(1.0)) == 1.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        StepSchedule(1.0, alpha=0.5)
    with pytest.raises(ValueError):
        StepSchedule(-1.0)
    with pytest.raises(ValueError):
        step_size(0, StepSchedule(1.0))


def test_round_nearest_ties_down():
    assert round_nearest([2.5, 2.51, 0.49, 3.0]).tolist() == [2, 3, 0, 3]


def test_random_round():
    rng = np.random.default_rng(0)
    assert project_random_round([2.0, 0.0, 5.0], rng).tolist() == [2, 0, 5]
    draws = np.array([project_random_round([2.25], rng)[0] for _ in range(10000)])
    assert set(draws.tolist()) == {2, 3}
    assert abs(draws.mean() - 2.25) < 0.02


@settings(max_examples=30)
@given(x=st.lists(st.floats(0, 10), min_size=1, max_size=6), seed=st.integers(0, 2**31))
def test_random_round_brackets(x, seed):
    r = project_random_round(x, np.random.default_rng(seed))
    assert np.all(r >= np.floor(x)) and np.all(r <= np.ceil(x))


def test_dspsa_symmetric_in_delta():
    rng = np.random.default_rng(3)
    T = rng.normal(size=(5, 5, 5))
    est = TableEstimator(lambda t: T[tuple(t)])
    upper = np.array([4, 4, 4])
    d = np.array([1, -1, 1])
    g1 = dspsa_gradient(est, [1.3, 2.7, 0.2], rng, upper, delta=d)
    g2 = dspsa_gradient(est, [1.3, 2.7, 0.2], rng, upper, delta=-d)
    assert np.array_equal(g1, g2)


def test_dspsa_constant_is_zero():
    est = TableEstimator(lambda t: 7.0)
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert np.all(dspsa_gradient(est, [1.5, 2.5], rng, np.array([4, 4])) == 0)
    assert est.n_calls == 20


def test_dspsa_mean_sign_on_separable_convex():
    c = np.array([1.0, 3.0, 2.0])
    est = TableEstimator(lambda t: float(np.sum((t - c) ** 2)))
    upper = np.array([5, 5, 5])
    x = np.array([3.4, 0.6, 2.0])
    rng = np.random.default_rng(1)
    g = np.mean([dspsa_gradient(est, x, rng, upper) for _ in range(1000)], axis=0)
    p = np.floor(x)
    slope = (p + 1 - c) ** 2 - (p - c) ** 2
    assert np.array_equal(np.sign(g), np.sign(slope))


def test_lnatural_linear_gives_exact_gradient():
    c = [1.5, -2.0, 0.25]
    est = linear(c)
    g = lnatural_subgradient(est, [0.2, 3.9, 1.0], np.array([5, 5, 5]))
    assert np.allclose(g, c)
    assert est.n_calls == 4


def test_lnatural_one_dimensional_forward_difference():
    T = np.array([4.0, 1.0, 0.5, 3.0])
    est = TableEstimator(lambda t: T[t[0]])
    assert lnatural_subgradient(est, [1.4], np.array([3])).tolist() == [T[2] - T[1]]
    # integer point on the upper face uses the last cell
    assert lnatural_subgradient(est, [3.0], np.array([3])).tolist() == [T[3] - T[2]]


@pytest.mark.parametrize("seed", range(3))
def test_lnatural_subgradient_inequality(seed):
    rng = np.random.default_rng(seed)
    T = lnatural_table((6, 6, 6), rng)
    fn = LatticeFunction.from_table(T)
    est = TableEstimator(fn)
    upper = fn.upper
    for _ in range(40):
        x = rng.uniform(0, 5, 3)
        g = lnatural_subgradient(est, x, upper)
        fx = pli_evaluate(fn, x)
        for _ in range(10):
            y = rng.uniform(0, 5, 3)
            assert pli_evaluate(fn, y) >= fx + g @ (y - x) - 1e-9


def test_cspsa_integer_point_is_deterministic():
    c = np.array([2.0, -1.0])
    est = linear(c)
    rng = np.random.default_rng(0)
    sched = StepSchedule(1.0, C=1.0)
    d = np.array([1, -1])
    g = cspsa_gradient(est, [2.0, 2.0], 1, sched, rng, np.array([5, 5]), delta=d)
    assert np.allclose(g, (c @ d) / d)


def test_cspsa_mean_aligns_with_quadratic_gradient():
    c = np.array([1.0, 4.0, 2.5])
    est = TableEstimator(lambda t: float(np.sum((t - c) ** 2)))
    upper = np.array([6, 6, 6])
    x = np.array([3.3, 1.2, 2.5])
    rng = np.random.default_rng(7)
    sched = StepSchedule(1.0)
    gs = np.array([cspsa_gradient(est, x, 10, sched, rng, upper) for _ in range(1000)])
    true = 2 * (x - c)
    se = gs.std(axis=0, ddof=1) / math.sqrt(len(gs))
    assert np.all(np.abs(gs.mean(axis=0) - true) < 4 * se + 0.05)
    assert gs.mean(axis=0) @ true > 0


def test_calibrate_unit_gradient():
    est = linear([1.0])
    A = calibrate_a(est, [2.5], "lnatural", np.array([5]))
    assert A == pytest.approx(0.1 * 48.5**0.602)
    assert A == pytest.approx(1.034, abs=1e-3)
    assert calibrate_a(est, [2.5], "lnatural", np.array([5]), target_step=0.2) == pytest.approx(2 * A)


def test_calibrate_zero_gradient_fails():
    with pytest.raises(CalibrationError):
        calibrate_a(TableEstimator(lambda t: 1.0), [2.5, 1.0], "dspsa", np.array([5, 5]))


@pytest.mark.parametrize("method,per_iter", [("dspsa", 2), ("lnatural", 4), ("cspsa", 2)])
def test_measurement_accounting(method, per_iter):
    est = TableEstimator(lambda t: float(np.sum((t - 2) ** 2)))
    tr = run_sa(method, est, [1.0, 4.0, 3.0], 30, StepSchedule(0.5), 0, np.array([5, 5, 5]))
    assert tr.meas_count[0] == 0
    assert np.all(tr.meas_count[1:] == per_iter)
    assert est.n_calls == 30 * per_iter


@pytest.mark.parametrize("method", METHODS)
def test_zero_step_stays_put(method):
    est = TableEstimator(lambda t: float(np.sum(t**2)))
    tr = run_sa(method, est, [1.5, 2.5], 20, StepSchedule(0.0), 0, np.array([4, 4]))
    assert np.all(tr.theta == [1.5, 2.5])


@settings(max_examples=20, deadline=None)
@given(method=st.sampled_from(METHODS), seed=st.integers(0, 1000), A=st.floats(0.1, 50.0))
def test_iterates_stay_in_box(method, seed, A):
    rng = np.random.default_rng(seed)
    T = rng.normal(scale=10, size=(4, 4))
    est = TableEstimator(lambda t: T[tuple(t)])
    tr = run_sa(method, est, [1.5, 1.5], 30, StepSchedule(A), seed, np.array([3, 3]))
    assert np.all(tr.theta >= 0) and np.all(tr.theta <= 3)


@pytest.mark.parametrize("method", METHODS)
def test_converges_on_separable_quadratic(method):
    c = np.array([1.0, 4.0, 2.0, 3.0])
    est = TableEstimator(lambda t: float(np.sum((t - c) ** 2)))
    upper = np.full(4, 6)
    A = calibrate_a(est, [5.5, 0.5, 5.5, 0.5], method, upper)
    tr = run_sa(method, est, [5.5, 0.5, 5.5, 0.5], 400, StepSchedule(A), 1, upper,
                oracle=(c, lambda t: float(np.sum((t - c) ** 2))))
    assert tr.norm_err[-1] < 0.35
    assert tr.j_rounded[-1] < tr.j_rounded[0] / 4


def test_same_seed_reproduces():
    est = TableEstimator(lambda t: float(np.sum((t - 2) ** 2)))
    a = run_sa("cspsa", est, [4.0, 0.0], 50, StepSchedule(0.5), 3, np.array([5, 5]))
    b = run_sa("cspsa", est, [4.0, 0.0], 50, StepSchedule(0.5), 3, np.array([5, 5]))
    assert np.array_equal(a.theta, b.theta)


def test_oracle_absolute_error_at_optimum():
    est = TableEstimator(lambda t: float(np.sum((t - 2) ** 2)))
    tr = run_sa("lnatural", est, [2.0, 2.0], 5, StepSchedule(0.5), 0, np.array([4, 4]),
                oracle=(np.array([2, 2]), est.func))
    assert tr.norm_absolute and tr.norm_err[0] == 0.0


def test_noiseless_lnatural_converges_on_k2(k2_scenario, k2_dp):
    # invariant: exact objective in place of the estimate, normalized error < 0.1 at n = 500
    ex = ExactEstimator(k2_scenario)
    theta0 = k2_scenario.upper / 2.0
    A = calibrate_a(ex, theta0, "lnatural", k2_scenario.upper)
    tr = run_sa("lnatural", ex, theta0, 500, StepSchedule(A), 0, k2_scenario.upper,
                oracle=(k2_dp.theta_star, k2_scenario.objective_exact))
    assert tr.norm_err[-1] < 0.1, f"normalized error {tr.norm_err[-1]:.3f} at {tr.theta[-1]}"
