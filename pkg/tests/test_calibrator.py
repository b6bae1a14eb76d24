import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fxlv.calibrator import (CalibrationProblem, DampingError, GridBackend, MonteCarloBackend,
                             SolverSettings, avg_error, bump_sizes, calibrate, initial_surface,
                             jacobian_fd, levenberg_marquardt, lm_checks, lm_step, residuals)
from fxlv.vol_surface import to_params


class Affine:
    """f(x) = B x + b."""

    def __init__(self, B, b):
        self.B, self.b = np.asarray(B, float), np.asarray(b, float)
        self.settings = SolverSettings()

    def residuals(self, x):
        return self.B @ x + self.b


class Rosenbrock:
    settings = SolverSettings(tol_f=1e-12)

    def residuals(self, x):
        return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])


# ---------------------------------------------------------------------------
# residuals and error measure


@pytest.fixture(scope="module")
def small_problem(snapshot, instruments):
    chosen = [i for i in instruments if i.kind == "ATMF" or i.tenor in ("3M", "1Y")]
    return CalibrationProblem(snapshot, chosen, initial_surface(snapshot, chosen), half_width=20)


def test_residuals_vanish_at_targets(snapshot, small_problem):
    x0 = to_params(small_problem.initial)
    model = small_problem.model_prices(x0)
    exact = CalibrationProblem(snapshot, small_problem.instruments, small_problem.initial,
                               targets=model, half_width=20)
    assert np.all(residuals(x0, exact) == 0.0)
    scaled = CalibrationProblem(snapshot, small_problem.instruments, small_problem.initial,
                                targets=model / 1.5, half_width=20)
    np.testing.assert_allclose(residuals(x0, scaled), 0.5, rtol=0, atol=1e-15)


@pytest.mark.parametrize("f, expected", [(np.zeros(5), 0.0), (np.full(59, 0.0003), 0.0003)])
def test_avg_error_values(f, expected):
    assert avg_error(f) == pytest.approx(expected, rel=1e-15, abs=0)


@given(arrays(float, st.integers(1, 80), elements=st.floats(-1, 1)))
def test_avg_error_matches_direct_sum(f):
    direct = math.sqrt(math.fsum(v * v for v in f) / len(f))
    assert avg_error(f) == pytest.approx(direct, rel=1e-14, abs=1e-300)


def test_problem_rejects_bad_targets(snapshot, small_problem):
    with pytest.raises(Exception):
        CalibrationProblem(snapshot, small_problem.instruments, small_problem.initial,
                           targets=np.zeros(small_problem.m))
    with pytest.raises(Exception):
        CalibrationProblem(snapshot, [], small_problem.initial)


# ---------------------------------------------------------------------------
# Jacobian


def test_jacobian_of_affine_map():
    rng = np.random.default_rng(1)
    B = rng.standard_normal((7, 4))
    A = jacobian_fd(rng.uniform(0.01, 0.1, 4), Affine(B, rng.standard_normal(7)))
    np.testing.assert_allclose(A, B, rtol=0, atol=1e-9)


def test_bump_sizes():
    h = bump_sizes(np.array([0.01, 0.5, -2.0]))
    np.testing.assert_array_equal(h, [1e-4, 5e-4, 2e-3])


@pytest.fixture(scope="module")
def full_jacobian(snapshot, instruments):
    problem = CalibrationProblem(snapshot, instruments, initial_surface(snapshot, instruments),
                                 half_width=20)
    return problem, jacobian_fd(to_params(problem.initial), problem)


def test_jacobian_shape(full_jacobian):
    _, A = full_jacobian
    assert A.shape == (59, 198)


def test_unreachable_pillar_has_zero_column(full_jacobian):
    # at t = 0 only the root (s = 0.5) is visited, so the s = 0 pillar never enters a price
    problem, A = full_jacobian
    k = 0 * problem.initial.shape[1] + 0
    assert np.linalg.norm(A[:, k]) < 1e-10
    assert np.linalg.norm(A[:, 1 * problem.initial.shape[1] + 5]) > 1e-3


# ---------------------------------------------------------------------------
# damped step and checks


def test_lm_step_small_system():
    np.testing.assert_allclose(lm_step(np.eye(2), np.array([1.0, 1.0]), 1.0), [-0.5, -0.5], atol=1e-15)


def test_lm_step_newton_limit():
    A = np.array([[2.0, 1.0], [0.5, 3.0]])
    f = np.array([1.0, -2.0])
    np.testing.assert_allclose(lm_step(A, f, 0.0), -np.linalg.solve(A, f), rtol=1e-12)


def test_lm_step_gradient_limit():
    rng = np.random.default_rng(2)
    A, f = rng.standard_normal((5, 3)), rng.standard_normal(5)
    alpha = 1e9
    w = lm_step(A, f, alpha)
    np.testing.assert_allclose(w, -A.T @ f / alpha, rtol=1e-6)
    assert np.linalg.norm(lm_step(A, f, 10 * alpha)) < np.linalg.norm(w)


def test_lm_step_singular_without_damping():
    with pytest.raises(DampingError):
        lm_step(np.zeros((3, 2)), np.ones(3), 0.0)
    with pytest.raises(ValueError):
        lm_step(np.eye(2), np.ones(2), -1.0)


def test_lm_checks():
    A, f = np.eye(2), np.array([1.0, 1.0])
    w = lm_step(A, f, 1.0)
    assert lm_checks(w, A, f, f + A @ w, 1.0)
    assert not lm_checks(np.zeros(2), A, f, f, 1.0)
    assert not lm_checks(w, A, f, 2 * f, 1.0)
    assert not lm_checks(-w, A, f, 0.5 * f, 1.0)


# ---------------------------------------------------------------------------
# solver


def test_affine_problem_converges_fast():
    rng = np.random.default_rng(0)
    B = 2 * np.eye(6) + 0.3 * rng.standard_normal((6, 6))
    x_true = rng.uniform(0.03, 0.06, 6)
    x0 = x_true + rng.uniform(-0.01, 0.01, 6)
    result = levenberg_marquardt(Affine(B, -B @ x_true), x0, SolverSettings(tol_f=1e-10))
    assert np.linalg.norm(result.f) <= 1e-10
    assert result.n_accepted <= 3 and result.n_rejected == 0
    np.testing.assert_allclose(result.x, x_true, atol=1e-10)


def test_affine_gauss_newton_limit():
    rng = np.random.default_rng(4)
    B = rng.standard_normal((9, 4))
    x_true = rng.standard_normal(4)
    settings = SolverSettings(tol_f=1e-10, alpha0=1e-12)
    result = levenberg_marquardt(Affine(B, -B @ x_true), np.zeros(4), settings)
    assert np.linalg.norm(result.f) <= 1e-10
    assert result.n_accepted <= 2


def test_nonlinear_problem_monotone_trace():
    result = levenberg_marquardt(Rosenbrock(), np.array([-1.2, 1.0]))
    fn = [result.initial_fnorm2] + [e.fnorm2 for e in result.trace if e.accepted]
    assert all(b <= a for a, b in zip(fn, fn[1:]))
    assert result.status in ("converged-f", "converged-w")
    np.testing.assert_allclose(result.x, [1.0, 1.0], atol=1e-9)


def test_stalls_when_no_step_helps():
    class Stuck:
        settings = SolverSettings(alpha_max=1e3)

        def residuals(self, x):
            return np.array([1.0 + abs(x[0] - 0.5)])

    result = levenberg_marquardt(Stuck(), np.array([0.5]), jacobian=lambda x, f: np.array([[1.0]]))
    assert result.status == "stalled"
    assert result.n_accepted == 0 and result.n_rejected > 0
    assert result.x[0] == 0.5


def test_fixed_point_calibration(snapshot, small_problem):
    targets = small_problem.model_prices(to_params(small_problem.initial))
    problem = CalibrationProblem(snapshot, small_problem.instruments, small_problem.initial,
                                 targets=targets, half_width=20)
    report = calibrate(problem)
    assert report.iterations <= 1
    assert report.avg_error <= 1e-10
    assert report.surface == small_problem.initial


@pytest.fixture(scope="module")
def small_report(snapshot, small_problem):
    rng = np.random.default_rng(11)
    init = small_problem.initial
    truth = init.with_vols(init.vols * rng.uniform(0.9, 1.1, init.shape))
    targets = small_problem.pricer.prices(truth)
    problem = CalibrationProblem(snapshot, small_problem.instruments, init, targets=targets,
                                 half_width=20)
    return problem, calibrate(problem)


def test_small_self_consistent_calibration(small_report):
    _, report = small_report
    assert report.avg_error <= 1e-6
    fn = report.accepted_fnorm2()
    assert all(b <= a for a, b in zip(fn, fn[1:]))
    assert np.all(report.surface.vols >= 1e-6)


def test_report_is_consistent(small_report, tmp_path):
    _, report = small_report
    assert report.avg_error == pytest.approx(math.sqrt(np.mean(report.errors**2)), rel=1e-14)
    data = json.loads(report.to_json(tmp_path / "report.json"))
    assert data["avg_error"] == report.avg_error
    assert len(data["instruments"]) == len(report.labels)
    assert "bump" in data["settings"]
    report.write_trace_csv(tmp_path / "trace.csv")
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert len(rows) == len(report.trace)
    assert set(rows[0]) == {"iteration", "alpha", "fnorm2", "wnorm", "accepted"}


def test_calibration_is_deterministic(small_report):
    problem, report = small_report
    again = calibrate(problem)
    assert np.array_equal(again.params, report.params)
    assert again.trace == report.trace


def test_initial_surface_is_flat_in_state(snapshot, instruments):
    surf = initial_surface(snapshot, instruments)
    assert np.all(surf.vols == surf.vols[:, :1])
    one_year = np.argmin(np.abs(surf.time_pillars - 1.0))
    assert surf.vols[one_year, 0] == pytest.approx(0.043)
    assert surf.c0 == pytest.approx(0.043)


def test_grid_backend_resolution(snapshot, instruments):
    backend = GridBackend(snapshot, instruments, 50)
    res = backend.resolution()
    assert res["backend"] == "grid" and res["half_width"] == 50 and res["stencil"] == "blend"


def test_mc_backend_common_random_numbers(snapshot, instruments):
    chosen = instruments[-5:]
    backend = MonteCarloBackend(snapshot, chosen, 500, seed=3)
    surf = initial_surface(snapshot, chosen)
    first, second = backend.prices(surf), backend.prices(surf)
    assert np.array_equal(first, second)
    bumped = backend.prices(surf.with_vols(surf.vols * 1.01))
    assert np.all(bumped > first)
    assert backend.resolution()["seed"] == 3
