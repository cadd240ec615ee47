import numpy as np
import pytest
from conftest import SPECTRA, random_instance
from hypothesis import given, settings
from hypothesis import strategies as st

from dualct.forward import NoiseSpec, simulate
from dualct.objective import ObjectiveConfig
from dualct.pals import compose, initial_model
from dualct.projector import ImageGrid, ScanGeometry, build_system_matrix
from dualct.solver import (
    CONTRAST_BLOCK,
    SHAPE_BLOCK,
    SOLVER_TRACE_COLUMNS,
    LmConfig,
    LmError,
    ScheduleConfig,
    coordinate_descent,
    flat_background_fit,
    format_solver_trace,
    load_checkpoint,
    lm_minimize,
    stop_check,
)


def test_stop_check_examples():
    x = np.array([1.0, 2.0])
    assert stop_check(x, x, 1e-6, 0, 20)
    assert not stop_check([1.0], [0.0], 1e-6, 5, 20)
    assert stop_check([1.0], [0.0], 1e-6, 21, 20)
    assert not stop_check([1.0], [0.0], 1e-6, 20, 20)
    with pytest.raises(ValueError):
        stop_check([1.0], [1.0, 2.0], 1e-6, 0, 1)


def linear_problem(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(12, 4))
    b = rng.normal(size=12)
    return M, b


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_least_squares(seed):
    M, b = linear_problem(seed)
    theta, trace = lm_minimize(lambda t: M @ t - b, lambda t, cols: M[:, cols], np.zeros(4),
                               config=LmConfig(mu0=1e-12, step_tolerance=1e-10))
    expected = np.linalg.lstsq(M, b, rcond=None)[0]
    np.testing.assert_allclose(theta, expected, rtol=1e-8, atol=1e-10)
    assert trace.n_accepted <= 3


def rosenbrock(t):
    return np.array([10.0 * (t[1] - t[0] ** 2), 1.0 - t[0]])


def rosenbrock_jac(t, cols):
    return np.array([[-20.0 * t[0], 10.0], [-1.0, 0.0]])[:, cols]


@pytest.mark.parametrize("start", [(-1.2, 1.0), (2.0, -1.0), (0.0, 0.0)])
def test_rosenbrock(start):
    theta, trace = lm_minimize(rosenbrock, rosenbrock_jac, start,
                               config=LmConfig(max_inner_iters=500, step_tolerance=1e-14))
    np.testing.assert_allclose(theta, [1.0, 1.0], atol=1e-8)
    assert np.all(np.diff(trace.costs) < 0)


@pytest.mark.parametrize("scaling", [True, False])
def test_mask_freezes_bit_exact(scaling):
    M, b = linear_problem(3)
    theta0 = np.array([0.3, -1.7, 2.2, 0.9])
    mask = np.array([True, False, True, False])
    theta, _ = lm_minimize(lambda t: M @ t - b, lambda t, cols: M[:, cols], theta0, mask,
                           LmConfig(column_scaling=scaling))
    assert theta[1] == theta0[1] and theta[3] == theta0[3]
    sub = np.linalg.lstsq(M[:, mask], b - M[:, ~mask] @ theta0[~mask], rcond=None)[0]
    np.testing.assert_allclose(theta[mask], sub, rtol=1e-6)


def test_empty_mask_is_noop():
    M, b = linear_problem(4)
    theta, trace = lm_minimize(lambda t: M @ t - b, lambda t, cols: M[:, cols], np.ones(4), np.zeros(4, bool))
    np.testing.assert_array_equal(theta, 1.0)
    assert trace.stop_reason == "empty active set"


def test_lm_errors():
    with pytest.raises(LmError):
        lm_minimize(lambda t: np.array([np.nan]), lambda t, cols: np.ones((1, 1)), [0.0])
    with pytest.raises(ValueError):
        lm_minimize(lambda t: np.zeros(3), lambda t, cols: np.ones((2, 1)), [0.0])
    with pytest.raises(ValueError):
        LmConfig(mu0=0.0)
    with pytest.raises(ValueError):
        LmConfig(nu=1.0)
    with pytest.raises(ValueError):
        ScheduleConfig(k_max=0)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_accepted_costs_strictly_decrease(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0.5, 2.0, 2)
    x = np.linspace(0, 2, 15)
    y = a * np.exp(-b * x) + 0.01 * rng.normal(size=15)
    res = lambda t: t[0] * np.exp(-t[1] * x) - y
    jac = lambda t, cols: np.column_stack([np.exp(-t[1] * x), -t[0] * x * np.exp(-t[1] * x)])[:, cols]
    _, trace = lm_minimize(res, jac, [1.0, 1.0], config=LmConfig(max_inner_iters=100))
    assert np.all(np.diff(trace.costs) < 0)


def test_flat_background_fit_recovers_constant():
    grid = ImageGrid.square(8, 20.0)
    A = build_system_matrix(grid, ScanGeometry.parallel(grid, 6, 12))
    n = grid.n_pixels
    data = simulate(A, np.full(n, 0.21), np.full(n, 4300.0), *SPECTRA, NoiseSpec.noise_free())
    c, p = flat_background_fit(A, data, SPECTRA)
    assert c == pytest.approx(0.21, rel=1e-6) and p == pytest.approx(4300.0, rel=1e-5)


def test_single_pixel_curve_fit():
    grid = ImageGrid(2.0, 2.0, 1, 1)
    A = build_system_matrix(grid, ScanGeometry((0.0, 45.0, 90.0), 1, 2.0))
    data = simulate(A, [0.21], [4300.0], *SPECTRA, NoiseSpec.noise_free())
    cfg = ObjectiveConfig(lambda1=0.0, lambda2=0.0, penalty_r=0.0, sigma_weight=1.0)
    rep = coordinate_descent(initial_model(grid, 0.19, 5000.0, seed=0), data, cfg, LmConfig(),
                             ScheduleConfig(k_max=50), A=A, spectra=SPECTRA)
    assert rep.final_cost < 1e-10
    s = compose(rep.model)
    assert s.c_image[0] == pytest.approx(0.21, rel=1e-6) and s.p_image[0] == pytest.approx(4300.0, rel=1e-6)


@pytest.fixture(scope="module")
def short_solve(tmp_path_factory):
    obj, model = random_instance(41, n=12)
    sched = ScheduleConfig(k_max=4, max_outer_cycles=3)
    ckpt = tmp_path_factory.mktemp("ckpt") / "model.json"
    run = lambda path=None: coordinate_descent(model, obj.data, obj.config, LmConfig(), sched, A=obj.A,
                                               spectra=SPECTRA, checkpoint_path=path)
    return model, run(ckpt), run(), ckpt, obj


def test_schedule_alternates_blocks(short_solve):
    model, rep, _, _, _ = short_solve
    assert rep.cycle_blocks[:2] == ["shape", "contrast"]
    assert len(rep.cycle_blocks) == 2 * rep.n_cycles
    rows = rep.cost_trace
    assert rows[0]["block"] == "init"
    F = [r["F_p"] for r in rows]
    assert all(np.isfinite(F)) and np.all(np.diff(F) <= 0)


@pytest.mark.parametrize("block", [SHAPE_BLOCK, CONTRAST_BLOCK])
def test_blocks_frozen_on_objective(block):
    obj, model = random_instance(42, n=12)
    mask = model.block_mask(*block)
    theta, trace = lm_minimize(lambda t: obj.residuals(model.with_theta(t)).vector,
                               lambda t, cols: obj.jacobian(model.with_theta(t), cols),
                               model.theta, mask, LmConfig(max_inner_iters=3))
    assert trace.n_accepted > 0
    assert theta[~mask].tobytes() == model.theta[~mask].tobytes()
    assert not np.array_equal(theta[mask], model.theta[mask])


def test_solve_is_deterministic(short_solve):
    _, a, b, _, _ = short_solve
    assert a.model.theta.tobytes() == b.model.theta.tobytes()
    assert format_solver_trace(a.cost_trace) == format_solver_trace(b.cost_trace)
    assert a.stop_reason == b.stop_reason


def test_checkpoint_roundtrip(short_solve):
    _, rep, _, path, obj = short_solve
    model, grid, cycle = load_checkpoint(path)
    assert cycle == rep.n_cycles and grid == obj.A.grid
    np.testing.assert_array_equal(model.theta, rep.model.theta)


def test_trace_csv(short_solve):
    _, rep, _, _, _ = short_solve
    lines = format_solver_trace(rep.cost_trace).splitlines()
    assert lines[0] == ",".join(SOLVER_TRACE_COLUMNS)
    assert lines[1].startswith("0,init,0,")
    assert len(lines) == len(rep.cost_trace) + 1
