import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualct.forward import (
    CLAMP_COUNTS,
    MeasurementSet,
    NoiseSpec,
    load_measurements,
    mean_counts,
    save_measurements,
    simulate,
)
from dualct.projector import ImageGrid, ScanGeometry, build_system_matrix
from dualct.spectra import EnergySpectrum, default_spectra, klein_nishina, photoelectric_basis

LOW, HIGH = default_spectra()


@pytest.fixture(scope="module")
def setup():
    grid = ImageGrid.square(12, 20.0)
    geom = ScanGeometry.parallel(grid, 10, 18)
    return grid, build_system_matrix(grid, geom)


def random_scene(rng, n):
    return rng.uniform(0.0, 0.3, n), rng.uniform(0.0, 6000.0, n)


def test_zero_scene_gives_blank(setup):
    grid, A = setup
    z = np.zeros(grid.n_pixels)
    np.testing.assert_allclose(mean_counts(A, z, z, LOW), LOW.blank_scan(), rtol=1e-14)


def test_single_bin_beer_lambert():
    grid = ImageGrid(2.0, 1.0, 2, 1)
    A = build_system_matrix(grid, ScanGeometry((0.0, 90.0), 2, 1.0))
    spec = EnergySpectrum(np.array([70.0]), np.array([1000.0]), np.array([1.0]))
    c, p = np.array([0.2, 0.1]), np.array([3000.0, 500.0])
    fk, fp = klein_nishina(70.0), photoelectric_basis(70.0)
    dense = A.matrix.toarray()
    expected = [1000.0 * np.exp(-fk * (row @ c) - fp * (row @ p)) for row in dense]
    # by hand: the 90 degree view crosses both pixels, the 0 degree view one pixel each
    assert dense[2] @ c == pytest.approx(0.3)
    np.testing.assert_allclose(mean_counts(A, c, p, spec), expected, rtol=1e-14)


def test_mean_counts_errors(setup):
    grid, A = setup
    with pytest.raises(ValueError):
        mean_counts(A, np.zeros(3), np.zeros(3), LOW)
    bad = np.zeros(grid.n_pixels)
    bad[0] = np.nan
    with pytest.raises(ValueError):
        mean_counts(A, bad, np.zeros(grid.n_pixels), LOW)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_monotone_in_c_and_p(setup, seed):
    grid, A = setup
    rng = np.random.default_rng(seed)
    c, p = random_scene(rng, grid.n_pixels)
    y0 = mean_counts(A, c, p, LOW)
    assert np.all(mean_counts(A, c + rng.uniform(0, 0.05, c.size), p, LOW) <= y0)
    m0 = simulate(A, c, p, LOW, HIGH, NoiseSpec.noise_free())
    j = rng.integers(grid.n_pixels)
    for dc, dp in ((1e-3, 0.0), (0.0, 50.0)):
        c2, p2 = c.copy(), p.copy()
        c2[j] += dc
        p2[j] += dp
        m1 = simulate(A, c2, p2, LOW, HIGH, NoiseSpec.noise_free())
        assert np.all(m1.m_low >= m0.m_low) and np.all(m1.m_high >= m0.m_high)


def test_noise_free_zero_scene(setup):
    grid, A = setup
    z = np.zeros(grid.n_pixels)
    ms = simulate(A, z, z, LOW, HIGH, NoiseSpec.noise_free())
    assert np.all(ms.m_low == 0.0) and np.all(ms.m_high == 0.0)


def test_noise_free_is_log_of_mean(setup):
    grid, A = setup
    c, p = random_scene(np.random.default_rng(3), grid.n_pixels)
    ms = simulate(A, c, p, LOW, HIGH, NoiseSpec.noise_free())
    np.testing.assert_array_equal(ms.m_low, -np.log(mean_counts(A, c, p, LOW) / LOW.blank_scan()))
    np.testing.assert_array_equal(ms.m_high, -np.log(mean_counts(A, c, p, HIGH) / HIGH.blank_scan()))


@pytest.mark.parametrize("k", [0.5, 3.0, 1e3])
def test_spectrum_scaling_invariance(setup, k):
    grid, A = setup
    c, p = random_scene(np.random.default_rng(4), grid.n_pixels)
    ref = simulate(A, c, p, LOW, HIGH, NoiseSpec.noise_free())
    scaled = simulate(A, c, p, LOW.scaled(k), HIGH.scaled(k), NoiseSpec.noise_free())
    np.testing.assert_allclose(scaled.m_low, ref.m_low, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(scaled.m_high, ref.m_high, rtol=1e-12, atol=1e-13)


def test_seeded_determinism(setup):
    grid, A = setup
    c, p = random_scene(np.random.default_rng(5), grid.n_pixels)
    noise = NoiseSpec(True, 50.0, 42)
    a = simulate(A, c, p, LOW, HIGH, noise)
    b = simulate(A, c, p, LOW, HIGH, noise)
    assert a.m_low.tobytes() == b.m_low.tobytes() and a.m_high.tobytes() == b.m_high.tobytes()
    other = simulate(A, c, p, LOW, HIGH, NoiseSpec(True, 50.0, 43))
    assert not np.array_equal(a.m_low, other.m_low)


def test_poisson_variance():
    grid = ImageGrid(1.0, 1.0, 1, 1)
    A = build_system_matrix(grid, ScanGeometry((0.0,), 1, 1.0))
    spec = EnergySpectrum(np.array([60.0]), np.array([1e3]), np.array([1.0]))
    samples = np.empty(10_000)
    for k in range(samples.size):
        ms = simulate(A, [0.0], [0.0], spec, spec, NoiseSpec(True, None, k))
        samples[k] = np.exp(-ms.m_low[0]) * 1e3
    assert samples.var() == pytest.approx(1e3, rel=0.05)
    assert samples.mean() == pytest.approx(1e3, rel=0.01)


def test_background_noise_sigma_and_clamp(setup):
    grid, A = setup
    c = np.full(grid.n_pixels, 0.1)
    p = np.full(grid.n_pixels, 1000.0)
    ms = simulate(A, c, p, LOW, HIGH, NoiseSpec(False, 60.0, 0))
    y = mean_counts(A, c, p, LOW)
    assert ms.noise_meta["sigma_r_low"] == pytest.approx(y.mean() / 1e3)
    assert ms.noise_meta["clamped_low"] == 0
    with pytest.warns(RuntimeWarning):
        harsh = simulate(A, c, p, LOW, HIGH, NoiseSpec(False, -20.0, 0))
    assert harsh.noise_meta["clamped_low"] > 0 and harsh.noise_meta["warnings"]
    assert np.isclose(harsh.m_low, -np.log(CLAMP_COUNTS / LOW.blank_scan())).sum() == harsh.noise_meta["clamped_low"]


def test_measurement_roundtrip(tmp_path, setup):
    grid, A = setup
    c, p = random_scene(np.random.default_rng(6), grid.n_pixels)
    ms = simulate(A, c, p, LOW, HIGH, NoiseSpec(True, 60.0, 7))
    save_measurements(ms, tmp_path / "m", A.digest())
    back, header = load_measurements(tmp_path / "m")
    np.testing.assert_array_equal(back.m_low, ms.m_low)
    np.testing.assert_array_equal(back.m_high, ms.m_high)
    assert header["geometry_hash"] == A.digest() and header["noise"]["seed"] == 7


def test_measurement_invariants():
    with pytest.raises(ValueError):
        MeasurementSet(np.zeros(3), np.zeros(2), 1.0, 1.0)
    with pytest.raises(ValueError):
        MeasurementSet(np.zeros(2), np.zeros(2), 0.0, 1.0)
    with pytest.raises(ValueError):
        MeasurementSet(np.array([np.inf]), np.zeros(1), 1.0, 1.0)
    with pytest.raises(ValueError):
        NoiseSpec(True, float("nan"), 0)
