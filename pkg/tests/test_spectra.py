import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualct.spectra import (
    WATER,
    EnergySpectrum,
    MaterialPoint,
    SpectrumFormatError,
    attenuation,
    default_spectra,
    klein_nishina,
    load_spectrum,
    parse_spectrum,
    photoelectric_basis,
    synthetic_spectrum,
)

energies = st.floats(min_value=1.0, max_value=500.0, allow_nan=False)
coefs = st.floats(min_value=0.0, max_value=1e5, allow_nan=False)


def kn_mp(e_kev):
    mpmath.mp.dps = 50
    a = mpmath.mpf(e_kev) / mpmath.mpf("510.95")
    lg = mpmath.log(1 + 2 * a)
    return ((1 + a) / a**2 * (2 * (1 + a) / (1 + 2 * a) - lg / a)
            + lg / (2 * a) - (1 + 3 * a) / (1 + 2 * a) ** 2)


# 50-digit evaluation at alpha = 1; by hand 2(4/3 - ln 3) + ln(3)/2 - 4/9
KN_ALPHA_ONE = 0.57430378922005768513


def test_klein_nishina_alpha_one():
    assert float(kn_mp(510.95)) == pytest.approx(KN_ALPHA_ONE, rel=1e-15)
    assert klein_nishina(510.95) == pytest.approx(KN_ALPHA_ONE, rel=1e-12)


@pytest.mark.parametrize("e", [20.0, 60.0, 80.0, 140.0, 1000.0])
def test_klein_nishina_matches_high_precision(e):
    assert klein_nishina(e) == pytest.approx(float(kn_mp(e)), rel=1e-9)


def test_klein_nishina_positive_decreasing_on_band():
    e = np.arange(20.0, 141.0)
    f = klein_nishina(e)
    assert np.all(f > 0)
    assert np.all(np.diff(f) < 0)
    assert klein_nishina(60.0) > klein_nishina(120.0)


@pytest.mark.parametrize("bad", [0.0, -5.0, np.nan])
def test_basis_domain_errors(bad):
    with pytest.raises(ValueError):
        klein_nishina(bad)
    with pytest.raises(ValueError):
        photoelectric_basis(bad)


@pytest.mark.parametrize("e, expected", [(100.0, 1e-6), (1.0, 1.0), (10.0, 1e-3)])
def test_photoelectric_basis(e, expected):
    assert photoelectric_basis(e) == pytest.approx(expected, rel=1e-15)


def test_photoelectric_ratio():
    assert photoelectric_basis(50.0) / photoelectric_basis(100.0) == pytest.approx(8.0, rel=1e-15)


def test_attenuation_zero_material():
    assert attenuation(MaterialPoint(0.0, 0.0), 70.0) == 0.0


def test_water_compton_dominates_at_80kev():
    compton = WATER.c * klein_nishina(80.0)
    photo = WATER.p * photoelectric_basis(80.0)
    assert 15.0 <= compton / photo <= 45.0


@given(st.floats(0, 1), coefs, coefs, coefs, coefs, energies)
def test_attenuation_bilinear(t, c1, p1, c2, p2, e):
    mix = attenuation(MaterialPoint(t * c1 + (1 - t) * c2, t * p1 + (1 - t) * p2), e)
    lin = t * attenuation(MaterialPoint(c1, p1), e) + (1 - t) * attenuation(MaterialPoint(c2, p2), e)
    assert mix == pytest.approx(lin, rel=1e-12, abs=1e-300)


@given(coefs, coefs, energies)
def test_attenuation_linear_in_c(c, p, e):
    diff = attenuation(MaterialPoint(2 * c, p), e) - attenuation(MaterialPoint(c, p), e)
    assert diff == pytest.approx(c * klein_nishina(e), rel=1e-9, abs=1e-12 * (1 + p * photoelectric_basis(e)))


def test_two_bin_trapezoid_blank():
    s = parse_spectrum("energy_keV,counts\n60,1\n61,1\n")
    np.testing.assert_allclose(s.quadrature_weights, [0.5, 0.5])
    assert s.blank_scan() == pytest.approx(1.0)


def test_negative_count_names_line():
    with pytest.raises(SpectrumFormatError, match="line 3"):
        parse_spectrum("energy_keV,counts\n60,1\n61,-1\n")


@pytest.mark.parametrize("text, line", [
    ("energy_keV,counts\n60,1\n60,1\n", "line 3"),
    ("energy_keV,counts\n60,1\n61\n", "line 3"),
    ("energy_keV,counts\n60,x\n61,1\n", "line 2"),
])
def test_malformed_rows(text, line):
    with pytest.raises(SpectrumFormatError, match=line):
        parse_spectrum(text)


def test_constructor_invariants():
    with pytest.raises(ValueError):
        EnergySpectrum.from_table([60.0, 59.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        EnergySpectrum(np.array([60.0, 61.0]), np.array([1.0]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        EnergySpectrum.from_table([60.0, 61.0], [0.0, 0.0])


def test_shipped_totals():
    low, high = default_spectra()
    assert low.total_counts == pytest.approx(1.8e6, rel=1e-3)
    assert high.total_counts == pytest.approx(3.6e6, rel=1e-3)
    for s in (low, high):
        assert s.energies_keV[0] <= 20.0 and s.energies_keV[-1] >= 140.0
        np.testing.assert_array_equal(np.diff(s.energies_keV), 1.0)


def test_shipped_files_match_generator():
    low, high = default_spectra()
    np.testing.assert_allclose(low.counts, synthetic_spectrum(80.0, 1.8e6, 0.4).counts, atol=1e-6)
    np.testing.assert_allclose(high.counts, synthetic_spectrum(140.0, 3.6e6, 0.8).counts, atol=1e-6)


@pytest.mark.parametrize("which", [0, 1])
def test_blank_scan_rule_insensitive(which):
    s = default_spectra()[which]
    assert s.blank_scan() == pytest.approx(float(s.weighted_counts.sum()), rel=1e-15)
    mid = s.with_rule("midpoint")
    assert abs(mid.blank_scan() - s.blank_scan()) / s.blank_scan() < 5e-3


def test_load_spectrum_roundtrip(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("energy_keV,counts\n20,0\n21,5.5\n22,3\n", encoding="utf-8")
    s = load_spectrum(path)
    np.testing.assert_array_equal(s.counts, [0.0, 5.5, 3.0])
    assert s.blank_scan() == pytest.approx(0.5 * 0 + 5.5 + 0.5 * 3)
