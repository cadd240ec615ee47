"""Energy basis functions, the two-term attenuation model and tabulated X-ray spectra."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

ELECTRON_REST_ENERGY_KEV = 510.95


def _check_energy(energy):
    e = np.asarray(energy, dtype=float)
    if np.any(~np.isfinite(e)) or np.any(e <= 0):
        raise ValueError("photon energy must be positive and finite (keV)")
    return e


def klein_nishina(energy):
    """Klein-Nishina energy dependence of Compton scatter.

    Parameters
    ----------
    energy : float or array_like
        Photon energy in keV.
    """
    e = _check_energy(energy)
    a = e / ELECTRON_REST_ENERGY_KEV
    log_term = np.log1p(2.0 * a)
    val = (
        (1.0 + a) / a**2 * (2.0 * (1.0 + a) / (1.0 + 2.0 * a) - log_term / a)
        + log_term / (2.0 * a)
        - (1.0 + 3.0 * a) / (1.0 + 2.0 * a) ** 2
    )
    return val if np.ndim(val) else float(val)


def photoelectric_basis(energy):
    """E^-3 energy dependence of photoelectric absorption (E in keV)."""
    e = _check_energy(energy)
    val = e**-3.0
    return val if np.ndim(val) else float(val)


@dataclass(frozen=True)
class MaterialPoint:
    """Compton (c) and photoelectric (p) coefficients of one material."""

    c: float
    p: float
    name: str = ""

    def in_physical_range(self) -> bool:
        return self.c >= 0 and self.p >= 0


WATER = MaterialPoint(0.1907, 4939.2, "water")
PLEXIGLASS = MaterialPoint(0.2157, 3670.1, "plexiglass")
ALUMINIUM = MaterialPoint(0.4547, 72887.5, "aluminium")


def attenuation(point: MaterialPoint, energy):
    """Linear attenuation c*f_KN(E) + p*f_p(E)."""
    return point.c * klein_nishina(energy) + point.p * photoelectric_basis(energy)


def quadrature_weights(energies, rule: str = "trapezoid") -> np.ndarray:
    """Weights for integrating a tabulated function of energy.

    ``trapezoid`` is the composite trapezoid rule on the tabulated nodes;
    ``midpoint`` treats each node as the centre of a bin bounded halfway
    to its neighbours (end bins mirrored).
    """
    e = np.asarray(energies, dtype=float)
    if e.size < 2:
        raise ValueError("need at least two energy nodes")
    h = np.diff(e)
    w = np.zeros_like(e)
    if rule == "trapezoid":
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
    elif rule == "midpoint":
        w[1:-1] = 0.5 * (h[:-1] + h[1:])
        w[0] = h[0]
        w[-1] = h[-1]
    else:
        raise ValueError(f"unknown quadrature rule {rule!r}")
    return w


@dataclass(frozen=True)
class EnergySpectrum:
    """Photon counts per energy bin for one tube setting."""

    energies_keV: np.ndarray
    counts: np.ndarray
    quadrature_weights: np.ndarray
    label: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        e = np.asarray(self.energies_keV, dtype=float)
        s = np.asarray(self.counts, dtype=float)
        w = np.asarray(self.quadrature_weights, dtype=float)
        if not (e.shape == s.shape == w.shape) or e.ndim != 1:
            raise ValueError("energies, counts and weights must be 1-D and equally long")
        if e.size < 1 or np.any(np.diff(e) <= 0):
            raise ValueError("energies must be strictly increasing")
        if np.any(e <= 0):
            raise ValueError("energies must be positive")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("counts must be finite and non-negative")
        for name, arr in (("energies_keV", e), ("counts", s), ("quadrature_weights", w)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.blank_scan() <= 0:
            raise ValueError("spectrum has no photons")

    @classmethod
    def from_table(cls, energies, counts, rule: str = "trapezoid", label: str = "") -> "EnergySpectrum":
        return cls(np.asarray(energies, float), np.asarray(counts, float),
                   quadrature_weights(energies, rule), label)

    def with_rule(self, rule: str) -> "EnergySpectrum":
        return EnergySpectrum.from_table(self.energies_keV, self.counts, rule, self.label)

    def scaled(self, k: float) -> "EnergySpectrum":
        return EnergySpectrum(self.energies_keV, k * self.counts, self.quadrature_weights, self.label)

    def blank_scan(self) -> float:
        """Y0: the weighted integral of the spectrum."""
        # same reduction as the mean-count kernel so an empty scene gives m = 0 exactly
        return float(self.weighted_counts.sum())

    @property
    def total_counts(self) -> float:
        return float(self.counts.sum())

    @property
    def weighted_counts(self) -> np.ndarray:
        """omega * S(E), the per-bin factor of every spectral integral."""
        if "wc" not in self._cache:
            self._cache["wc"] = self.quadrature_weights * self.counts
        return self._cache["wc"]

    @property
    def f_kn(self) -> np.ndarray:
        if "fkn" not in self._cache:
            self._cache["fkn"] = np.asarray(klein_nishina(self.energies_keV), dtype=float)
        return self._cache["fkn"]

    @property
    def f_p(self) -> np.ndarray:
        if "fp" not in self._cache:
            self._cache["fp"] = np.asarray(photoelectric_basis(self.energies_keV), dtype=float)
        return self._cache["fp"]

    def mean_f_kn(self) -> float:
        return float(self.weighted_counts @ self.f_kn / self.blank_scan())

    def mean_f_p(self) -> float:
        return float(self.weighted_counts @ self.f_p / self.blank_scan())


class SpectrumFormatError(ValueError):
    pass


def parse_spectrum(text: str, rule: str = "trapezoid", label: str = "") -> EnergySpectrum:
    energies, counts = [], []
    reader = csv.reader(io.StringIO(text))
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if lineno == 1 and not _is_number(row[0]):
            continue  # header
        if len(row) < 2:
            raise SpectrumFormatError(f"line {lineno}: expected 'energy_keV,counts'")
        try:
            e, s = float(row[0]), float(row[1])
        except ValueError:
            raise SpectrumFormatError(f"line {lineno}: non-numeric value in {row!r}") from None
        if not (np.isfinite(e) and np.isfinite(s)):
            raise SpectrumFormatError(f"line {lineno}: non-finite value")
        if s < 0:
            raise SpectrumFormatError(f"line {lineno}: negative count {s}")
        if energies and e <= energies[-1]:
            raise SpectrumFormatError(f"line {lineno}: energy {e} not increasing")
        if e <= 0:
            raise SpectrumFormatError(f"line {lineno}: energy must be positive")
        energies.append(e)
        counts.append(s)
    if len(energies) < 2:
        raise SpectrumFormatError("spectrum needs at least two bins")
    return EnergySpectrum.from_table(energies, counts, rule, label)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_spectrum(source, rule: str = "trapezoid") -> EnergySpectrum:
    """Read a spectrum CSV (header ``energy_keV,counts``)."""
    path = Path(source)
    return parse_spectrum(path.read_text(encoding="utf-8"), rule, label=path.stem)


def format_spectrum(spectrum: EnergySpectrum) -> str:
    lines = ["energy_keV,counts"]
    lines += [f"{e:g},{s:.6f}" for e, s in zip(spectrum.energies_keV, spectrum.counts)]
    return "\n".join(lines) + "\n"


def save_spectrum(spectrum: EnergySpectrum, path) -> None:
    Path(path).write_text(format_spectrum(spectrum), encoding="utf-8", newline="\n")


def synthetic_spectrum(kvp: float, total_counts: float, filter_cm: float,
                       emin: float = 20.0, emax: float = 140.0,
                       filter_material: MaterialPoint = ALUMINIUM, label: str = "") -> EnergySpectrum:
    """Filtered Kramers-law tungsten-like spectrum on 1 keV bins.

    Counts follow (kvp - E)/E clipped at zero, attenuated by ``filter_cm`` of
    ``filter_material`` and normalised so the bin counts sum to ``total_counts``.
    """
    e = np.arange(emin, emax + 0.5, 1.0)
    shape = np.clip(kvp - e, 0.0, None) / e
    shape *= np.exp(-filter_cm * attenuation(filter_material, e))
    counts = total_counts * shape / shape.sum()
    return EnergySpectrum.from_table(e, counts, label=label)


LOW_KVP, HIGH_KVP = 80.0, 140.0
LOW_TOTAL, HIGH_TOTAL = 1.8e6, 3.6e6
LOW_FILTER_CM, HIGH_FILTER_CM = 0.4, 0.8


def default_spectra() -> tuple[EnergySpectrum, EnergySpectrum]:
    """The shipped low (80 kVp) and high (140 kVp) spectra."""
    pkg = resources.files("dualct") / "data"
    low = parse_spectrum((pkg / "spectrum_low.csv").read_text(encoding="utf-8"), label="low")
    high = parse_spectrum((pkg / "spectrum_high.csv").read_text(encoding="utf-8"), label="high")
    return low, high


def write_default_spectra(directory) -> None:
    """Regenerate the shipped spectrum tables."""
    d = Path(directory)
    save_spectrum(synthetic_spectrum(LOW_KVP, LOW_TOTAL, LOW_FILTER_CM, label="low"), d / "spectrum_low.csv")
    save_spectrum(synthetic_spectrum(HIGH_KVP, HIGH_TOTAL, HIGH_FILTER_CM, label="high"), d / "spectrum_high.csv")
