"""Polychromatic dual-energy measurement simulation."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .projector import SystemMatrix
from .spectra import EnergySpectrum

log = logging.getLogger(__name__)

CLAMP_COUNTS = 0.5
CLAMP_WARN_FRACTION = 1e-3


@dataclass(frozen=True)
class NoiseSpec:
    poisson_enabled: bool = True
    background_snr_db: Optional[float] = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.background_snr_db is not None and not np.isfinite(self.background_snr_db):
            raise ValueError("background SNR must be finite")

    @classmethod
    def noise_free(cls) -> "NoiseSpec":
        return cls(poisson_enabled=False, background_snr_db=None)


@dataclass
class MeasurementSet:
    """Stacked low/high log projections and their blank scans."""

    m_low: np.ndarray
    m_high: np.ndarray
    blank_low: float
    blank_high: float
    noise_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.m_low = np.asarray(self.m_low, dtype=float)
        self.m_high = np.asarray(self.m_high, dtype=float)
        if self.m_low.shape != self.m_high.shape:
            raise ValueError("low and high measurement vectors differ in length")
        if not (np.all(np.isfinite(self.m_low)) and np.all(np.isfinite(self.m_high))):
            raise ValueError("measurements must be finite")
        if self.blank_low <= 0 or self.blank_high <= 0:
            raise ValueError("blank scans must be positive")

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.m_low, self.m_high])

    @property
    def n_rays(self) -> int:
        return self.m_low.size


def spectral_integrals(lc: np.ndarray, lp: np.ndarray, spectrum: EnergySpectrum, moments: bool = False):
    """Mean counts for Compton/photoelectric line integrals ``lc``, ``lp``.

    With ``moments`` also returns the f_KN- and f_p-weighted integrals, which are
    the (negated) derivatives of the counts with respect to ``lc`` and ``lp``.
    """
    expo = np.exp(-(np.multiply.outer(lc, spectrum.f_kn) + np.multiply.outer(lp, spectrum.f_p)))
    weighted = expo * spectrum.weighted_counts
    y = weighted.sum(axis=-1)
    if not moments:
        return y
    return y, weighted @ spectrum.f_kn, weighted @ spectrum.f_p


def mean_counts(A: SystemMatrix, c, p, spectrum: EnergySpectrum) -> np.ndarray:
    """Noise-free expected detector counts for every ray (background signal excluded)."""
    c = np.asarray(c, dtype=float).ravel()
    p = np.asarray(p, dtype=float).ravel()
    n = A.shape[1]
    if c.size != n or p.size != n:
        raise ValueError(f"images must have {n} pixels")
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(p))):
        raise ValueError("images contain non-finite values")
    return spectral_integrals(A @ c, A @ p, spectrum)


def log_projection(counts, blank: float) -> np.ndarray:
    return -np.log(np.asarray(counts) / blank)


def _noisy(mean: np.ndarray, noise: NoiseSpec, rng: np.random.Generator, label: str, meta: dict):
    if np.any(mean <= 0):
        raise ValueError("non-positive mean counts")
    y = rng.poisson(mean).astype(float) if noise.poisson_enabled else mean.copy()
    if noise.background_snr_db is not None:
        sigma_r = float(mean.mean()) / 10.0 ** (noise.background_snr_db / 20.0)
        y += rng.normal(0.0, sigma_r, size=y.shape)
        meta[f"sigma_r_{label}"] = sigma_r
    bad = y <= 0
    n_bad = int(bad.sum())
    meta[f"clamped_{label}"] = n_bad
    if n_bad:
        y[bad] = CLAMP_COUNTS
        frac = n_bad / y.size
        if frac > CLAMP_WARN_FRACTION:
            msg = f"{label}: {n_bad} of {y.size} counts clamped to {CLAMP_COUNTS}"
            meta.setdefault("warnings", []).append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return y


def simulate(A: SystemMatrix, c, p, spec_low: EnergySpectrum, spec_high: EnergySpectrum,
             noise: NoiseSpec = NoiseSpec()) -> MeasurementSet:
    """Draw a dual-energy measurement set for the images ``c``, ``p``.

    Counts are Poisson around the spectral mean (if enabled), white Gaussian
    background with std mean(Y)/10^(SNR/20) is added, non-positive samples are
    clamped to half a count, and m = -ln(Y / Y0).
    """
    y_low = mean_counts(A, c, p, spec_low)
    y_high = mean_counts(A, c, p, spec_high)
    meta = {"seed": noise.rng_seed, "poisson": noise.poisson_enabled, "snr_db": noise.background_snr_db}
    seq = np.random.SeedSequence(noise.rng_seed)
    rng_low, rng_high = (np.random.default_rng(s) for s in seq.spawn(2))
    y_low = _noisy(y_low, noise, rng_low, "low", meta)
    y_high = _noisy(y_high, noise, rng_high, "high", meta)
    b_low, b_high = spec_low.blank_scan(), spec_high.blank_scan()
    return MeasurementSet(log_projection(y_low, b_low), log_projection(y_high, b_high), b_low, b_high, meta)


def save_measurements(ms: MeasurementSet, prefix, geometry_hash: str = "") -> tuple[Path, Path]:
    """Write ``<prefix>.json`` (header) and ``<prefix>.csv`` (ray_index,m_low,m_high)."""
    prefix = Path(prefix)
    header = {"geometry_hash": geometry_hash, "blank_low": ms.blank_low, "blank_high": ms.blank_high,
              "n_rays": ms.n_rays, "noise": ms.noise_meta}
    jpath, cpath = prefix.with_suffix(".json"), prefix.with_suffix(".csv")
    jpath.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rows = ["ray_index,m_low,m_high"]
    rows += [f"{i},{a!r},{b!r}" for i, (a, b) in enumerate(zip(ms.m_low.tolist(), ms.m_high.tolist()))]
    cpath.write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")
    return jpath, cpath


def load_measurements(prefix) -> tuple[MeasurementSet, dict]:
    prefix = Path(prefix)
    header = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
    data = np.loadtxt(prefix.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
    order = np.argsort(data[:, 0])
    data = data[order]
    ms = MeasurementSet(data[:, 1], data[:, 2], header["blank_low"], header["blank_high"], header.get("noise", {}))
    return ms, header
