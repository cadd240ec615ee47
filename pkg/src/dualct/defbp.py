"""Dual-energy FBP baseline: per-ray basis decomposition, FBP of each sinogram, band thresholding."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .forward import MeasurementSet, spectral_integrals
from .objective import ContrastRegion
from .projector import ImageGrid, ScanGeometry, fbp
from .spectra import EnergySpectrum

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecomposeConfig:
    max_iters: int = 200
    step_tolerance: float = 1e-13
    lam0: float = 1e-3
    gradient_tolerance: float = 1e-14


@dataclass(frozen=True)
class DecomposedSinograms:
    ac: np.ndarray
    ap: np.ndarray
    residuals: np.ndarray
    flagged: np.ndarray

    @property
    def flagged_fraction(self) -> float:
        return float(self.flagged.mean()) if self.flagged.size else 0.0


def _model(ac, ap, spectra):
    """Predicted log projections and their Jacobian, batched over rays."""
    m = np.empty((ac.size, 2))
    J = np.empty((ac.size, 2, 2))
    for k, spec in enumerate(spectra):
        y, yk, yp = spectral_integrals(ac, ap, spec, moments=True)
        m[:, k] = -np.log(y / spec.blank_scan())
        J[:, k, 0] = yk / y
        J[:, k, 1] = yp / y
    return m, J


def decompose(m_low, m_high, spec_low: EnergySpectrum, spec_high: EnergySpectrum, init=None,
              config: DecomposeConfig = DecomposeConfig()):
    """Least-squares fit of (a_c, a_p) >= 0 to the two log measurements of every ray.

    Damped Gauss-Newton on each 2x2 problem (all rays advance together), with
    a_p measured in units of 1 / mean f_p so both unknowns have similar scale.
    Returns (ac, ap, residual, flagged); flagged rays fall back to (0, 0).
    """
    target = np.column_stack([np.atleast_1d(np.asarray(m_low, dtype=float)),
                              np.atleast_1d(np.asarray(m_high, dtype=float))])
    if not np.all(np.isfinite(target)):
        raise ValueError("measurements must be finite")
    spectra = (spec_low, spec_high)
    n = target.shape[0]
    fk, fp = spec_low.mean_f_kn(), spec_low.mean_f_p()
    scale = np.array([1.0 / fk, 1.0 / fp])
    if init is None:
        x = np.column_stack([np.maximum(target[:, 0], 0.0) / fk, np.zeros(n)])
    else:
        x = np.broadcast_to(np.asarray(init, dtype=float), (n, 2)).copy()
    x = np.maximum(x, 0.0)

    def evaluate(xx, rows=slice(None)):
        mm, JJ = _model(xx[:, 0], xx[:, 1], spectra)
        r = mm - target[rows]
        return r, JJ * scale[None, None, :], np.einsum("ij,ij->i", r, r)

    r, Js, cost = evaluate(x)
    lam = np.full(n, config.lam0)
    done = cost == 0.0
    for _ in range(config.max_iters):
        active = ~done
        if not active.any():
            break
        Ja, ra = Js[active], r[active]
        JtJ = np.einsum("nki,nkj->nij", Ja, Ja)
        g = np.einsum("nki,nk->ni", Ja, ra)
        diag = np.einsum("nii->ni", JtJ)
        # first-order optimality with a_c, a_p >= 0: only ascent directions off the bound count
        pg = np.where((x[active] <= 0.0) & (g > 0.0), 0.0, g)
        kkt = np.abs(pg).max(axis=1) <= config.gradient_tolerance * (1.0 + diag.max(axis=1))
        done[np.flatnonzero(active)[kkt]] = True
        M = JtJ.copy()
        M[:, 0, 0] += lam[active] * diag[:, 0]
        M[:, 1, 1] += lam[active] * diag[:, 1]
        # variables held on the bound drop out of the Newton system
        bound = (x[active] <= 0.0) & (g > 0.0)
        M[:, 0, 1] = np.where(bound.any(axis=1), 0.0, M[:, 0, 1])
        M[:, 1, 0] = M[:, 0, 1]
        g = np.where(bound, 0.0, g)
        det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
        ok = np.abs(det) > 0
        h = np.zeros_like(g)
        h[ok, 0] = -(M[ok, 1, 1] * g[ok, 0] - M[ok, 0, 1] * g[ok, 1]) / det[ok]
        h[ok, 1] = -(M[ok, 0, 0] * g[ok, 1] - M[ok, 1, 0] * g[ok, 0]) / det[ok]
        xa = x[active]
        trial = np.maximum(xa + h * scale, 0.0)
        r_t, J_t, c_t = evaluate(trial, active)
        better = c_t < cost[active]
        idx = np.flatnonzero(active)
        acc = idx[better]
        step = np.abs(trial[better] - xa[better]) / scale
        stalled = cost[acc] - c_t[better] <= 1e-14 * cost[acc]
        x[acc], r[acc], Js[acc], cost[acc] = trial[better], r_t[better], J_t[better], c_t[better]
        lam[acc] = np.maximum(lam[acc] / 3.0, 1e-12)
        rej = idx[~better]
        lam[rej] *= 4.0
        small = step.max(axis=1) <= config.step_tolerance * (1.0 + np.abs(xa[better] / scale).max(axis=1))
        done[acc[small | stalled | (c_t[better] < 1e-28)]] = True
        # rejected steps with saturated damping cannot improve any further
        done[rej[lam[rej] > 1e12]] = True
    converged = done
    flagged = ~converged
    if flagged.any():
        log.warning("%d of %d rays did not converge; set to (0, 0)", int(flagged.sum()), n)
        x[flagged] = 0.0
    return x[:, 0], x[:, 1], np.sqrt(cost), flagged


def decompose_ray(m_low_i: float, m_high_i: float, spec_low: EnergySpectrum, spec_high: EnergySpectrum,
                  init=None) -> tuple[float, float]:
    ac, ap, _, _ = decompose([m_low_i], [m_high_i], spec_low, spec_high, init)
    return float(ac[0]), float(ap[0])


def decompose_measurements(data: MeasurementSet, geom: ScanGeometry, spec_low: EnergySpectrum,
                           spec_high: EnergySpectrum) -> DecomposedSinograms:
    ac, ap, res, flagged = decompose(data.m_low, data.m_high, spec_low, spec_high)
    shape = geom.sinogram_shape
    return DecomposedSinograms(ac.reshape(shape), ap.reshape(shape), res.reshape(shape), flagged.reshape(shape))


def defbp_reconstruct(data: MeasurementSet, geom: ScanGeometry, grid: ImageGrid,
                      spectra: tuple[EnergySpectrum, EnergySpectrum], window: str = "hamming"):
    """(c_image, p_image, decomposition) by decomposing every ray and filtering back each sinogram."""
    dec = decompose_measurements(data, geom, *spectra)
    c = fbp(dec.ac, geom, grid, window)
    p = fbp(dec.ap, geom, grid, window)
    return c, p, dec


def threshold_characteristic(c_image, p_image, region: ContrastRegion) -> np.ndarray:
    """1 where |c - c0| <= sigma_c and |p - p0| <= sigma_p."""
    c = np.asarray(c_image, dtype=float)
    p = np.asarray(p_image, dtype=float)
    if c.shape != p.shape:
        raise ValueError("images differ in size")
    return (np.abs(c - region.c0) <= region.sigma_c) & (np.abs(p - region.p0) <= region.sigma_p)


def format_ray_diagnostics(dec: DecomposedSinograms) -> str:
    lines = ["ray_index,a_c,a_p,residual,flagged"]
    for i, (a, b, r, f) in enumerate(zip(dec.ac.ravel().tolist(), dec.ap.ravel().tolist(),
                                         dec.residuals.ravel().tolist(), dec.flagged.ravel().tolist())):
        lines.append(f"{i},{a!r},{b!r},{r!r},{int(f)}")
    return "\n".join(lines) + "\n"
