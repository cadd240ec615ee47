"""Linearised background sensitivity: Jacobian blocks, the ratio matrix D and MVU error bounds."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .forward import spectral_integrals
from .projector import ImageGrid, ScanGeometry, SystemMatrix, build_system_matrix
from .spectra import ALUMINIUM, PLEXIGLASS, WATER, EnergySpectrum, MaterialPoint

log = logging.getLogger(__name__)

EXACT_TRACE_LIMIT = 400
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class JacobianBlocks:
    """J_c, J_p = D J_c and the diagonal of D over the retained rays."""

    J_c: np.ndarray
    J_p: np.ndarray
    d: np.ndarray
    rows: np.ndarray


def _dense(M) -> np.ndarray:
    if isinstance(M, SystemMatrix):
        M = M.matrix
    return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)


def jacobian_blocks(A, B, beta, alpha, spectrum: EnergySpectrum) -> JacobianBlocks:
    """Derivatives of the log projections with respect to the background weights.

    With W_ij = S(E_j) exp(-f_KN(E_j) [AB beta]_i - f_p(E_j) [AB alpha]_i) and
    quadrature weights omega, J_c = D1 R and J_p = D2 R where
    D1 = diag(W diag(omega) f_KN), D2 = diag(W diag(omega) f_p) and
    R_ij = [A B]_ij / Y_i with Y_i the expected count of ray i. Rays that miss
    the object (zero row of A B) carry no information and are dropped.
    """
    AB = _dense(A) @ _dense(B)
    beta = np.asarray(beta, dtype=float).ravel()
    alpha = np.asarray(alpha, dtype=float).ravel()
    if beta.size != AB.shape[1] or alpha.size != AB.shape[1]:
        raise ValueError("weight vectors do not match the basis")
    blank = ~np.any(AB != 0.0, axis=1)
    if blank.any():
        log.warning("dropping %d blank rays from the sensitivity Jacobian", int(blank.sum()))
    rows = np.flatnonzero(~blank)
    AB = AB[rows]
    y, d1, d2 = spectral_integrals(AB @ beta, AB @ alpha, spectrum, moments=True)
    R = AB / y[:, None]
    J_c = d1[:, None] * R
    d = d2 / d1
    return JacobianBlocks(J_c, d[:, None] * J_c, d, rows)


@dataclass(frozen=True)
class SensitivityReport:
    d_max: float
    d_max_inv_sq: float
    bound_beta: float
    bound_alpha: float
    norm_1: float
    norm_inf: float
    min_m: float
    n_unknowns: int
    full_rank: bool
    trace_beta: Optional[float] = None
    trace_alpha: Optional[float] = None

    def __post_init__(self):
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")


def _column_rank(M: np.ndarray) -> int:
    # equilibrate columns so the tiny D-scaled block is not mistaken for zero
    norms = np.linalg.norm(M, axis=0)
    norms[norms == 0] = 1.0
    s = np.linalg.svd(M / norms, compute_uv=False)
    return int(np.sum(s > RANK_RTOL * s[0])) if s.size else 0


def exact_traces(J_c: np.ndarray, d: np.ndarray) -> tuple[float, float]:
    """tr(Lambda1^-1), tr(Lambda4^-1) from the Schur complements of [H, DH]^T [H, DH]."""
    H = np.asarray(J_c, dtype=float)
    DH = np.asarray(d, dtype=float)[:, None] * H
    G11, G12, G22 = H.T @ H, H.T @ DH, DH.T @ DH
    lam1 = G11 - G12 @ np.linalg.solve(G22, G12.T)
    lam4 = G22 - G12.T @ np.linalg.solve(G11, G12)
    return float(np.trace(np.linalg.inv(lam1))), float(np.trace(np.linalg.inv(lam4)))


def error_bounds(J_c, d, exact: Optional[bool] = None) -> SensitivityReport:
    """Lower bounds on the Compton (beta) and photoelectric (alpha) MVU errors per unit noise variance.

    E_beta >= N min(m_i) / (|H|_1 |H|_inf) and E_alpha >= E_beta-bound / d_max^2,
    where m_i is the diagonal of I + K^T K with K = U^T U_M from the thin SVDs
    of H = J_c and M = D H. Exact traces are added when the problem has at most
    ``EXACT_TRACE_LIMIT`` unknowns (or when ``exact`` forces it) and is full rank.
    """
    H = np.asarray(J_c, dtype=float)
    d = np.asarray(d, dtype=float).ravel()
    if d.size != H.shape[0]:
        raise ValueError("D must have one entry per Jacobian row")
    n = H.shape[1]
    d_max = float(np.max(d))
    norm_1 = float(np.abs(H).sum(axis=0).max())
    norm_inf = float(np.abs(H).sum(axis=1).max())
    U = np.linalg.svd(H, full_matrices=False)[0]
    U_M = np.linalg.svd(d[:, None] * H, full_matrices=False)[0]
    K = U.T @ U_M
    min_m = float(np.min(1.0 + np.einsum("ij,ij->j", K, K)))
    bound_beta = n * min_m / (norm_1 * norm_inf)
    bound_alpha = bound_beta / d_max**2
    full_rank = _column_rank(np.hstack([H, d[:, None] * H])) == 2 * n
    if not full_rank:
        log.warning("stacked Jacobian is rank deficient; bounds are indicative only")
    want_exact = n <= EXACT_TRACE_LIMIT if exact is None else exact
    tb = ta = None
    if want_exact and full_rank:
        tb, ta = exact_traces(H, d)
    return SensitivityReport(d_max, d_max**-2, bound_beta, bound_alpha, norm_1, norm_inf, min_m, n,
                             full_rank, tb, ta)


TABLE_MATERIALS = (WATER, PLEXIGLASS, ALUMINIUM)
TABLE_COLUMNS = ("material", "p", "c", "d_max_inv_sq")


def slab_setup(n: int = 32, length: float = 20.0) -> tuple[ImageGrid, ScanGeometry, SystemMatrix]:
    """Square slab seen by one parallel view at phi = 0 with one detector per pixel column."""
    grid = ImageGrid.square(n, length)
    geom = ScanGeometry((0.0,), n, length / n)
    return grid, geom, build_system_matrix(grid, geom)


def material_d_max(material: MaterialPoint, spectrum: EnergySpectrum, n: int = 32,
                   length: float = 20.0) -> float:
    """d_max for a slab of ``material`` with a pixel basis."""
    grid, _, A = slab_setup(n, length)
    ones = np.ones(grid.n_pixels)
    blocks = jacobian_blocks(A, sp.identity(grid.n_pixels, format="csr"), material.c * ones,
                             material.p * ones, spectrum)
    return float(np.max(blocks.d))


def material_table(spectrum: EnergySpectrum, materials=TABLE_MATERIALS, n: int = 32,
                   length: float = 20.0) -> list[dict]:
    rows = []
    for m in materials:
        d_max = material_d_max(m, spectrum, n, length)
        rows.append({"material": m.name, "p": m.p, "c": m.c, "d_max_inv_sq": d_max**-2})
    return rows


def format_material_table(rows: list[dict]) -> str:
    lines = [",".join(TABLE_COLUMNS)]
    for r in rows:
        lines.append(f"{r['material']},{float(r['p'])!r},{float(r['c'])!r},{float(r['d_max_inv_sq'])!r}")
    return "\n".join(lines) + "\n"
