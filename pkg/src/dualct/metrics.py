"""Relative L2 image error and Dice overlap."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def rel_l2(estimate, truth) -> float:
    """|estimate - truth|^2 / |truth|^2 (squared norms)."""
    e = np.asarray(estimate, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if e.shape != t.shape:
        raise ValueError("estimate and truth differ in length")
    denom = float(t @ t)
    if denom == 0.0:
        raise UndefinedMetricError("relative error undefined for an all-zero truth")
    d = e - t
    return float(d @ d) / denom


def dice(est_mask, true_mask) -> float:
    """2 |A & B| / (|A| + |B|); two empty masks count as perfect agreement."""
    a = np.asarray(est_mask, dtype=bool).ravel()
    b = np.asarray(true_mask, dtype=bool).ravel()
    if a.shape != b.shape:
        raise ValueError("masks differ in length")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def binarize_chi(chi, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return np.asarray(chi, dtype=float) >= threshold


@dataclass(frozen=True)
class EvalResult:
    l2_compton: float
    l2_photoelectric: float
    dice: Optional[float]
    chi_pixels: int = 0

    def __post_init__(self):
        if self.l2_compton < 0 or self.l2_photoelectric < 0:
            raise ValueError("relative errors are non-negative")
        if self.dice is not None and not 0.0 <= self.dice <= 1.0:
            raise ValueError("Dice lies in [0, 1]")


def evaluate(c_est, p_est, chi_est_mask, c_true, p_true, chi_true_mask) -> EvalResult:
    """Errors on both images; Dice is None when the truth has no object."""
    chi_est_mask = np.asarray(chi_est_mask, dtype=bool)
    chi_true_mask = np.asarray(chi_true_mask, dtype=bool)
    d = dice(chi_est_mask, chi_true_mask) if chi_true_mask.any() else None
    return EvalResult(rel_l2(c_est, c_true), rel_l2(p_est, p_true), d, int(chi_est_mask.sum()))


METRIC_COLUMNS = ("method", "E_L2_compton", "E_L2_photoelectric", "D_chi")


def format_metrics_table(rows: list[tuple[str, EvalResult]]) -> str:
    """CSV with one row per method; an absent Dice is written as an empty cell."""
    lines = [",".join(METRIC_COLUMNS)]
    for method, r in rows:
        d = "" if r.dice is None else repr(float(r.dice))
        lines.append(f"{method},{float(r.l2_compton)!r},{float(r.l2_photoelectric)!r},{d}")
    return "\n".join(lines) + "\n"
