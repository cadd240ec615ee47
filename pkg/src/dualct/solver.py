"""Damped Gauss-Newton (Levenberg-Marquardt) and the shape/contrast coordinate-descent schedule."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .forward import MeasurementSet, spectral_integrals
from .objective import Objective, ObjectiveConfig
from .pals import SceneModel, compose, model_from_json, model_to_json
from .projector import SystemMatrix
from .spectra import EnergySpectrum

log = logging.getLogger(__name__)

SHAPE_BLOCK = ("a",)
CONTRAST_BLOCK = ("c_a", "p_a", "beta", "alpha")


@dataclass(frozen=True)
class LmConfig:
    """Levenberg-Marquardt settings.

    ``mu0`` is relative: the first damping is ``mu0 * max(diag(J^T J))`` of the
    (column-scaled) active Jacobian.
    """

    mu0: float = 1e-3
    nu: float = 2.0
    max_inner_iters: int = 20
    step_tolerance: float = 1e-6
    gradient_tolerance: float = 1e-12
    max_rejections: int = 40
    column_scaling: bool = True

    def __post_init__(self):
        if not self.mu0 > 0:
            raise ValueError("mu0 must be positive")
        if not self.nu > 1:
            raise ValueError("nu must exceed 1")
        if self.max_inner_iters < 1:
            raise ValueError("max_inner_iters must be at least 1")
        if self.step_tolerance <= 0 or self.gradient_tolerance < 0:
            raise ValueError("tolerances must be positive")

    def to_dict(self) -> dict:
        return {"mu0": self.mu0, "nu": self.nu, "max_inner_iters": self.max_inner_iters,
                "step_tolerance": self.step_tolerance, "gradient_tolerance": self.gradient_tolerance,
                "max_rejections": self.max_rejections, "column_scaling": self.column_scaling}


@dataclass(frozen=True)
class ScheduleConfig:
    eps_stop: float = 1e-6
    k_max: int = 20
    max_outer_cycles: int = 30

    def __post_init__(self):
        if not self.eps_stop > 0:
            raise ValueError("eps_stop must be positive")
        if self.k_max < 1 or self.max_outer_cycles < 1:
            raise ValueError("iteration caps must be at least 1")

    def to_dict(self) -> dict:
        return {"eps_stop": self.eps_stop, "k_max": self.k_max, "max_outer_cycles": self.max_outer_cycles}


def stop_check(x_k, x_prev, eps_stop: float, k: int, k_max: int) -> bool:
    """True when |x_k - x_prev| < eps (1 + |x_prev|) or k > k_max."""
    x_k = np.asarray(x_k, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    if x_k.shape != x_prev.shape:
        raise ValueError("iterates differ in length")
    if k > k_max:
        return True
    return bool(np.linalg.norm(x_k - x_prev) < eps_stop * (1.0 + np.linalg.norm(x_prev)))


@dataclass
class LmTrace:
    costs: list = field(default_factory=list)
    mus: list = field(default_factory=list)
    n_rejected: int = 0
    stop_reason: str = ""

    @property
    def n_accepted(self) -> int:
        return max(0, len(self.costs) - 1)


class LmError(RuntimeError):
    pass


def _active_indices(active_mask, n: int) -> np.ndarray:
    if active_mask is None:
        return np.arange(n)
    mask = np.asarray(active_mask)
    if mask.dtype == bool:
        if mask.size != n:
            raise ValueError("active mask length differs from theta")
        return np.flatnonzero(mask)
    return np.sort(mask.astype(np.int64))


def lm_minimize(residual_fn: Callable, jacobian_fn: Callable, theta0, active_mask=None,
                config: LmConfig = LmConfig(), on_accept: Optional[Callable] = None):
    """Minimise |residual_fn(theta)|^2 over the unmasked entries of theta.

    ``jacobian_fn(theta, cols)`` must return the residual Jacobian restricted
    to the integer columns ``cols``. Each iteration solves
    (J^T J + mu D^2) h = -J^T eps on the active block, D the running column
    norms of J (identity without column scaling). Steps are accepted only when
    the cost strictly decreases; mu follows the gain-ratio rule
    mu *= max(1/3, 1 - (2 rho - 1)^3) on success and mu *= nu, nu *= 2 on
    rejection (nu restarts at ``config.nu`` after every accepted step).
    """
    theta = np.array(theta0, dtype=float)
    cols = _active_indices(active_mask, theta.size)
    trace = LmTrace()
    eps = np.asarray(residual_fn(theta), dtype=float)
    if not np.all(np.isfinite(eps)):
        raise LmError("non-finite residual at the starting point")
    cost = float(eps @ eps)
    trace.costs.append(cost)
    if cols.size == 0:
        trace.stop_reason = "empty active set"
        return theta, trace
    J = np.asarray(jacobian_fn(theta, cols), dtype=float)
    if J.shape != (eps.size, cols.size):
        raise ValueError(f"Jacobian shape {J.shape} does not match residual/active block ({eps.size}, {cols.size})")
    if not np.all(np.isfinite(J)):
        raise LmError("non-finite Jacobian at the starting point")

    scale = np.zeros(cols.size)
    mu, nu = None, config.nu
    k = 0
    while True:
        k += 1
        if config.column_scaling:
            scale = np.maximum(scale, np.linalg.norm(J, axis=0))
            d = np.where(scale > 0, scale, 1.0)
        else:
            d = np.ones(cols.size)
        Js = J / d
        JtJ = Js.T @ Js
        g = Js.T @ eps
        if np.max(np.abs(g), initial=0.0) <= config.gradient_tolerance:
            trace.stop_reason = "gradient tolerance"
            break
        if mu is None:
            mu = config.mu0 * max(float(np.max(np.diag(JtJ))), 1e-300)
        accepted = False
        for _ in range(config.max_rejections):
            A = JtJ.copy()
            A[np.diag_indices_from(A)] += mu
            try:
                factor = cho_factor(A, lower=False, check_finite=True)
            except (LinAlgError, ValueError):
                mu *= nu
                nu *= 2.0
                continue
            hs = -cho_solve(factor, g)
            h = hs / d
            trial = theta.copy()
            trial[cols] += h
            eps_new = np.asarray(residual_fn(trial), dtype=float)
            cost_new = float(eps_new @ eps_new) if np.all(np.isfinite(eps_new)) else np.inf
            predicted = float(hs @ (mu * hs - g))
            if cost_new < cost and predicted > 0:
                rho = (cost - cost_new) / predicted
                mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = config.nu
                accepted = True
                break
            trace.n_rejected += 1
            mu *= nu
            nu *= 2.0
        if not accepted:
            if not np.isfinite(mu) or mu > 1e300:
                raise LmError(f"damping escalated to {mu:g} without a solvable normal system")
            trace.stop_reason = "no decrease"
            break
        x_prev = theta[cols].copy()
        theta, eps, cost = trial, eps_new, cost_new
        trace.costs.append(cost)
        trace.mus.append(mu)
        if on_accept is not None:
            on_accept(theta, cost)
        if stop_check(theta[cols], x_prev, config.step_tolerance, 0, 1):
            trace.stop_reason = "step tolerance"
            break
        if k >= config.max_inner_iters:
            trace.stop_reason = "iteration cap"
            break
        J = np.asarray(jacobian_fn(theta, cols), dtype=float)
        if not np.all(np.isfinite(J)):
            raise LmError(f"non-finite Jacobian at iteration {k}")
    return theta, trace


def flat_background_fit(A: SystemMatrix, data: MeasurementSet,
                        spectra: tuple[EnergySpectrum, EnergySpectrum]) -> tuple[float, float]:
    """(c, p) of the homogeneous scene that best explains the measurements.

    Line integrals of a constant image are the constant times the ray length,
    so this is a two-parameter least-squares fit solved with ``lm_minimize``.
    """
    lengths = np.asarray(A.matrix.sum(axis=1)).ravel()
    m = data.stacked
    p_unit = 1.0 / spectra[0].mean_f_p()

    def resid(t):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return np.concatenate([-np.log(spectral_integrals(t[0] * lengths, t[1] * p_unit * lengths, s)
                                           / s.blank_scan()) for s in spectra]) - m

    def jac(t, cols):
        blocks = []
        for s in spectra:
            y, yk, yp = spectral_integrals(t[0] * lengths, t[1] * p_unit * lengths, s, moments=True)
            blocks.append(np.column_stack([yk / y * lengths, yp / y * lengths * p_unit]))
        return np.vstack(blocks)[:, cols]

    theta, _ = lm_minimize(resid, jac, np.zeros(2), None, LmConfig(max_inner_iters=200, step_tolerance=1e-12))
    return float(theta[0]), float(theta[1] * p_unit)


@dataclass
class SolveReport:
    model: SceneModel
    cost_trace: list
    cycle_blocks: list
    stop_reason: str
    wall_time: float
    n_cycles: int

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1]["F_p"] if self.cost_trace else float("nan")


SOLVER_TRACE_COLUMNS = ("cycle", "block", "iteration", "F_p", "eps1_sq", "eps2_sq", "eps3_sq", "eps4_sq")


def format_solver_trace(rows: list[dict]) -> str:
    """CSV text of a coordinate-descent cost trace."""
    lines = [",".join(SOLVER_TRACE_COLUMNS)]
    for row in rows:
        cells = [str(int(row["cycle"])), str(row["block"]), str(int(row["iteration"]))]
        cells += [repr(float(row[c])) for c in SOLVER_TRACE_COLUMNS[3:]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _image_vector(model: SceneModel, c_scale: float, p_scale: float) -> np.ndarray:
    scene = compose(model)
    return np.concatenate([scene.c_image / c_scale, scene.p_image / p_scale])


def save_checkpoint(path, model: SceneModel, grid, cycle: int) -> None:
    doc = json.loads(model_to_json(model, grid))
    doc["cycle"] = cycle
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """(model, grid, cycle) from a checkpoint written by ``coordinate_descent``."""
    text = Path(path).read_text(encoding="utf-8")
    model, grid = model_from_json(text)
    return model, grid, int(json.loads(text).get("cycle", 0))


def coordinate_descent(model0: SceneModel, data: MeasurementSet, config_objective: ObjectiveConfig,
                       lm_config: LmConfig = LmConfig(), schedule: ScheduleConfig = ScheduleConfig(), *,
                       A: SystemMatrix, spectra: tuple[EnergySpectrum, EnergySpectrum],
                       checkpoint_path=None) -> SolveReport:
    """Alternate LM cycles over the shape weights and the contrast/background block.

    Each cycle runs at most ``schedule.k_max`` LM iterations with the step
    criterion at ``schedule.eps_stop`` on its own block. The outer loop applies
    the same criterion to the composed [c; p] images, each normalised by the
    contrast-region centre so both carry comparable weight.
    """
    t_start = time.perf_counter()
    obj = Objective(A, spectra[0], spectra[1], data, config_objective)
    inner = replace(lm_config, max_inner_iters=schedule.k_max, step_tolerance=schedule.eps_stop)
    reg = config_objective.region
    c_scale = abs(reg.c0) if reg.c0 else 1.0
    p_scale = abs(reg.p0) if reg.p0 else 1.0

    model = model0
    trace: list[dict] = []
    cycle_blocks: list[str] = []

    def record(cycle, block, iteration, m):
        row = {"cycle": cycle, "block": block, "iteration": iteration}
        row.update(obj.residuals(m).breakdown())
        if trace and row["F_p"] > trace[-1]["F_p"]:
            raise AssertionError(f"cost increased from {trace[-1]['F_p']} to {row['F_p']}")
        trace.append(row)

    record(0, "init", 0, model)
    stop_reason = "outer cap"
    x_prev = _image_vector(model, c_scale, p_scale)
    for cycle in range(1, schedule.max_outer_cycles + 1):
        for block_name, block in (("shape", SHAPE_BLOCK), ("contrast", CONTRAST_BLOCK)):
            mask = model.block_mask(*block)
            counter = {"k": 0}

            def resid(theta, _m=model):
                return obj.residuals(_m.with_theta(theta)).vector

            def jac(theta, cols, _m=model):
                return obj.jacobian(_m.with_theta(theta), cols)

            def accepted(theta, cost, _m=model, _name=block_name, _cycle=cycle):
                counter["k"] += 1
                record(_cycle, _name, counter["k"], _m.with_theta(theta))

            theta, lm_trace = lm_minimize(resid, jac, model.theta, mask, inner, on_accept=accepted)
            model = model.with_theta(theta)
            cycle_blocks.append(block_name)
            log.info("cycle %d %s: %d steps, F_p=%.6g (%s)", cycle, block_name, lm_trace.n_accepted,
                     lm_trace.costs[-1], lm_trace.stop_reason)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, A.grid, cycle)
        x_new = _image_vector(model, c_scale, p_scale)
        if stop_check(x_new, x_prev, schedule.eps_stop, 0, 1):
            stop_reason = "image step tolerance"
            break
        x_prev = x_new
    return SolveReport(model, trace, cycle_blocks, stop_reason, time.perf_counter() - t_start, cycle)
