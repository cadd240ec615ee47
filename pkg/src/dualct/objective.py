"""Exact-penalty least-squares objective for the level-set scene model.

The cost is F_p = |eps|^2 with eps = [eps1; eps2; eps3; eps4]:

* eps1 = sqrt(sigma) (K(theta) - m)          data misfit, both spectra
* eps2 = sqrt(lambda1 H_eps(O))              object-area penalty
* eps3 = sqrt(lambda2) (rho - 1)             gradient-correlation penalty on the backgrounds
* eps4 = sqrt(r) sqrt(smax(g))               exact penalty on the contrast constraints

where rho = |DB beta|^2 |DB alpha|^2 / ((DB beta)^T (DB alpha))^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .forward import MeasurementSet, spectral_integrals
from .pals import SceneModel, compose, dirac_eps, image_jacobians
from .projector import ImageGrid, SystemMatrix
from .spectra import EnergySpectrum

CORR_FLOOR = 1e-12
GRAD_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class ContrastRegion:
    """Ellipse in (c, p) space holding the admissible object contrasts."""

    c0: float
    p0: float
    sigma_c: float
    sigma_p: float

    def __post_init__(self):
        if not (self.sigma_c > 0 and self.sigma_p > 0):
            raise ValueError("ellipse semi-axes must be positive")

    def to_dict(self) -> dict:
        return {"c0": self.c0, "p0": self.p0, "sigma_c": self.sigma_c, "sigma_p": self.sigma_p}


PHANTOM1_REGION = ContrastRegion(0.19, 5000.0, 0.05, 500.0)
CLUTTER_REGION = ContrastRegion(0.30, 5000.0, 0.05, 500.0)
NULL_REGION = ContrastRegion(0.12, 3000.0, 0.05, 500.0)


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda1: float = 0.1
    lambda2: float = 10.0
    penalty_r: float = 1e5
    smooth_max_eps: float = 1e-8
    sigma_weight: float = 1.0
    region: ContrastRegion = field(default_factory=lambda: PHANTOM1_REGION)

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularisation weights must be non-negative")
        if not self.penalty_r >= 0:
            raise ValueError("penalty weight must be non-negative")
        if not self.smooth_max_eps > 0:
            raise ValueError("smooth-max eps must be positive")
        if not self.sigma_weight > 0:
            raise ValueError("data weight must be positive")

    def to_dict(self) -> dict:
        return {"lambda1": self.lambda1, "lambda2": self.lambda2, "penalty_r": self.penalty_r,
                "smooth_max_eps": self.smooth_max_eps, "sigma_weight": self.sigma_weight,
                "region": self.region.to_dict()}


def g1(c_a: float, p_a: float, region: ContrastRegion) -> float:
    """Object contrast constraint; <= 0 inside the ellipse."""
    return (c_a - region.c0) ** 2 / region.sigma_c**2 + (p_a - region.p0) ** 2 / region.sigma_p**2 - 1.0


def g2_from_images(cb, pb, region: ContrastRegion) -> np.ndarray:
    return -((np.asarray(cb) - region.c0) ** 2) / region.sigma_c**2 \
        - (np.asarray(pb) - region.p0) ** 2 / region.sigma_p**2 + 1.0


def g2(beta, alpha, background_basis, region: ContrastRegion) -> np.ndarray:
    """Background constraint per pixel; positive where the background falls inside the ellipse."""
    B = getattr(background_basis, "matrix", background_basis)
    return g2_from_images(B @ np.asarray(beta, float), B @ np.asarray(alpha, float), region)


def smooth_max(x, eps: float):
    """Smooth approximation of max(x, 0): (sqrt(x^2 + eps) + x) / 2."""
    x = np.asarray(x, dtype=float)
    root = np.sqrt(x * x + eps)
    # for x < 0 use eps / (root - x) to avoid cancellation
    out = np.where(x >= 0, 0.5 * (root + x), 0.5 * eps / (root - np.minimum(x, 0.0)))
    return out if out.ndim else float(out)


def smooth_max_derivative(x, eps: float):
    x = np.asarray(x, dtype=float)
    root = np.sqrt(x * x + eps)
    return np.where(x >= 0, 0.5 * (x / root + 1.0), 0.5 * eps / (root * (root - np.minimum(x, 0.0))))


def _difference_1d(n: int) -> sp.csr_matrix:
    main = -np.ones(n)
    main[-1] = 0.0
    return sp.diags([main, np.ones(n - 1)], [0, 1], shape=(n, n), format="csr")


def gradient_matrix(grid: ImageGrid) -> sp.csr_matrix:
    """Stacked forward differences [D_x; D_y]; the last column/row difference is zero."""
    dx = sp.kron(sp.identity(grid.ny, format="csr"), _difference_1d(grid.nx))
    dy = sp.kron(_difference_1d(grid.ny), sp.identity(grid.nx, format="csr"))
    return sp.vstack([dx, dy], format="csr")


def correlation_ratio(u: np.ndarray, v: np.ndarray) -> float:
    """|u|^2 |v|^2 / (u.v)^2 with the flat-gradient safeguard (returns 1 when either is flat)."""
    uu, vv, uv = u @ u, v @ v, u @ v
    if uu < GRAD_NORM_FLOOR**2 or vv < GRAD_NORM_FLOOR**2:
        return 1.0
    return uu * vv / max(uv * uv, CORR_FLOOR * uu * vv)


def forward_operator(model: SceneModel, A: SystemMatrix, spec_low: EnergySpectrum,
                     spec_high: EnergySpectrum) -> np.ndarray:
    """Noise-free log projections [low; high] of the composed scene."""
    scene = compose(model)
    lc, lp = A @ scene.c_image, A @ scene.p_image
    return np.concatenate([-np.log(spectral_integrals(lc, lp, s) / s.blank_scan()) for s in (spec_low, spec_high)])


@dataclass(frozen=True)
class ResidualVector:
    eps1: np.ndarray
    eps2: np.ndarray
    eps3: float
    eps4: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.eps1, self.eps2, [self.eps3], self.eps4])

    @property
    def cost(self) -> float:
        return float(self.eps1 @ self.eps1 + self.eps2 @ self.eps2 + self.eps3**2 + self.eps4 @ self.eps4)

    def breakdown(self) -> dict:
        return {"F_p": self.cost, "eps1_sq": float(self.eps1 @ self.eps1), "eps2_sq": float(self.eps2 @ self.eps2),
                "eps3_sq": float(self.eps3**2), "eps4_sq": float(self.eps4 @ self.eps4)}


class _State:
    """Everything derived from one theta that both residuals and Jacobian need."""

    def __init__(self, obj: "Objective", model: SceneModel):
        self.model = model
        self.scene = compose(model)
        s = self.scene
        A = obj.A
        self.lc, self.lp = A @ s.c_image, A @ s.p_image
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            # trial points with negative attenuation may overflow; LM rejects them via the cost
            self.spectral = [spectral_integrals(self.lc, self.lp, spec, moments=True) for spec in obj.spectra]
            self.K = np.concatenate([-np.log(y / spec.blank_scan()) for (y, _, _), spec in zip(self.spectral, obj.spectra)])
        self.u = obj.DB @ model.beta
        self.v = obj.DB @ model.alpha
        reg = obj.config.region
        self.g1 = g1(model.c_a, model.p_a, reg)
        self.g2 = g2_from_images(s.c_background, s.p_background, reg)


class Objective:
    """Residuals and Jacobian of the penalised cost for fixed data and geometry."""

    def __init__(self, A: SystemMatrix, spec_low: EnergySpectrum, spec_high: EnergySpectrum,
                 data: MeasurementSet, config: ObjectiveConfig, background_matrix: np.ndarray | None = None):
        if data.n_rays != A.shape[0]:
            raise ValueError("measurement length does not match the system matrix")
        self.A = A
        self.spectra = (spec_low, spec_high)
        self.data = data
        self.m = data.stacked
        self.config = config
        self.D = gradient_matrix(A.grid)
        self._B_id = None
        self.DB = None
        if background_matrix is not None:
            self._set_background(background_matrix)
        self._cache_key = None
        self._cache_state = None

    def _set_background(self, B: np.ndarray):
        if self._B_id is not B:
            self._B_id = B
            self.DB = np.asarray(self.D @ B)

    def state(self, model: SceneModel) -> _State:
        self._set_background(model.background_basis.matrix)
        key = model.theta.tobytes()
        if key != self._cache_key:
            self._cache_state = _State(self, model)
            self._cache_key = key
        return self._cache_state

    # ------------------------------------------------------------------ residuals
    def residuals(self, model: SceneModel) -> ResidualVector:
        st = self.state(model)
        cfg = self.config
        eps1 = np.sqrt(cfg.sigma_weight) * (st.K - self.m)
        eps2 = np.sqrt(cfg.lambda1 * st.scene.chi)
        eps3 = np.sqrt(cfg.lambda2) * (correlation_ratio(st.u, st.v) - 1.0)
        g = np.concatenate([[st.g1], st.g2])
        eps4 = np.sqrt(cfg.penalty_r) * np.sqrt(smooth_max(g, cfg.smooth_max_eps))
        return ResidualVector(eps1, eps2, float(eps3), eps4)

    def cost(self, model: SceneModel) -> float:
        return self.residuals(model).cost

    def n_residuals(self, model: SceneModel) -> int:
        n_p = self.A.shape[1]
        return 2 * self.A.shape[0] + n_p + 1 + 1 + n_p

    # ------------------------------------------------------------------ jacobian
    def jacobian(self, model: SceneModel, columns=None) -> np.ndarray:
        """d eps / d theta, restricted to ``columns`` (indices or boolean mask) if given."""
        st = self.state(model)
        cfg = self.config
        sl = model.slices()
        n_params = model.n_params
        if columns is None:
            cols = np.arange(n_params)
        else:
            cols = np.asarray(columns)
            cols = np.flatnonzero(cols) if cols.dtype == bool else np.sort(cols.astype(np.int64))
        n_rays, n_p = self.A.shape
        r1, r2, r3 = 2 * n_rays, 2 * n_rays + n_p, 2 * n_rays + n_p + 1
        J = np.zeros((r3 + 1 + n_p, cols.size))
        pos = {int(c): k for k, c in enumerate(cols)}

        def block_cols(name):
            s = sl[name]
            idx = [c for c in range(s.start, s.stop) if c in pos]
            return np.asarray(idx, dtype=np.int64) - s.start, np.asarray([pos[c] for c in idx], dtype=np.int64)

        blocks = {name: block_cols(name) for name in sl}
        need = {name for name, (local, _) in blocks.items() if local.size}
        if not need:
            return J
        jac = image_jacobians(model, st.scene)
        A = self.A
        sqrt_sigma = np.sqrt(cfg.sigma_weight)
        weights = [(sqrt_sigma * yk / y, sqrt_sigma * yp / y) for (y, yk, yp) in st.spectral]

        # eps1: data rows
        if {"c_a", "p_a"} & need:
            a_chi = A @ jac.chi
        if "a" in need:
            local = blocks["a"][0]
            P = jac.P[:, local]
            ma_c = A @ (jac.dc_do[:, None] * P)
            ma_p = A @ (jac.dp_do[:, None] * P)
        if {"beta", "alpha"} & need:
            g_bg = A @ ((1.0 - jac.chi)[:, None] * jac.B)
        for k, (wc, wp) in enumerate(weights):
            rows = slice(k * n_rays, (k + 1) * n_rays)
            if "c_a" in need:
                J[rows, blocks["c_a"][1]] = (wc * a_chi)[:, None]
            if "p_a" in need:
                J[rows, blocks["p_a"][1]] = (wp * a_chi)[:, None]
            if "a" in need:
                J[rows, blocks["a"][1]] = wc[:, None] * ma_c + wp[:, None] * ma_p
            if "beta" in need:
                J[rows, blocks["beta"][1]] = wc[:, None] * g_bg[:, blocks["beta"][0]]
            if "alpha" in need:
                J[rows, blocks["alpha"][1]] = wp[:, None] * g_bg[:, blocks["alpha"][0]]

        # eps2: area rows, depend on a only
        if "a" in need and cfg.lambda1 > 0:
            h = st.scene.chi
            delta = dirac_eps(st.scene.o_field, model.heaviside_eps)
            safe = h > 1e-300
            fac = np.zeros_like(h)
            fac[safe] = np.sqrt(cfg.lambda1) * delta[safe] / (2.0 * np.sqrt(h[safe]))
            J[r1:r2, blocks["a"][1]] = fac[:, None] * jac.P[:, blocks["a"][0]]

        # eps3: correlation row, depends on beta and alpha
        if {"beta", "alpha"} & need and cfg.lambda2 > 0:
            gb, ga = self._correlation_gradient(st.u, st.v)
            if "beta" in need:
                J[r2, blocks["beta"][1]] = np.sqrt(cfg.lambda2) * gb[blocks["beta"][0]]
            if "alpha" in need:
                J[r2, blocks["alpha"][1]] = np.sqrt(cfg.lambda2) * ga[blocks["alpha"][0]]

        # eps4: constraint rows
        reg = cfg.region
        sqrt_r = np.sqrt(cfg.penalty_r)
        if {"c_a", "p_a"} & need:
            f = sqrt_r * self._sqrt_smax_slope(st.g1)
            if "c_a" in need:
                J[r3, blocks["c_a"][1]] = f * 2.0 * (model.c_a - reg.c0) / reg.sigma_c**2
            if "p_a" in need:
                J[r3, blocks["p_a"][1]] = f * 2.0 * (model.p_a - reg.p0) / reg.sigma_p**2
        if {"beta", "alpha"} & need:
            f = sqrt_r * self._sqrt_smax_slope(st.g2)
            B = jac.B
            if "beta" in need:
                dg = -2.0 * (st.scene.c_background - reg.c0) / reg.sigma_c**2
                J[r3 + 1:, blocks["beta"][1]] = (f * dg)[:, None] * B[:, blocks["beta"][0]]
            if "alpha" in need:
                dg = -2.0 * (st.scene.p_background - reg.p0) / reg.sigma_p**2
                J[r3 + 1:, blocks["alpha"][1]] = (f * dg)[:, None] * B[:, blocks["alpha"][0]]
        return J

    def _sqrt_smax_slope(self, g):
        eps = self.config.smooth_max_eps
        return smooth_max_derivative(g, eps) / (2.0 * np.sqrt(smooth_max(g, eps)))

    def _correlation_gradient(self, u, v):
        uu, vv, uv = u @ u, v @ v, u @ v
        if uu < GRAD_NORM_FLOOR**2 or vv < GRAD_NORM_FLOOR**2 or uv * uv < CORR_FLOOR * uu * vv:
            n = self.DB.shape[1]
            return np.zeros(n), np.zeros(n)
        # rho = uu vv / uv^2
        du = 2.0 * u * vv / uv**2 - 2.0 * uu * vv * v / uv**3
        dv = 2.0 * v * uu / uv**2 - 2.0 * uu * vv * u / uv**3
        return self.DB.T @ du, self.DB.T @ dv


def residuals(model: SceneModel, data: MeasurementSet, config: ObjectiveConfig, A: SystemMatrix,
              spectra: tuple[EnergySpectrum, EnergySpectrum]) -> ResidualVector:
    return Objective(A, spectra[0], spectra[1], data, config).residuals(model)


def jacobian(model: SceneModel, data: MeasurementSet, config: ObjectiveConfig, A: SystemMatrix,
             spectra: tuple[EnergySpectrum, EnergySpectrum], columns=None) -> np.ndarray:
    return Objective(A, spectra[0], spectra[1], data, config).jacobian(model, columns)


TRACE_COLUMNS = ("iteration", "F_p", "eps1_sq", "eps2_sq", "eps3_sq", "eps4_sq")


def format_cost_trace(rows: list[dict]) -> str:
    """CSV text of a cost trace (one row per accepted evaluation)."""
    lines = [",".join(TRACE_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(int(row[c])) if c == "iteration" else repr(float(row[c])) for c in TRACE_COLUMNS))
    return "\n".join(lines) + "\n"
