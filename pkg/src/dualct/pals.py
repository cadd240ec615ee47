"""Parametric level-set scene model.

The object support is the positive region of a weighted sum of Gaussian RBFs,
smoothed through H_eps; Compton and photoelectric images blend a constant object
contrast with low-order RBF background expansions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .projector import ImageGrid

PAPER_GRID = 100
PAPER_BACKGROUND_PER_SIDE = 26
PAPER_LEVELSET_PER_SIDE = 12
BACKGROUND_WIDTH_PIXELS = 6.0
LEVELSET_WIDTH_PIXELS = 10.0
BETA_INIT = 8e-3
ALPHA_INIT = 80.0


def _check_eps(eps):
    if not eps > 0:
        raise ValueError("eps must be positive")


def heaviside_eps(x, eps):
    """C1 smoothed step: 0 below -eps, 1 above eps, 1/2(1 + x/eps + sin(pi x/eps)/pi) between."""
    _check_eps(eps)
    x = np.asarray(x, dtype=float)
    z = np.clip(x / eps, -1.0, 1.0)
    out = np.clip(0.5 * (1.0 + z + np.sin(np.pi * z) / np.pi), 0.0, 1.0)
    return out if out.ndim else float(out)


def dirac_eps(x, eps):
    """Derivative of heaviside_eps: (1 + cos(pi x/eps)) / (2 eps) on |x| <= eps."""
    _check_eps(eps)
    x = np.asarray(x, dtype=float)
    z = x / eps
    out = np.where(np.abs(z) <= 1.0, (1.0 + np.cos(np.pi * z)) / (2.0 * eps), 0.0)
    return out if out.ndim else float(out)


def lattice_centers(grid: ImageGrid, kx: int, ky: int) -> np.ndarray:
    """kx-by-ky centres spanning the grid rectangle edge to edge (x fastest)."""
    xs = np.linspace(0.0, grid.lx, kx) if kx > 1 else np.array([0.5 * grid.lx])
    ys = np.linspace(0.0, grid.ly, ky) if ky > 1 else np.array([0.5 * grid.ly])
    xx, yy = np.meshgrid(xs, ys)
    return np.column_stack([xx.ravel(), yy.ravel()])


@dataclass(frozen=True, eq=False)
class RbfBasis:
    """Gaussian RBFs exp(-|r - r_i|^2 / width^2) sampled at pixel centres."""

    centers: np.ndarray
    width: float
    matrix: np.ndarray
    lattice: tuple = ()

    @classmethod
    def on_grid(cls, grid: ImageGrid, centers, width: float, lattice: tuple = ()) -> "RbfBasis":
        if not width > 0:
            raise ValueError("RBF width must be positive")
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        x, y = grid.pixel_centers()
        d2 = (x[:, None] - centers[None, :, 0]) ** 2 + (y[:, None] - centers[None, :, 1]) ** 2
        return cls(centers, float(width), np.exp(-d2 / width**2), tuple(lattice))

    @classmethod
    def lattice_on_grid(cls, grid: ImageGrid, kx: int, ky: int, width: float) -> "RbfBasis":
        return cls.on_grid(grid, lattice_centers(grid, kx, ky), width, (kx, ky))

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    def describe(self) -> dict:
        return {"lattice": list(self.lattice), "width": self.width, "centers": self.centers.tolist()}


def scaled_count(n: int, paper_count: int) -> int:
    return max(1, int(round(paper_count * n / PAPER_GRID)))


def build_default_bases(grid: ImageGrid) -> tuple[RbfBasis, RbfBasis]:
    """(level-set basis, background basis) with the lattice density of the 100x100 setup."""
    ls = RbfBasis.lattice_on_grid(grid, scaled_count(grid.nx, PAPER_LEVELSET_PER_SIDE),
                                  scaled_count(grid.ny, PAPER_LEVELSET_PER_SIDE), LEVELSET_WIDTH_PIXELS * grid.dx)
    bg = RbfBasis.lattice_on_grid(grid, scaled_count(grid.nx, PAPER_BACKGROUND_PER_SIDE),
                                  scaled_count(grid.ny, PAPER_BACKGROUND_PER_SIDE), BACKGROUND_WIDTH_PIXELS * grid.dx)
    return ls, bg


@dataclass(frozen=True, eq=False)
class SceneModel:
    """Parameters theta = [c_a, p_a, a, beta, alpha] plus the bases that expand them."""

    c_a: float
    p_a: float
    a: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    level_set_basis: RbfBasis
    background_basis: RbfBasis
    heaviside_eps: float

    def __post_init__(self):
        for name in ("a", "beta", "alpha"):
            v = np.asarray(getattr(self, name), dtype=float).ravel().copy()
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, v)
        if self.a.size != self.level_set_basis.size:
            raise ValueError("level-set weights do not match the level-set basis")
        if self.beta.size != self.background_basis.size or self.alpha.size != self.background_basis.size:
            raise ValueError("background weights do not match the background basis")
        _check_eps(self.heaviside_eps)

    @property
    def n_levelset(self) -> int:
        return self.a.size

    @property
    def n_background(self) -> int:
        return self.beta.size

    @property
    def n_params(self) -> int:
        return 2 + self.n_levelset + 2 * self.n_background

    def slices(self) -> dict:
        L, N = self.n_levelset, self.n_background
        return {"c_a": slice(0, 1), "p_a": slice(1, 2), "a": slice(2, 2 + L),
                "beta": slice(2 + L, 2 + L + N), "alpha": slice(2 + L + N, 2 + L + 2 * N)}

    def block_mask(self, *names) -> np.ndarray:
        mask = np.zeros(self.n_params, dtype=bool)
        sl = self.slices()
        for name in names:
            mask[sl[name]] = True
        return mask

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([[self.c_a, self.p_a], self.a, self.beta, self.alpha])

    def with_theta(self, theta) -> "SceneModel":
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError(f"theta has {theta.size} entries, model needs {self.n_params}")
        sl = self.slices()
        return replace(self, c_a=float(theta[0]), p_a=float(theta[1]), a=theta[sl["a"]],
                       beta=theta[sl["beta"]], alpha=theta[sl["alpha"]])

    def to_dict(self) -> dict:
        return {"c_a": self.c_a, "p_a": self.p_a, "a": self.a.tolist(), "beta": self.beta.tolist(),
                "alpha": self.alpha.tolist(), "heaviside_eps": self.heaviside_eps,
                "level_set_basis": self.level_set_basis.describe(),
                "background_basis": self.background_basis.describe()}


@dataclass(frozen=True)
class ComposedScene:
    c_image: np.ndarray
    p_image: np.ndarray
    chi: np.ndarray
    o_field: np.ndarray
    c_background: np.ndarray
    p_background: np.ndarray


def compose(model: SceneModel) -> ComposedScene:
    P = model.level_set_basis.matrix
    B = model.background_basis.matrix
    if P.shape[0] != B.shape[0]:
        raise ValueError("level-set and background bases live on different grids")
    o = P @ model.a
    chi = heaviside_eps(o, model.heaviside_eps)
    cb, pb = B @ model.beta, B @ model.alpha
    c = chi * model.c_a + (1.0 - chi) * cb
    p = chi * model.p_a + (1.0 - chi) * pb
    return ComposedScene(c, p, chi, o, cb, pb)


@dataclass(frozen=True)
class ImageJacobians:
    """Pixel derivatives of the composed images, stored per parameter block.

    Row-scaled forms avoid materialising dense N_p x n_params matrices:
    dc/da = diag(dc_do) P, dc/dbeta = diag(1 - chi) B, dc/dc_a = chi.
    """

    chi: np.ndarray
    dc_do: np.ndarray
    dp_do: np.ndarray
    P: np.ndarray
    B: np.ndarray

    @property
    def dc_dca(self) -> np.ndarray:
        return self.chi

    @property
    def dp_dpa(self) -> np.ndarray:
        return self.chi

    @property
    def dc_da(self) -> np.ndarray:
        return self.dc_do[:, None] * self.P

    @property
    def dp_da(self) -> np.ndarray:
        return self.dp_do[:, None] * self.P

    @property
    def dc_dbeta(self) -> np.ndarray:
        return (1.0 - self.chi)[:, None] * self.B

    @property
    def dp_dalpha(self) -> np.ndarray:
        return (1.0 - self.chi)[:, None] * self.B

    def dense(self, n_params: int, slices: dict) -> tuple[np.ndarray, np.ndarray]:
        """Full (dc/dtheta, dp/dtheta), N_p x n_params."""
        n = self.chi.size
        dc, dp = np.zeros((n, n_params)), np.zeros((n, n_params))
        dc[:, slices["c_a"]] = self.chi[:, None]
        dp[:, slices["p_a"]] = self.chi[:, None]
        dc[:, slices["a"]] = self.dc_da
        dp[:, slices["a"]] = self.dp_da
        dc[:, slices["beta"]] = self.dc_dbeta
        dp[:, slices["alpha"]] = self.dp_dalpha
        return dc, dp


def image_jacobians(model: SceneModel, scene: ComposedScene | None = None) -> ImageJacobians:
    scene = scene if scene is not None else compose(model)
    delta = dirac_eps(scene.o_field, model.heaviside_eps)
    return ImageJacobians(scene.chi, delta * (model.c_a - scene.c_background),
                          delta * (model.p_a - scene.p_background),
                          model.level_set_basis.matrix, model.background_basis.matrix)


def flat_weights(basis: RbfBasis) -> np.ndarray:
    """Weights whose expansion is the constant image 1 in the least-squares sense."""
    w, *_ = np.linalg.lstsq(basis.matrix, np.ones(basis.matrix.shape[0]), rcond=None)
    return w


def initial_model(grid: ImageGrid, c_a: float, p_a: float, seed: int = 0,
                  bases: tuple[RbfBasis, RbfBasis] | None = None, eps: float | None = None,
                  beta0: float = BETA_INIT, alpha0: float = ALPHA_INIT,
                  flat_background: tuple[float, float] | None = None) -> SceneModel:
    """Random level set (uniform [-1, 1] weights shifted to mean(O) = 0) over a flat background.

    Background weights are the constants ``beta0``/``alpha0`` unless
    ``flat_background = (c, p)`` is given, in which case they expand the flat
    images c and p.
    """
    ls, bg = bases if bases is not None else build_default_bases(grid)
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1.0, 1.0, ls.size)
    P = ls.matrix
    a = a - (P @ a).mean() / P.sum(axis=1).mean()
    if flat_background is None:
        beta, alpha = np.full(bg.size, beta0), np.full(bg.size, alpha0)
    else:
        w = flat_weights(bg)
        beta, alpha = flat_background[0] * w, flat_background[1] * w
    return SceneModel(float(c_a), float(p_a), a, beta, alpha, ls, bg, float(eps if eps is not None else grid.dx))


def model_to_json(model: SceneModel, grid: ImageGrid) -> str:
    d = model.to_dict()
    d["grid"] = grid.to_dict()
    return json.dumps(d, indent=1, sort_keys=True)


def model_from_json(text: str) -> tuple[SceneModel, ImageGrid]:
    d = json.loads(text)
    grid = ImageGrid(**d["grid"])
    lsd, bgd = d["level_set_basis"], d["background_basis"]
    ls = RbfBasis.on_grid(grid, lsd["centers"], lsd["width"], tuple(lsd["lattice"]))
    bg = RbfBasis.on_grid(grid, bgd["centers"], bgd["width"], tuple(bgd["lattice"]))
    return SceneModel(d["c_a"], d["p_a"], d["a"], d["beta"], d["alpha"], ls, bg, d["heaviside_eps"]), grid
