"""2-D parallel-beam geometry: ray tracing into a sparse system matrix, projection and FBP."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class ImageGrid:
    """Pixel grid over the rectangle [0, lx] x [0, ly] (cm).

    Pixels are ordered lexicographically, x fastest: ``j = iy * nx + ix``.
    """

    lx: float
    ly: float
    nx: int
    ny: int

    def __post_init__(self):
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("grid extents must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one pixel per axis")

    @classmethod
    def square(cls, n: int, length: float = 20.0) -> "ImageGrid":
        return cls(length, length, n, n)

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def pixel_area(self) -> float:
        return self.dx * self.dy

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * self.lx, 0.5 * self.ly)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (x, y) coordinates of all pixel centres."""
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        xx, yy = np.meshgrid(x, y)
        return xx.ravel(), yy.ravel()

    def to_dict(self) -> dict:
        return {"lx": self.lx, "ly": self.ly, "nx": self.nx, "ny": self.ny}


@dataclass(frozen=True)
class ScanGeometry:
    """Parallel-beam views; detector offsets are centred on the grid centre."""

    angles_deg: tuple
    detectors_per_view: int
    detector_spacing: float

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles_deg)
        if len(set(angles)) != len(angles):
            raise ValueError("view angles must be distinct")
        if self.detectors_per_view < 1:
            raise ValueError("need at least one detector per view")
        if self.detector_spacing <= 0:
            raise ValueError("detector spacing must be positive")
        object.__setattr__(self, "angles_deg", angles)

    @classmethod
    def parallel(cls, grid: ImageGrid, n_angles: int, n_detectors: int) -> "ScanGeometry":
        """Equally spaced views on [0, 180) with the detector array spanning the grid diagonal."""
        angles = tuple(180.0 * k / n_angles for k in range(n_angles))
        span = float(np.hypot(grid.lx, grid.ly))
        return cls(angles, n_detectors, span / n_detectors)

    @property
    def n_angles(self) -> int:
        return len(self.angles_deg)

    @property
    def n_rays(self) -> int:
        return self.n_angles * self.detectors_per_view

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.n_angles, self.detectors_per_view)

    def detector_offsets(self) -> np.ndarray:
        k = np.arange(self.detectors_per_view)
        return (k - 0.5 * (self.detectors_per_view - 1)) * self.detector_spacing

    def rays(self, grid: ImageGrid):
        """Per-ray (start point, unit direction), rays ordered view-major.

        A ray with angle phi and offset s is the line
        (x - xc) cos(phi) + (y - yc) sin(phi) = s.
        """
        phi = np.deg2rad(np.asarray(self.angles_deg))
        s = self.detector_offsets()
        cos, sin = np.repeat(np.cos(phi), s.size), np.repeat(np.sin(phi), s.size)
        ss = np.tile(s, phi.size)
        xc, yc = grid.center
        points = np.column_stack([xc + ss * cos, yc + ss * sin])
        dirs = np.column_stack([-sin, cos])
        return points, dirs

    def to_dict(self) -> dict:
        return {"angles_deg": list(self.angles_deg), "detectors_per_view": self.detectors_per_view,
                "detector_spacing": self.detector_spacing}


def clip_line_to_box(point, direction, lx, ly):
    """Parameter interval [t0, t1] of the line inside [0,lx]x[0,ly] (Liang-Barsky); None if it misses."""
    t0, t1 = -np.inf, np.inf
    for p0, d, hi in ((point[0], direction[0], lx), (point[1], direction[1], ly)):
        if abs(d) < 1e-15:
            if p0 < 0 or p0 > hi:
                return None
            continue
        ta, tb = (0.0 - p0) / d, (hi - p0) / d
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
    if t1 <= t0:
        return None
    return t0, t1


def _trace_ray(point, direction, grid: ImageGrid):
    clip = clip_line_to_box(point, direction, grid.lx, grid.ly)
    if clip is None:
        return np.empty(0, dtype=np.int64), np.empty(0)
    t0, t1 = clip
    ts = [np.array([t0, t1])]
    for p0, d, n, h in ((point[0], direction[0], grid.nx, grid.dx), (point[1], direction[1], grid.ny, grid.dy)):
        if abs(d) < 1e-15:
            continue
        planes = np.arange(n + 1) * h
        t = (planes - p0) / d
        ts.append(t[(t > t0) & (t < t1)])
    t = np.unique(np.concatenate(ts))
    seg = np.diff(t)
    keep = seg > 1e-12
    mid = 0.5 * (t[:-1] + t[1:])[keep]
    seg = seg[keep]
    ix = np.clip(np.floor((point[0] + mid * direction[0]) / grid.dx).astype(np.int64), 0, grid.nx - 1)
    iy = np.clip(np.floor((point[1] + mid * direction[1]) / grid.dy).astype(np.int64), 0, grid.ny - 1)
    return iy * grid.nx + ix, seg


@dataclass(frozen=True, eq=False)
class SystemMatrix:
    """Ray-pixel intersection lengths, shape (n_rays, n_pixels)."""

    matrix: sp.csr_matrix
    grid: ImageGrid
    geometry: ScanGeometry

    @property
    def shape(self):
        return self.matrix.shape

    @cached_property
    def T(self) -> sp.csr_matrix:
        return self.matrix.T.tocsr()

    def __matmul__(self, x):
        return self.matrix @ x

    def digest(self) -> str:
        m = self.matrix
        h = hashlib.sha256()
        for arr in (m.indptr, m.indices, m.data):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_system_matrix(grid: ImageGrid, geom: ScanGeometry) -> SystemMatrix:
    """Exact ray-pixel intersection lengths by boundary-crossing traversal."""
    points, dirs = geom.rays(grid)
    indptr = [0]
    cols, vals = [], []
    for p, d in zip(points, dirs):
        j, seg = _trace_ray(p, d, grid)
        order = np.argsort(j, kind="stable")
        cols.append(j[order])
        vals.append(seg[order])
        indptr.append(indptr[-1] + j.size)
    cols = np.concatenate(cols) if cols else np.empty(0, np.int64)
    vals = np.concatenate(vals) if vals else np.empty(0)
    mat = sp.csr_matrix((vals, cols, np.asarray(indptr)), shape=(geom.n_rays, grid.n_pixels))
    mat.sum_duplicates()
    return SystemMatrix(mat, grid, geom)


def forward_project(A: SystemMatrix, image) -> np.ndarray:
    """Line integrals of a pixel image, returned as an (n_angles, n_detectors) sinogram."""
    x = np.asarray(image, dtype=float).ravel()
    if x.size != A.shape[1]:
        raise ValueError(f"image has {x.size} pixels, system matrix expects {A.shape[1]}")
    return (A.matrix @ x).reshape(A.geometry.sinogram_shape)


def back_project(A: SystemMatrix, sinogram) -> np.ndarray:
    """Adjoint of forward_project."""
    y = np.asarray(sinogram, dtype=float).ravel()
    if y.size != A.shape[0]:
        raise ValueError(f"sinogram has {y.size} samples, system matrix expects {A.shape[0]}")
    return A.T @ y


def _ramp_kernel(n: int, tau: float) -> np.ndarray:
    # spatial Ram-Lak kernel sampled at integer offsets -(n-1)..(n-1)
    k = np.arange(-(n - 1), n)
    h = np.zeros(k.size)
    h[k == 0] = 1.0 / (4.0 * tau**2)
    odd = (k % 2) != 0
    h[odd] = -1.0 / (np.pi * k[odd] * tau) ** 2
    return h


def _window(name: str, freqs: np.ndarray) -> np.ndarray:
    # freqs normalised to [-0.5, 0.5] cycles/sample
    if name in (None, "none", "ram-lak", "ramlak"):
        return np.ones_like(freqs)
    if name == "hamming":
        return 0.54 + 0.46 * np.cos(2.0 * np.pi * freqs)
    if name == "hann":
        return 0.5 + 0.5 * np.cos(2.0 * np.pi * freqs)
    raise ValueError(f"unknown apodization window {name!r}")


def filter_sinogram(sino: np.ndarray, spacing: float, window: str = "hamming") -> np.ndarray:
    """Ramp-filter every view in the frequency domain, times an apodization window."""
    n_views, n_det = sino.shape
    size = 1 << int(np.ceil(np.log2(2 * n_det)))
    h = _ramp_kernel(n_det, spacing)
    kernel = np.zeros(size)
    kernel[: n_det] = h[n_det - 1:]
    kernel[size - (n_det - 1):] = h[: n_det - 1]
    response = np.real(np.fft.fft(kernel)) * _window(window, np.fft.fftfreq(size))
    padded = np.zeros((n_views, size))
    padded[:, :n_det] = sino
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * response, axis=1))
    return filtered[:, :n_det] * spacing


def fbp(sino, geom: ScanGeometry, grid: ImageGrid, window: str = "hamming") -> np.ndarray:
    """Filtered back projection onto the pixel centres of ``grid`` (flattened)."""
    sino = np.asarray(sino, dtype=float).reshape(geom.sinogram_shape)
    if geom.n_angles < 2:
        raise ValueError("filtered back projection needs at least two views")
    q = filter_sinogram(sino, geom.detector_spacing, window)
    x, y = grid.pixel_centers()
    xc, yc = grid.center
    x, y = x - xc, y - yc
    offsets = geom.detector_offsets()
    out = np.zeros(grid.n_pixels)
    for view, phi in enumerate(np.deg2rad(geom.angles_deg)):
        s = x * np.cos(phi) + y * np.sin(phi)
        out += np.interp(s, offsets, q[view], left=0.0, right=0.0)
    return out * (np.pi / geom.n_angles)


def format_array_csv(values) -> str:
    """Row-major CSV of a 2-D array with round-trip float formatting."""
    arr = np.atleast_2d(np.asarray(values, dtype=float))
    return "\n".join(",".join(repr(float(v)) for v in row) for row in arr.tolist()) + "\n"


def save_image(path, image, grid: ImageGrid) -> tuple[Path, Path, Path]:
    """Write ``<path>.csv``, a 16-bit ``<path>.pgm`` and a ``<path>.json`` sidecar.

    The PGM maps [min, max] of the image linearly onto 0..65535; the sidecar
    records that range and the grid so the image can be rescaled. Row 0 of the
    CSV and the bottom row of the PGM are both y = 0.
    """
    path = Path(path)
    img = np.asarray(image, dtype=float).reshape(grid.shape)
    csv_path, pgm_path, json_path = path.with_suffix(".csv"), path.with_suffix(".pgm"), path.with_suffix(".json")
    csv_path.write_text(format_array_csv(img), encoding="utf-8", newline="\n")
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    levels = np.zeros(img.shape) if span == 0 else (img - lo) / span
    raw = np.round(levels * 65535.0).astype(">u2")[::-1]
    header = f"P5\n{grid.nx} {grid.ny}\n65535\n".encode("ascii")
    pgm_path.write_bytes(header + raw.tobytes())
    meta = {"grid": grid.to_dict(), "min": lo, "max": hi, "pgm": pgm_path.name, "csv": csv_path.name}
    json_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, pgm_path, json_path


def load_image_csv(path) -> np.ndarray:
    """Flattened image from a CSV written by ``save_image``."""
    return np.loadtxt(Path(path), delimiter=",", ndmin=2).ravel()


def read_pgm(path) -> tuple[np.ndarray, int]:
    """(rows top-first, maxval) of a binary PGM written by ``save_image``."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if fields[0] != "P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data[pos:], dtype=dtype, count=w * h).reshape(h, w), maxval
