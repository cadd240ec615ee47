"""Ground-truth scenes: geometric shape phantoms and a seeded clutter phantom."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .objective import CLUTTER_REGION, PHANTOM1_REGION, ContrastRegion, g1
from .projector import ImageGrid
from .spectra import MaterialPoint

PHANTOM1_FILE = "phantom1.json"
# coordinates in the stored layouts refer to a 20 x 20 cm field of view
LAYOUT_EXTENT_CM = 20.0


@dataclass(frozen=True)
class Shape:
    """One constant-contrast region.

    ``kind`` is ``ellipse`` (params cx, cy, rx, ry, angle_deg), ``rectangle``
    (x0, y0, x1, y1) or ``polygon`` (vertices [[x, y], ...]).
    """

    kind: str
    params: dict
    material: MaterialPoint

    def __post_init__(self):
        if self.kind not in ("ellipse", "rectangle", "polygon"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.kind == "polygon" and len(self.params.get("vertices", ())) < 3:
            raise ValueError("polygon needs at least three vertices")
        if self.kind == "ellipse" and not (self.params["rx"] > 0 and self.params["ry"] > 0):
            raise ValueError("ellipse radii must be positive")

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "ellipse":
            t = np.deg2rad(p.get("angle_deg", 0.0))
            dx, dy = x - p["cx"], y - p["cy"]
            u = dx * np.cos(t) + dy * np.sin(t)
            v = -dx * np.sin(t) + dy * np.cos(t)
            return (u / p["rx"]) ** 2 + (v / p["ry"]) ** 2 <= 1.0
        if self.kind == "rectangle":
            return (x >= p["x0"]) & (x <= p["x1"]) & (y >= p["y0"]) & (y <= p["y1"])
        return _point_in_polygon(x, y, np.asarray(p["vertices"], dtype=float))

    def bounds(self) -> tuple[float, float, float, float]:
        p = self.params
        if self.kind == "ellipse":
            r = max(p["rx"], p["ry"])
            return p["cx"] - r, p["cy"] - r, p["cx"] + r, p["cy"] + r
        if self.kind == "rectangle":
            return p["x0"], p["y0"], p["x1"], p["y1"]
        v = np.asarray(p["vertices"], dtype=float)
        return v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()

    def scaled(self, sx: float, sy: float) -> "Shape":
        p = dict(self.params)
        if self.kind == "ellipse":
            p.update(cx=p["cx"] * sx, cy=p["cy"] * sy, rx=p["rx"] * sx, ry=p["ry"] * sy)
        elif self.kind == "rectangle":
            p.update(x0=p["x0"] * sx, x1=p["x1"] * sx, y0=p["y0"] * sy, y1=p["y1"] * sy)
        else:
            p["vertices"] = [[vx * sx, vy * sy] for vx, vy in p["vertices"]]
        return Shape(self.kind, p, self.material)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params,
                "material": {"c": self.material.c, "p": self.material.p, "name": self.material.name}}

    @classmethod
    def from_dict(cls, d: dict) -> "Shape":
        m = d["material"]
        return cls(d["kind"], dict(d["params"]), MaterialPoint(float(m["c"]), float(m["p"]), m.get("name", "")))


def _point_in_polygon(x, y, vertices):
    # even-odd crossing rule
    inside = np.zeros(np.shape(x), dtype=bool)
    n = len(vertices)
    for k in range(n):
        x1, y1 = vertices[k]
        x2, y2 = vertices[(k + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside


@dataclass(frozen=True)
class PhantomSpec:
    grid: ImageGrid
    shapes: tuple
    background: MaterialPoint
    object_index: Optional[int] = None
    region: Optional[ContrastRegion] = None
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.object_index is not None and not 0 <= self.object_index < len(self.shapes):
            raise ValueError("object-of-interest index out of range")
        tol = 1e-9
        for s in self.shapes:
            x0, y0, x1, y1 = s.bounds()
            if x0 < -tol or y0 < -tol or x1 > self.grid.lx + tol or y1 > self.grid.ly + tol:
                raise ValueError(f"{s.kind} extends outside the grid")

    def to_dict(self) -> dict:
        return {"name": self.name, "grid": self.grid.to_dict(),
                "background": {"c": self.background.c, "p": self.background.p, "name": self.background.name},
                "object_index": self.object_index,
                "region": self.region.to_dict() if self.region else None,
                "shapes": [s.to_dict() for s in self.shapes], "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        bg = d["background"]
        reg = d.get("region")
        return cls(ImageGrid(**d["grid"]), tuple(Shape.from_dict(s) for s in d["shapes"]),
                   MaterialPoint(float(bg["c"]), float(bg["p"]), bg.get("name", "")), d.get("object_index"),
                   ContrastRegion(**reg) if reg else None, d.get("name", ""), d.get("meta", {}))

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls.from_dict(json.loads(text))


def rasterize(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(c, p, chi) sampled at pixel centres; later shapes paint over earlier ones."""
    x, y = spec.grid.pixel_centers()
    c = np.full(x.size, float(spec.background.c))
    p = np.full(x.size, float(spec.background.p))
    owner = np.full(x.size, -1)
    for k, shape in enumerate(spec.shapes):
        inside = shape.contains(x, y)
        c[inside] = shape.material.c
        p[inside] = shape.material.p
        owner[inside] = k
    chi = (owner == spec.object_index) if spec.object_index is not None else np.zeros(x.size, dtype=bool)
    return c, p, chi


def _layout_on_grid(layout: dict, grid: ImageGrid, name: str) -> PhantomSpec:
    extent = float(layout.get("extent_cm", LAYOUT_EXTENT_CM))
    sx, sy = grid.lx / extent, grid.ly / extent
    bg = layout["background"]
    shapes = tuple(Shape.from_dict(s).scaled(sx, sy) for s in layout["shapes"])
    reg = layout.get("region")
    return PhantomSpec(grid, shapes, MaterialPoint(float(bg["c"]), float(bg["p"]), bg.get("name", "")),
                       layout.get("object_index"), ContrastRegion(**reg) if reg else None, name,
                       {"layout_version": layout.get("version", "")})


def paper_phantom_1(grid: ImageGrid) -> PhantomSpec:
    """Shape phantom: concave target lower left plus four non-target shapes."""
    text = (resources.files("dualct") / "data" / PHANTOM1_FILE).read_text(encoding="utf-8")
    spec = _layout_on_grid(json.loads(text), grid, "phantom1")
    if spec.region is None:
        spec = PhantomSpec(spec.grid, spec.shapes, spec.background, spec.object_index, PHANTOM1_REGION,
                           spec.name, spec.meta)
    return spec


CLUTTER_BACKGROUND = MaterialPoint(0.03, 300.0, "foam")
CLUTTER_TARGET = MaterialPoint(0.30, 5000.0, "target")


def _outside(region: ContrastRegion, c: float, p: float) -> bool:
    return g1(c, p, region) > 0


def clutter_phantom(grid: ImageGrid, seed: int = 0, n_items: int = 14,
                    region: ContrastRegion = CLUTTER_REGION) -> PhantomSpec:
    """Seeded low-density clutter with one central disk whose contrast lies inside ``region``."""
    rng = np.random.default_rng(seed)
    lx, ly = grid.lx, grid.ly
    shapes = []
    while len(shapes) < n_items:
        c = float(rng.uniform(0.05, 0.22))
        p = float(rng.uniform(400.0, 3500.0))
        if not _outside(region, c, p):
            continue
        mat = MaterialPoint(round(c, 4), round(p, 1), "clutter")
        if rng.random() < 0.5:
            rx, ry = rng.uniform(0.04, 0.14, 2) * np.array([lx, ly])
            cx = rng.uniform(rx, lx - rx)
            cy = rng.uniform(ry, ly - ry)
            r = max(rx, ry)
            cx, cy = np.clip(cx, r, lx - r), np.clip(cy, r, ly - r)
            shapes.append(Shape("ellipse", {"cx": float(cx), "cy": float(cy), "rx": float(rx), "ry": float(ry),
                                            "angle_deg": float(rng.uniform(0, 180))}, mat))
        else:
            w, h = rng.uniform(0.06, 0.3, 2) * np.array([lx, ly])
            x0 = rng.uniform(0, lx - w)
            y0 = rng.uniform(0, ly - h)
            shapes.append(Shape("rectangle", {"x0": float(x0), "y0": float(y0), "x1": float(x0 + w),
                                              "y1": float(y0 + h)}, mat))
    r = 0.09 * min(lx, ly)
    cx, cy = 0.5 * lx + 0.06 * lx, 0.5 * ly - 0.04 * ly
    shapes.append(Shape("ellipse", {"cx": cx, "cy": cy, "rx": r, "ry": r, "angle_deg": 0.0}, CLUTTER_TARGET))
    return PhantomSpec(grid, tuple(shapes), CLUTTER_BACKGROUND, len(shapes) - 1, region, "clutter",
                       {"seed": int(seed)})


def check_contrasts(spec: PhantomSpec) -> dict:
    """g1 of every shape against the phantom's contrast region; the target must be inside, the rest outside."""
    if spec.region is None:
        raise ValueError("phantom has no contrast region")
    values = [g1(s.material.c, s.material.p, spec.region) for s in spec.shapes]
    ok = all((v < 0) == (k == spec.object_index) for k, v in enumerate(values))
    return {"g1": values, "background_g1": g1(spec.background.c, spec.background.p, spec.region), "ok": ok}
