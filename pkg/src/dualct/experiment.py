"""Config-driven experiment pipeline: simulate, reconstruct, evaluate and report."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .defbp import defbp_reconstruct, format_ray_diagnostics, threshold_characteristic
from .forward import MeasurementSet, NoiseSpec, load_measurements, save_measurements, simulate
from .metrics import EvalResult, binarize_chi, evaluate, format_metrics_table
from .objective import (CLUTTER_REGION, NULL_REGION, PHANTOM1_REGION, ContrastRegion, ObjectiveConfig, g1)
from .pals import compose, initial_model, model_to_json
from .phantoms import PhantomSpec, clutter_phantom, paper_phantom_1, rasterize
from .projector import ImageGrid, ScanGeometry, build_system_matrix, load_image_csv, save_image
from .solver import LmConfig, ScheduleConfig, coordinate_descent, flat_background_fit, format_solver_trace
from .spectra import default_spectra, load_spectrum

log = logging.getLogger(__name__)

METHODS = ("proposed", "proposed-noR2", "defbp")
PHANTOMS = ("phantom1", "clutter")
DESK_GRID, PAPER_GRID = 64, 100
PAPER_DETECTORS = 150
# data-term weight used by the shipped experiments; see README
EXPERIMENT_SIGMA = 1e3


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def default_config() -> dict:
    """Every field with its default; a bare run is the desk-scale shape-phantom experiment at 60 dB."""
    return {
        "name": "phantom1-60db",
        "phantom": "phantom1",
        "phantom_seed": 0,
        "grid_n": DESK_GRID,
        "length_cm": 20.0,
        "n_angles": 30,
        "n_detectors": None,
        "spectrum_low": None,
        "spectrum_high": None,
        "noise": {"poisson_enabled": True, "background_snr_db": 60.0, "rng_seed": 1},
        "objective": {"lambda1": 0.1, "lambda2": 10.0, "penalty_r": 1e5, "smooth_max_eps": 1e-8,
                      "sigma_weight": EXPERIMENT_SIGMA},
        "region": None,
        "lm": LmConfig().to_dict(),
        "schedule": ScheduleConfig().to_dict(),
        "init": {"level_set_seed": 0, "background": "flat-fit"},
        "methods": ["proposed", "defbp"],
    }


PRESETS = {
    "phantom1-60db": {},
    "phantom1-40db": {"name": "phantom1-40db", "noise": {"background_snr_db": 40.0}},
    "clutter-40db": {"name": "clutter-40db", "phantom": "clutter", "noise": {"background_snr_db": 40.0}},
    "null-object": {"name": "null-object", "region": NULL_REGION.to_dict()},
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {sorted(PRESETS)}")
    return _merge(default_config(), PRESETS[name])


def resolve_config(source: Optional[str] = None, seed: Optional[int] = None, scale: Optional[str] = None,
                   overrides: Optional[dict] = None) -> dict:
    """Build a full config from a preset name, a JSON file (config or manifest) or the defaults."""
    if source is None:
        cfg = default_config()
    elif source in PRESETS:
        cfg = preset(source)
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config {source!r} is neither a preset nor an existing file")
        doc = json.loads(path.read_text(encoding="utf-8"))
        cfg = _merge(default_config(), doc.get("config", doc))
    if overrides:
        cfg = _merge(cfg, overrides)
    if seed is not None:
        cfg["noise"]["rng_seed"] = int(seed)
    if scale is not None:
        cfg.update(scale_settings(scale))
    validate_config(cfg)
    return cfg


def scale_settings(scale: str) -> dict:
    if scale == "desk":
        return {"grid_n": DESK_GRID, "n_detectors": None}
    if scale == "paper":
        return {"grid_n": PAPER_GRID, "n_detectors": PAPER_DETECTORS}
    try:
        n = int(scale)
    except ValueError:
        raise ConfigError(f"scale must be 'desk', 'paper' or a grid size, got {scale!r}") from None
    return {"grid_n": n, "n_detectors": None}


def validate_config(cfg: dict) -> None:
    if not cfg.get("methods"):
        raise ConfigError("method list is empty")
    bad = [m for m in cfg["methods"] if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
    if cfg["phantom"] not in PHANTOMS:
        raise ConfigError(f"unknown phantom {cfg['phantom']!r}")
    for key in ("spectrum_low", "spectrum_high"):
        if cfg.get(key) is not None and not Path(cfg[key]).is_file():
            raise ConfigError(f"{key} file {cfg[key]!r} does not exist")
    if int(cfg["grid_n"]) < 4 or int(cfg["n_angles"]) < 2:
        raise ConfigError("grid and view counts are too small")
    if cfg["init"]["background"] not in ("flat-fit", "constant"):
        raise ConfigError("init.background must be 'flat-fit' or 'constant'")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class Setup:
    """Everything derived deterministically from a config."""

    grid: ImageGrid
    geometry: ScanGeometry
    A: object
    spectra: tuple
    phantom: PhantomSpec
    region: ContrastRegion
    c_true: np.ndarray
    p_true: np.ndarray
    chi_true: np.ndarray


def truth_mask(spec: PhantomSpec, region: ContrastRegion) -> np.ndarray:
    """Pixels of the shapes whose contrast lies inside ``region`` (visible after overpainting)."""
    x, y = spec.grid.pixel_centers()
    owner = np.full(x.size, -1)
    for k, shape in enumerate(spec.shapes):
        owner[shape.contains(x, y)] = k
    inside = [k for k, s in enumerate(spec.shapes) if g1(s.material.c, s.material.p, region) < 0]
    return np.isin(owner, inside)


def build_setup(cfg: dict) -> Setup:
    n = int(cfg["grid_n"])
    grid = ImageGrid.square(n, float(cfg["length_cm"]))
    n_det = cfg["n_detectors"] if cfg["n_detectors"] is not None else int(round(1.5 * n))
    geometry = ScanGeometry.parallel(grid, int(cfg["n_angles"]), int(n_det))
    A = build_system_matrix(grid, geometry)
    low, high = default_spectra()
    if cfg.get("spectrum_low"):
        low = load_spectrum(cfg["spectrum_low"])
    if cfg.get("spectrum_high"):
        high = load_spectrum(cfg["spectrum_high"])
    if cfg["phantom"] == "phantom1":
        spec = paper_phantom_1(grid)
    else:
        spec = clutter_phantom(grid, seed=int(cfg["phantom_seed"]))
    if cfg.get("region"):
        region = ContrastRegion(**cfg["region"])
    else:
        region = spec.region or (PHANTOM1_REGION if cfg["phantom"] == "phantom1" else CLUTTER_REGION)
    c, p, _ = rasterize(spec)
    return Setup(grid, geometry, A, (low, high), spec, region, c, p, truth_mask(spec, region))


def noise_spec(cfg: dict) -> NoiseSpec:
    nz = cfg["noise"]
    snr = nz.get("background_snr_db")
    return NoiseSpec(bool(nz["poisson_enabled"]), None if snr is None else float(snr), int(nz["rng_seed"]))


def objective_config(cfg: dict, region: ContrastRegion, method: str) -> ObjectiveConfig:
    o = dict(cfg["objective"])
    if method == "proposed-noR2":
        o["lambda2"] = 0.0
    return ObjectiveConfig(region=region, **o)


@dataclass
class MethodResult:
    method: str
    c: np.ndarray
    p: np.ndarray
    chi: np.ndarray
    mask: np.ndarray
    trace_csv: str
    extra: dict


def run_proposed(cfg: dict, setup: Setup, data: MeasurementSet, method: str, checkpoint=None) -> MethodResult:
    region = setup.region
    init = cfg["init"]
    flat = flat_background_fit(setup.A, data, setup.spectra) if init["background"] == "flat-fit" else None
    model0 = initial_model(setup.grid, region.c0, region.p0, seed=int(init["level_set_seed"]), flat_background=flat)
    report = coordinate_descent(model0, data, objective_config(cfg, region, method), LmConfig(**cfg["lm"]),
                                ScheduleConfig(**cfg["schedule"]), A=setup.A, spectra=setup.spectra,
                                checkpoint_path=checkpoint)
    scene = compose(report.model)
    extra = {"stop_reason": report.stop_reason, "n_cycles": report.n_cycles, "final_cost": report.final_cost,
             "c_a": report.model.c_a, "p_a": report.model.p_a, "wall_time": report.wall_time,
             "model_json": model_to_json(report.model, setup.grid)}
    return MethodResult(method, scene.c_image, scene.p_image, scene.chi, binarize_chi(scene.chi),
                        format_solver_trace(report.cost_trace), extra)


def run_defbp(cfg: dict, setup: Setup, data: MeasurementSet) -> MethodResult:
    t0 = time.perf_counter()
    c, p, dec = defbp_reconstruct(data, setup.geometry, setup.grid, setup.spectra)
    mask = threshold_characteristic(c, p, setup.region)
    extra = {"flagged_fraction": dec.flagged_fraction, "wall_time": time.perf_counter() - t0}
    return MethodResult("defbp", c, p, mask.astype(float), mask, format_ray_diagnostics(dec), extra)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """One experiment directory; each stage writes its artifacts and records them."""

    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []
        self.timing: dict = {}
        self.summary: dict = {}
        self._setup: Optional[Setup] = None

    @property
    def setup(self) -> Setup:
        if self._setup is None:
            self._setup = build_setup(self.cfg)
        return self._setup

    def _track(self, *paths):
        for p in paths:
            p = Path(p)
            if p not in self.artifacts:
                self.artifacts.append(p)

    def _stage(self, name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            log.error("stage %s failed: %s", name, exc)
            raise StageError(name, exc) from exc
        self.timing[name] = time.perf_counter() - t0
        return result

    def simulate(self) -> MeasurementSet:
        def go():
            s = self.setup
            cfg_path = self.out / "config.json"
            cfg_path.write_text(json.dumps(self.cfg, indent=1, sort_keys=True) + "\n", encoding="utf-8")
            self._track(cfg_path)
            (self.out / "phantom.json").write_text(s.phantom.to_json() + "\n", encoding="utf-8")
            self._track(self.out / "phantom.json")
            for name, img in (("truth_c", s.c_true), ("truth_p", s.p_true), ("truth_chi", s.chi_true.astype(float))):
                self._track(*save_image(self.out / name, img, s.grid))
            data = simulate(s.A, s.c_true, s.p_true, *s.spectra, noise_spec(self.cfg))
            self._track(*save_measurements(data, self.out / "measurements", s.A.digest()))
            return data
        return self._stage("simulate", go)

    def load_data(self) -> MeasurementSet:
        prefix = self.out / "measurements"
        if not prefix.with_suffix(".csv").is_file():
            return self.simulate()
        data, header = load_measurements(prefix)
        if header.get("geometry_hash") and header["geometry_hash"] != self.setup.A.digest():
            raise ConfigError("measurements were simulated with a different geometry")
        return data

    def reconstruct(self, data: Optional[MeasurementSet] = None) -> list[MethodResult]:
        if data is None:
            data = self.load_data()
        results = []
        for method in self.cfg["methods"]:
            def go(method=method):
                if method == "defbp":
                    res = run_defbp(self.cfg, self.setup, data)
                    trace_name = f"{method}_rays.csv"
                else:
                    res = run_proposed(self.cfg, self.setup, data, method, self.out / f"{method}_checkpoint.json")
                    self._track(self.out / f"{method}_checkpoint.json")
                    model_path = self.out / f"{method}_model.json"
                    model_path.write_text(res.extra.pop("model_json") + "\n", encoding="utf-8")
                    self._track(model_path)
                    trace_name = f"{method}_trace.csv"
                trace_path = self.out / trace_name
                trace_path.write_text(res.trace_csv, encoding="utf-8", newline="\n")
                self._track(trace_path)
                for part, img in (("c", res.c), ("p", res.p), ("chi", res.chi)):
                    self._track(*save_image(self.out / f"{method}_{part}", img, self.setup.grid))
                self.summary[method] = {k: v for k, v in res.extra.items() if k != "wall_time"}
                return res
            results.append(self._stage(f"reconstruct:{method}", go))
        return results

    def evaluate(self) -> list[tuple[str, EvalResult]]:
        def go():
            s = self.setup
            rows = []
            for method in self.cfg["methods"]:
                c = load_image_csv(self.out / f"{method}_c.csv")
                p = load_image_csv(self.out / f"{method}_p.csv")
                chi = load_image_csv(self.out / f"{method}_chi.csv")
                mask = chi >= 0.5 if method == "defbp" else binarize_chi(chi)
                rows.append((method, evaluate(c, p, mask, s.c_true, s.p_true, s.chi_true)))
            path = self.out / "metrics.csv"
            path.write_text(format_metrics_table(rows), encoding="utf-8", newline="\n")
            self._track(path)
            return rows
        return self._stage("evaluate", go)

    def write_manifest(self, status: str = "ok", failed_stage: Optional[str] = None) -> Path:
        manifest = {
            "config": self.cfg,
            "config_hash": config_hash(self.cfg),
            "seeds": {"noise": self.cfg["noise"]["rng_seed"], "phantom": self.cfg["phantom_seed"],
                      "level_set": self.cfg["init"]["level_set_seed"]},
            "versions": {"dualct": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "status": status,
            "failed_stage": failed_stage,
            "methods": self.summary,
            "artifacts": {p.name: _sha256(p) for p in self.artifacts if p.is_file()},
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        (self.out / "timing.json").write_text(json.dumps(self.timing, indent=1, sort_keys=True) + "\n",
                                              encoding="utf-8")
        return path

    def run_all(self) -> list[tuple[str, EvalResult]]:
        try:
            data = self.simulate()
            self.reconstruct(data)
            rows = self.evaluate()
        except StageError as err:
            self.write_manifest("failed", err.stage)
            raise
        self.write_manifest()
        return rows


def run(cfg: dict, out) -> list[tuple[str, EvalResult]]:
    return Run(cfg, Path(out)).run_all()


COMPARE_COLUMNS = ("experiment", "snr_db", "seed", "method", "E_L2_compton", "E_L2_photoelectric", "D_chi")


def _read_run(run_dir: Path) -> tuple[dict, list[list[str]]]:
    metrics = run_dir / "metrics.csv"
    if not metrics.is_file():
        raise FileNotFoundError(f"missing metrics file {metrics}")
    cfg_path = run_dir / "config.json"
    cfg = json.loads(cfg_path.read_text(encoding="utf-8")) if cfg_path.is_file() else {}
    lines = metrics.read_text(encoding="utf-8").splitlines()
    return cfg, [line.split(",") for line in lines[1:] if line]


def compare(run_dirs) -> tuple[str, str]:
    """(merged CSV, plain-text table) over completed runs, highest SNR first."""
    entries = []
    for k, d in enumerate(run_dirs):
        cfg, rows = _read_run(Path(d))
        snr = (cfg.get("noise") or {}).get("background_snr_db")
        entries.append((k, cfg.get("name", Path(d).name), snr, (cfg.get("noise") or {}).get("rng_seed", ""), rows))
    # noise-free runs (no background SNR) sort ahead of every finite SNR
    entries.sort(key=lambda e: (-(np.inf if e[2] is None else float(e[2])), e[0]))
    records = []
    for _, name, snr, seed, rows in entries:
        for row in rows:
            records.append([str(name), "" if snr is None else repr(float(snr)), str(seed)] + row)
    csv = "\n".join([",".join(COMPARE_COLUMNS)] + [",".join(r) for r in records]) + "\n"
    widths = [max(len(COMPARE_COLUMNS[i]), *(len(r[i]) for r in records)) if records else len(COMPARE_COLUMNS[i])
              for i in range(len(COMPARE_COLUMNS))]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    text = "\n".join([fmt(COMPARE_COLUMNS), fmt(["-" * w for w in widths])] + [fmt(r) for r in records]) + "\n"
    return csv, text
