"""Run configuration: INI sections for paths, grid/model, acquisition,
inversion settings and synthetic events.

Relative paths are resolved against the directory of the config file.
"""
import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .engine import InversionConfig
from .grid import Acquisition, Grid, Model, read_model
from .synthesis import SyntheticEvent


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class ModelSpec:
    """Analytic velocity model: linear gradient plus an optional Gaussian lens.

    The starting model is the true model smoothed with a Gaussian of
    ``smoothing`` cells (0 keeps it exact).
    """

    v_top: float = 2000.0
    v_bottom: float = 2800.0
    lens_dv: float = 0.0
    lens_z: float = 0.0
    lens_x: float = 0.0
    lens_radius: float = 30.0
    smoothing: float = 0.0
    v_min: float = 1500.0
    v_max: float = 3500.0

    def velocity(self, grid):
        z = np.arange(grid.nz)[:, None] * grid.h
        x = np.arange(grid.nx)[None, :] * grid.h
        depth = max((grid.nz - 1) * grid.h, grid.h)
        v = self.v_top + (self.v_bottom - self.v_top) * z / depth + 0.0 * x
        if self.lens_dv:
            r2 = (z - self.lens_z) ** 2 + (x - self.lens_x) ** 2
            v = v + self.lens_dv * np.exp(-r2 / (2 * self.lens_radius**2))
        return v

    def true_model(self, grid):
        return Model.from_velocity(grid, self.velocity(grid), self.v_min, self.v_max)

    def initial_model(self, grid):
        v = self.velocity(grid)
        if self.smoothing > 0:
            v = ndimage.gaussian_filter(v, self.smoothing, mode="nearest")
        return Model.from_velocity(grid, v, self.v_min, self.v_max)


@dataclass(frozen=True)
class AcquisitionSpec:
    receiver_depth: int = 2
    receiver_step: int = 1
    f_min: float = 5.0
    f_max: float = 45.0
    f_step: float = 2.0
    record_duration: float = 4.0
    dt: float = 0.004

    def frequencies_hz(self):
        n = int(np.floor((self.f_max - self.f_min) / self.f_step + 1e-9)) + 1
        return self.f_min + self.f_step * np.arange(n)

    def build(self, grid):
        omegas = 2 * np.pi * self.frequencies_hz()
        return Acquisition.surface_line(
            grid, omegas, self.receiver_depth, self.receiver_step, self.record_duration
        )


@dataclass
class RunConfig:
    grid: Grid
    model: ModelSpec
    acquisition: AcquisitionSpec
    inversion: InversionConfig
    events: list = field(default_factory=list)
    snr_db: float = None
    seed: int = 0
    model0_path: Path = None
    true_model_path: Path = None
    data_path: Path = None
    output_dir: Path = None
    source: Path = None

    def acquisition_for(self, grid=None):
        return self.acquisition.build(self.grid if grid is None else grid)

    def load_true_model(self):
        if self.true_model_path is not None:
            return self._read(self.true_model_path)
        return self.model.true_model(self.grid)

    def load_initial_model(self):
        if self.model0_path is not None:
            return self._read(self.model0_path)
        return self.model.initial_model(self.grid)

    def _read(self, path):
        if not path.exists():
            raise ConfigError(f"model file not found: {path}")
        model = read_model(path, self.grid.pml_width)
        if model.grid.shape != self.grid.shape or model.grid.h != self.grid.h:
            raise ConfigError(f"model file {path} does not match the configured grid")
        return model


_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


def _convert(raw, kind, key):
    raw = raw.strip()
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        if raw.lower() in ("none", ""):
            return None
        return kind(raw)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from exc


def _section(cp, name, cls, types):
    if not cp.has_section(name):
        return {}
    out = {}
    known = {f.name for f in fields(cls)}
    for key, raw in cp.items(name):
        if key not in known:
            raise ConfigError(f"unknown key [{name}] {key}")
        out[key] = _convert(raw, types.get(key, float), f"[{name}] {key}")
    return out


_INV_TYPES = {
    "n_inner": int, "n_outer": int, "update_model": bool, "receiver_mute": int,
    "tv_max_iter": int, "threads": int, "inner_momentum": bool,
    "source_stack": str, "source_normalization": str, "source_spectrum": str, "solver": str,
}


def parse_events(text):
    """``z x f_central t_central`` groups separated by semicolons or newlines."""
    events = []
    for chunk in text.replace("\n", ";").split(";"):
        parts = chunk.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise ConfigError(f"event needs 'z x f_central t_central', got {chunk.strip()!r}")
        try:
            z, x, fc, t0 = (float(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"non-numeric event entry {chunk.strip()!r}") from exc
        events.append(SyntheticEvent(z, x, fc, t0))
    return events


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    base = path.parent
    known = {"paths", "grid", "model", "acquisition", "inversion", "synthesis"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")

    try:
        g = cp["grid"] if cp.has_section("grid") else {}
        grid = Grid(
            int(g.get("nz", 60)), int(g.get("nx", 120)),
            float(g.get("h", 4.0)), int(g.get("pml_width", 20)),
        )
        model = ModelSpec(**_section(cp, "model", ModelSpec, {}))
        acq = AcquisitionSpec(**_section(cp, "acquisition", AcquisitionSpec,
                                         {"receiver_depth": int, "receiver_step": int}))
        inv = InversionConfig(**_section(cp, "inversion", InversionConfig, _INV_TYPES))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if not acq.f_step > 0:
        raise ConfigError("frequency step must be positive")
    if acq.f_min <= 0 or acq.f_max < acq.f_min:
        raise ConfigError("frequency band is empty or non-positive")
    if not 0 <= acq.receiver_depth < grid.nz:
        raise ConfigError("receiver depth lies outside the grid")

    syn = cp["synthesis"] if cp.has_section("synthesis") else {}
    unknown = set(syn) - {"events", "snr_db", "seed"}
    if unknown:
        raise ConfigError(f"unknown keys in [synthesis]: {sorted(unknown)}")
    events = parse_events(syn.get("events", ""))
    for e in events:
        try:
            grid.cell_of(e.z, e.x)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not e.f_central > 0:
            raise ConfigError("event central frequency must be positive")
    snr = _convert(syn.get("snr_db", "none"), float, "[synthesis] snr_db")
    seed = _convert(syn.get("seed", "0"), int, "[synthesis] seed")

    paths = cp["paths"] if cp.has_section("paths") else {}
    unknown = set(paths) - {"model0", "true_model", "data", "output"}
    if unknown:
        raise ConfigError(f"unknown keys in [paths]: {sorted(unknown)}")

    def resolve(key):
        value = paths.get(key)
        return None if value is None or not value.strip() else (base / value.strip())

    return RunConfig(
        grid=grid, model=model, acquisition=acq, inversion=inv, events=events,
        snr_db=snr, seed=seed if seed is not None else 0,
        model0_path=resolve("model0"), true_model_path=resolve("true_model"),
        data_path=resolve("data"), output_dir=resolve("output"), source=path,
    )
