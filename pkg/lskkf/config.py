"""
Experiment configuration
Frozen dataclass sections resolved from a profile plus a strict JSON document,
the SHA-256 digest embedded in every artifact, and builders that turn a resolved
config into model objects.
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError, FieldFormatError
from .fields import Grid, read_sf1
from .model import (
    SAMPLE_TIME,
    SHELL,
    SLAB_THICKNESS,
    SOFT_TISSUE,
    Material,
    MaterialConfig,
    NoiseConfig,
    default_foci,
    gaussian_loads,
    phantom_config,
)

import numpy as np
import psutil

logger = logging.getLogger(__name__)

THREADS_ENV = "LSKKF_THREADS"
PROFILES = ("default", "small", "large")
OBSERVER_TYPES = ("lskkf", "enkf", "romkf", "luenberger")
DEFAULT_SPACING = 0.0025


def _is_count(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


# Sections =====================================================================
@dataclass(frozen=True)
class GridSection:
    shape: tuple[int, ...] = (128, 128)
    spacing: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if len(self.shape) not in (1, 2, 3) or any(not _is_count(n) or n < 1 for n in self.shape):
            raise ConfigError("grid.shape", "1 to 3 positive counts", list(self.shape))
        if self.spacing is not None:
            if len(self.spacing) != len(self.shape) or any(not dx > 0 for dx in self.spacing):
                raise ConfigError("grid.spacing", f"{len(self.shape)} positive lengths in meters", list(self.spacing))

    def resolved_spacing(self) -> tuple[float, ...]:
        return tuple(self.spacing) if self.spacing is not None else tuple(DEFAULT_SPACING for _ in self.shape)


@dataclass(frozen=True)
class MaterialSection:
    name: str
    rho: float
    c: float
    k: float

    def __post_init__(self) -> None:
        if not self.rho > 0 or not self.c > 0 or self.k < 0:
            raise ConfigError(f"materials.{self.name}", "rho > 0, c > 0, k >= 0", (self.rho, self.c, self.k))


@dataclass(frozen=True)
class MaterialsSection:
    soft_tissue: MaterialSection = MaterialSection(SOFT_TISSUE.name, SOFT_TISSUE.rho, SOFT_TISSUE.c, SOFT_TISSUE.k)
    shell: MaterialSection = MaterialSection(SHELL.name, SHELL.rho, SHELL.c, SHELL.k)
    h: float = 10.0

    def __post_init__(self) -> None:
        if self.h < 0:
            raise ConfigError("materials.h", ">= 0", self.h)


@dataclass(frozen=True)
class LayoutSection:
    """``phantom`` generates the two-material phantom; ``labels`` reads an SF1 label file or run-length list."""

    kind: str = "phantom"
    labels_file: str | None = None
    runs: tuple[tuple[int, int], ...] | None = None
    measured_material: int = 0
    slab_thickness: float = SLAB_THICKNESS

    def __post_init__(self) -> None:
        if self.kind not in ("phantom", "labels"):
            raise ConfigError("layout.kind", "'phantom' or 'labels'", self.kind)
        if self.kind == "labels" and (self.labels_file is None) == (self.runs is None):
            raise ConfigError("layout", "exactly one of labels_file or runs for kind 'labels'")
        if self.measured_material not in (0, 1):
            raise ConfigError("layout.measured_material", "0 or 1", self.measured_material)
        if not self.slab_thickness > 0:
            raise ConfigError("layout.slab_thickness", "> 0", self.slab_thickness)


@dataclass(frozen=True)
class LoadSection:
    """Gaussian blobs (normalized centers, width, W per unit input) or one SF1 file per input."""

    kind: str = "blobs"
    centers: tuple[tuple[float, ...], ...] | None = None
    width: float = 0.3
    power: float = 200.0
    files: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("blobs", "files"):
            raise ConfigError("loads.kind", "'blobs' or 'files'", self.kind)
        if self.kind == "files" and not self.files:
            raise ConfigError("loads.files", "one SF1 path per input")
        if not self.width > 0:
            raise ConfigError("loads.width", "> 0", self.width)
        if self.power < 0:
            raise ConfigError("loads.power", ">= 0", self.power)


@dataclass(frozen=True)
class NoiseSection:
    process_std: float = 0.2
    process_sigma: float = 0.0075
    measurement_var: float = 0.05
    r_overrides: tuple[tuple[int, float], ...] = ()
    truth_process_scale: float = 0.25

    def __post_init__(self) -> None:
        for key in ("process_std", "truth_process_scale"):
            if getattr(self, key) < 0:
                raise ConfigError(f"noise.{key}", ">= 0", getattr(self, key))
        for key in ("process_sigma", "measurement_var"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"noise.{key}", "> 0", getattr(self, key))
        for index, var in self.r_overrides:
            if int(index) < 0 or not var > 0:
                raise ConfigError(f"noise.r_overrides.{index}", "a flat index mapped to a variance > 0", var)


@dataclass(frozen=True)
class ModelSection:
    dt: float = SAMPLE_TIME
    steps: int = 17
    snapshot_step: int | None = None

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ConfigError("model.dt", "> 0 seconds", self.dt)
        if not _is_count(self.steps) or self.steps < 2:
            raise ConfigError("model.steps", "an integer >= 2", self.steps)
        snapshot = self.snapshot_step
        if snapshot is not None and not (_is_count(snapshot) and 0 <= snapshot <= self.steps):
            raise ConfigError("model.snapshot_step", f"between 0 and {self.steps}", self.snapshot_step)


OBSERVER_DEFAULTS: dict[str, dict[str, Any]] = {
    "lskkf": {
        "kernel": "masked_gaussian",
        "gamma": None,
        "sigma": None,
        "prior_scale": 1.25,
        "cg_tol": 1e-8,
        "cg_max_iter": 500,
        "warm_start": False,
    },
    "enkf": {"members": 20, "mode": "stochastic"},
    "romkf": {"energy_fraction": 0.999, "snapshot_steps": 20, "p0_scale": 1.0},
    "luenberger": {"samples": 500},
}


@dataclass(frozen=True)
class ObserverSection:
    type: str
    name: str = ""
    params: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self) -> None:
        if self.type not in OBSERVER_TYPES:
            raise ConfigError("observers[].type", f"one of {OBSERVER_TYPES}", self.type)
        allowed = OBSERVER_DEFAULTS[self.type]
        for key, value in self.params:
            if key not in allowed:
                raise ConfigError(f"observers.{self.type}.{key}", f"one of {sorted(allowed)}")
            _check_observer_param(self.type, key, value)
        if not self.name:
            suffix = str(self.param("members")) if self.type == "enkf" else ""
            object.__setattr__(self, "name", f"{self.type}{suffix}")

    def param(self, key: str) -> Any:
        return dict(self.params).get(key, OBSERVER_DEFAULTS[self.type][key])


def _check_observer_param(kind: str, key: str, value: Any) -> None:
    path = f"observers.{kind}.{key}"
    positive = {"gamma", "sigma", "prior_scale", "cg_tol", "p0_scale"}
    if key in positive and value is not None and not (isinstance(value, int | float) and value > 0):
        raise ConfigError(path, "> 0", value)
    if key == "members" and not (_is_count(value) and value >= 2):
        raise ConfigError(path, "an integer >= 2", value)
    if key in ("cg_max_iter", "snapshot_steps") and not (_is_count(value) and value >= 1):
        raise ConfigError(path, "a positive integer", value)
    if key == "samples" and not (_is_count(value) and value >= 2):
        raise ConfigError(path, "an integer >= 2", value)
    if key == "energy_fraction" and not (isinstance(value, int | float) and 0 < value <= 1):
        raise ConfigError(path, "in (0, 1]", value)
    if key == "mode" and value not in ("stochastic", "literal"):
        raise ConfigError(path, "'stochastic' or 'literal'", value)
    if key == "kernel" and value not in ("masked_gaussian", "identity"):
        raise ConfigError(path, "'masked_gaussian' or 'identity'", value)
    if key == "warm_start" and not isinstance(value, bool):
        raise ConfigError(path, "true or false", value)


DEFAULT_OBSERVERS = (
    ObserverSection("lskkf"),
    ObserverSection("enkf", params=(("members", 20),)),
    ObserverSection("enkf", params=(("members", 100),)),
    ObserverSection("romkf"),
    ObserverSection("luenberger"),
)


@dataclass(frozen=True)
class DesignSection:
    """Small model and candidate grid for the kernel fit."""

    shape: tuple[int, ...] = (24, 24)
    gammas: tuple[float, ...] = (0.1, 0.2, 0.4, 0.8)
    sigmas: tuple[float, ...] = (0.0025, 0.005, 0.0075, 0.01, 0.015)
    probes_per_material: int = 8

    def __post_init__(self) -> None:
        if len(self.shape) not in (1, 2, 3) or any(not _is_count(n) or n < 1 for n in self.shape):
            raise ConfigError("design.shape", "1 to 3 positive counts", list(self.shape))
        if not self.gammas or any(not g > 0 for g in self.gammas):
            raise ConfigError("design.gammas", "a non-empty list of positive values", list(self.gammas))
        if not self.sigmas or any(not s > 0 for s in self.sigmas):
            raise ConfigError("design.sigmas", "a non-empty list of positive values", list(self.sigmas))
        if not _is_count(self.probes_per_material) or self.probes_per_material < 1:
            raise ConfigError("design.probes_per_material", "an integer >= 1", self.probes_per_material)


@dataclass(frozen=True)
class BenchSection:
    sizes: tuple[int, ...] = (4096, 16384, 65536, 262144)
    observers: tuple[str, ...] = ("lskkf", "enkf", "luenberger")
    ensemble_sizes: tuple[int, ...] = (5, 10, 20)
    steps: int = 5

    def __post_init__(self) -> None:
        if not self.sizes or any(not _is_count(n) or n < 4 for n in self.sizes) or list(self.sizes) != sorted(self.sizes):
            raise ConfigError("bench.sizes", "ascending state counts >= 4", list(self.sizes))
        for kind in self.observers:
            if kind not in OBSERVER_TYPES:
                raise ConfigError("bench.observers", f"entries from {OBSERVER_TYPES}", kind)
        if any(not _is_count(n) or n < 2 for n in self.ensemble_sizes):
            raise ConfigError("bench.ensemble_sizes", "ensemble sizes >= 2", list(self.ensemble_sizes))
        if not _is_count(self.steps) or self.steps < 5:
            raise ConfigError("bench.steps", "an integer >= 5", self.steps)


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str = "default"
    seed: int = 0
    out_dir: str = "lskkf_out"
    grid: GridSection = GridSection()
    materials: MaterialsSection = MaterialsSection()
    layout: LayoutSection = LayoutSection()
    loads: LoadSection = LoadSection()
    noise: NoiseSection = NoiseSection()
    model: ModelSection = ModelSection()
    observers: tuple[ObserverSection, ...] = DEFAULT_OBSERVERS
    design: DesignSection = DesignSection()
    bench: BenchSection = BenchSection()
    export_trajectory: bool = False

    def __post_init__(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError("profile", f"one of {PROFILES}", self.profile)
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "an unsigned 64-bit integer", self.seed)
        names = [o.name for o in self.observers]
        if len(set(names)) != len(names):
            raise ConfigError("observers", "unique observer names", names)

    @property
    def snapshot_step(self) -> int:
        return self.model.steps if self.model.snapshot_step is None else self.model.snapshot_step


PROFILE_OVERRIDES: dict[str, dict[str, Any]] = {
    "default": {},
    "small": {
        "grid": {"shape": [32, 32]},
        "design": {"shape": [16, 16]},
        "bench": {"sizes": [1024, 4096, 16384]},
    },
    "large": {
        "grid": {"shape": [256, 256, 16]},
        "design": {"shape": [16, 16, 4]},
    },
}


# Strict construction ==========================================================
def _section_from_dict(cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(path, "an object", data)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, f"a known key of '{path or 'config'}'")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        kwargs[key] = _coerce(cls, key, value, sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(path or "config", f"valid values ({e})") from e


def _tuplify(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _coerce(cls: type, key: str, value: Any, path: str) -> Any:
    if cls is ExperimentConfig:
        nested = {
            "grid": GridSection,
            "layout": LayoutSection,
            "loads": LoadSection,
            "model": ModelSection,
            "design": DesignSection,
            "bench": BenchSection,
        }
        if key in nested:
            return _section_from_dict(nested[key], value, path)
        if key == "materials":
            return _materials_from_dict(value, path)
        if key == "noise":
            return _noise_from_dict(value, path)
        if key == "observers":
            return _observers_from_list(value, path)
        if key == "seed" and not _is_count(value):
            raise ConfigError(path, "an integer", value)
        return value
    return _tuplify(value)


def _materials_from_dict(data: Any, path: str) -> MaterialsSection:
    if not isinstance(data, dict):
        raise ConfigError(path, "an object", data)
    kwargs = {}
    for key, value in data.items():
        if key == "h":
            kwargs["h"] = value
        elif key in ("soft_tissue", "shell"):
            base = dataclasses.asdict(getattr(MaterialsSection(), key))
            extra = set(value) - {"rho", "c", "k"} if isinstance(value, dict) else None
            if extra is None or extra:
                raise ConfigError(f"{path}.{key}", "an object with rho, c, k", value)
            base.update(value)
            kwargs[key] = MaterialSection(**base)
        else:
            raise ConfigError(f"{path}.{key}", "one of soft_tissue, shell, h")
    return MaterialsSection(**kwargs)


def _noise_from_dict(data: Any, path: str) -> NoiseSection:
    if isinstance(data, dict) and isinstance(data.get("r_overrides"), dict):
        data = dict(data)
        try:
            data["r_overrides"] = sorted((int(k), float(v)) for k, v in data["r_overrides"].items())
        except ValueError as e:
            raise ConfigError(f"{path}.r_overrides", "flat index keys mapped to variances") from e
    return _section_from_dict(NoiseSection, data, path)


def _observers_from_list(data: Any, path: str) -> tuple[ObserverSection, ...]:
    if not isinstance(data, list) or not data:
        raise ConfigError(path, "a non-empty list of observer objects", data)
    out = []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict) or "type" not in entry:
            raise ConfigError(f"{path}[{i}]", "an object with a 'type'", entry)
        params = {k: v for k, v in entry.items() if k not in ("type", "name")}
        out.append(ObserverSection(entry["type"], entry.get("name", ""), tuple(sorted(params.items()))))
    return tuple(out)


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_config(data: dict, **overrides: Any) -> ExperimentConfig:
    """
    Resolve a raw config document.

    Args:
        data: decoded JSON object.
        **overrides: CLI values (``seed``, ``out_dir``, ``profile``); ``None`` means unset.

    Returns:
        The validated :class:`ExperimentConfig`.
    """
    if not isinstance(data, dict):
        raise ConfigError("config", "a JSON object", type(data).__name__)
    data = dict(data)
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    profile = data.get("profile", "default")
    if profile not in PROFILES:
        raise ConfigError("profile", f"one of {PROFILES}", profile)
    merged = _deep_merge(PROFILE_OVERRIDES[profile], data)
    return _section_from_dict(ExperimentConfig, merged, "")


def parse_config(path: str | Path, **overrides: Any) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError("--config", "an existing JSON file", str(path)) from e
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"valid JSON ({e.msg} at line {e.lineno})", str(path)) from e
    cfg = resolve_config(raw, **overrides)
    logger.info(f"✅ Loaded config {path} (profile {cfg.profile}, digest {config_digest(cfg)[:12]})")
    return cfg


# Serialization ================================================================
def _plain(value: Any) -> Any:
    if isinstance(value, tuple | list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def to_dict(cfg: ExperimentConfig) -> dict:
    """JSON-ready dict that :func:`resolve_config` maps back to ``cfg``."""
    out = _plain(dataclasses.asdict(cfg))
    out["observers"] = [{"type": o.type, "name": o.name, **dict(o.params)} for o in cfg.observers]
    out["materials"] = {
        "soft_tissue": {k: v for k, v in dataclasses.asdict(cfg.materials.soft_tissue).items() if k != "name"},
        "shell": {k: v for k, v in dataclasses.asdict(cfg.materials.shell).items() if k != "name"},
        "h": cfg.materials.h,
    }
    out["noise"]["r_overrides"] = {str(i): v for i, v in cfg.noise.r_overrides}
    return out


def config_digest(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON of everything except the output directory."""
    payload = to_dict(cfg)
    payload.pop("out_dir", None)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# Environment ==================================================================
def resolve_thread_count(env: dict[str, str] | None = None) -> int:
    """Worker threads from ``LSKKF_THREADS``; 0 or unset means the physical core count."""
    env = os.environ if env is None else env
    raw = env.get(THREADS_ENV, "0")
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(THREADS_ENV, "a non-negative integer", raw) from e
    if threads < 0:
        raise ConfigError(THREADS_ENV, "a non-negative integer", raw)
    if threads == 0:
        threads = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    return threads


# Builders =====================================================================
def _labels_from_runs(runs: tuple[tuple[int, int], ...], size: int) -> np.ndarray:
    labels = np.concatenate([np.full(int(count), int(material)) for material, count in runs]) if runs else np.array([])
    if labels.size != size:
        raise ConfigError("layout.runs", f"run lengths summing to {size} cells", int(labels.size))
    return labels


def build_material_config(cfg: ExperimentConfig, shape: tuple[int, ...] | None = None) -> MaterialConfig:
    """Materials, labels and heat loads for the configured grid (or ``shape`` at the same spacing)."""
    shape = tuple(shape) if shape is not None else tuple(cfg.grid.shape)
    spacing = cfg.grid.resolved_spacing()
    spacing = spacing[: len(shape)] + (spacing[-1],) * (len(shape) - len(spacing))
    m = cfg.materials
    soft = Material(m.soft_tissue.name, m.soft_tissue.rho, m.soft_tissue.c, m.soft_tissue.k)
    shell = Material(m.shell.name, m.shell.rho, m.shell.c, m.shell.k)
    layout, loads_cfg = cfg.layout, cfg.loads

    if layout.kind == "phantom" and loads_cfg.kind == "blobs" and loads_cfg.centers is None:
        return phantom_config(
            shape,
            spacing,
            h=m.h,
            load_power=loads_cfg.power,
            load_width=loads_cfg.width,
            slab_thickness=layout.slab_thickness,
            soft_tissue=soft,
            shell=shell,
        )

    grid = Grid(shape, spacing)
    if layout.kind == "phantom":
        labels = phantom_config(shape, spacing).labels
    elif layout.labels_file is not None:
        label_field = read_sf1(layout.labels_file)
        if label_field.shape != grid.shape:
            raise ConfigError("layout.labels_file", f"a label field of shape {grid.shape}", label_field.shape)
        labels = np.rint(label_field.values).astype(np.int64)
    else:
        labels = _labels_from_runs(layout.runs, grid.size)
    if np.any((labels != 0) & (labels != 1)):
        raise ConfigError("layout", "labels 0 (soft tissue) or 1 (shell) on every cell")
    support = labels == layout.measured_material

    if loads_cfg.kind == "files":
        columns = []
        for i, name in enumerate(loads_cfg.files):
            try:
                fld = read_sf1(name)
            except (OSError, FieldFormatError) as e:
                raise ConfigError(f"loads.files[{i}]", "a readable SF1 field", name) from e
            if fld.shape != grid.shape:
                raise ConfigError(f"loads.files[{i}]", f"a field of shape {grid.shape}", fld.shape)
            columns.append(fld.values)
        loads = np.stack(columns, axis=1)
        foci = [int(np.argmax(np.where(support, c, -np.inf))) for c in columns]
    else:
        centers = [tuple(c) for c in loads_cfg.centers] if loads_cfg.centers is not None else default_foci(grid.ndim)
        loads, foci = gaussian_loads(grid, support, centers, loads_cfg.width, loads_cfg.power, layout.slab_thickness)

    return MaterialConfig(
        grid=grid,
        materials=(soft, shell),
        labels=labels,
        loads=loads,
        h=m.h,
        measured_material=layout.measured_material,
        slab_thickness=layout.slab_thickness,
        foci=tuple(foci),
    )


def build_noise_config(cfg: ExperimentConfig) -> NoiseConfig:
    n = cfg.noise
    return NoiseConfig(
        process_std=n.process_std,
        process_sigma=n.process_sigma,
        measurement_var=n.measurement_var,
        r_overrides=tuple((int(i), float(v)) for i, v in n.r_overrides),
        truth_process_scale=n.truth_process_scale,
    )


def with_observer_params(cfg: ExperimentConfig, name: str, **params: Any) -> ExperimentConfig:
    """Copy of ``cfg`` with ``params`` set on the observer called ``name``."""
    observers = []
    for obs in cfg.observers:
        if obs.name == name:
            merged = dict(obs.params)
            merged.update(params)
            obs = ObserverSection(obs.type, obs.name, tuple(sorted(merged.items())))
        observers.append(obs)
    return dataclasses.replace(cfg, observers=tuple(observers))


def observer_section(cfg: ExperimentConfig, kind: str) -> ObserverSection | None:
    return next((o for o in cfg.observers if o.type == kind), None)

