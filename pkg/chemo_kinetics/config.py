"""
Scenario files, environment defaults and run manifests.
"""

from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .errors import ConfigurationError
from .grid_solver import KineticModel, PhaseGrid, SolverConfig, SpatialProfile
from .kernels import KernelSpec, LimitKernel
from .particle_sim import ParticleConfig
from .signals import EVAL_MODES, AdaptedSignalState, SignalSpec
from .version import __version__


DEFAULT_SCENARIO = Path(__file__).with_name("scenarios") / "default.yaml"
REQUIRED_SECTIONS = ("signal", "kernel", "grid", "solver")
OPTIONAL_SECTIONS = ("particles", "sweep", "output")
OUTPUT_FORMATS = ("csv", "snapshot")

ENV_OUT_DIR = "CKIN_OUT_DIR"
ENV_JOBS = "CKIN_JOBS"
ENV_SEED = "CKIN_SEED"


@dataclass(frozen=True)
class OutputConfig:
    directory: Path = Path("out")
    formats: tuple[str, ...] = OUTPUT_FORMATS
    plot: bool = True

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "OutputConfig":
        formats = tuple(str(item).strip().lower() for item in data.get("formats", OUTPUT_FORMATS))
        unknown = [item for item in formats if item not in OUTPUT_FORMATS]
        if unknown:
            raise ConfigurationError(f"[output] unknown formats: {', '.join(unknown)}")
        return cls(
            directory=Path(str(data.get("directory", "out"))),
            formats=formats,
            plot=bool(data.get("plot", True)),
        )


@dataclass(frozen=True)
class ScenarioConfig:
    signal: SignalSpec
    kernel: KernelSpec
    grid: PhaseGrid
    profile: SpatialProfile
    solver: SolverConfig
    particles: ParticleConfig
    particle_t_end: float
    sweep: tuple[float, ...]
    output: OutputConfig
    master_seed: int
    signal_mode: str = "closed_form"
    quadrature_order: int = 80
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def eps(self) -> float:
        return self.solver.eps

    def adapted_state(self, eps: Optional[float] = None) -> AdaptedSignalState:
        return AdaptedSignalState(eps=self.eps if eps is None else eps, mode=self.signal_mode)

    def solver_config(self, eps: Optional[float] = None) -> SolverConfig:
        return self.solver if eps is None else self.solver.with_eps(eps)

    def kinetic_model(self, eps: Optional[float] = None) -> KineticModel:
        return KineticModel(
            signal=self.signal,
            kernel=self.kernel,
            grid=self.grid,
            state=self.adapted_state(eps),
        )

    def limit_kernel(self) -> LimitKernel:
        return LimitKernel(self.kernel, self.grid.velocities, quadrature_order=self.quadrature_order)

    def config_hash(self, seed: Optional[int] = None) -> str:
        """SHA-256 of the sorted-key YAML dump plus the effective seed."""
        effective = self.master_seed if seed is None else seed
        canonical = yaml.safe_dump(self.raw, sort_keys=True)
        return hashlib.sha256(f"{canonical}\nseed={effective}\n".encode("utf-8")).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    command: str
    version: str = __version__
    started: str = field(default_factory=lambda: _now())
    finished: Optional[str] = None
    outputs: list[str] = field(default_factory=list)
    seeds: dict[str, int] = field(default_factory=dict)

    def add_output(self, path: Path) -> None:
        self.outputs.append(str(path))

    def finish(self) -> None:
        self.finished = _now()

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "command": self.command,
            "config_hash": self.config_hash,
            "artifact_version": self.version,
            "started": self.started,
            "finished": self.finished,
            "seed": self.seed,
            "seed_ledger": dict(self.seeds),
            "outputs": list(self.outputs),
        }
        path.write_text(yaml.safe_dump(payload, sort_keys=False), encoding="utf-8")
        return path


def load_scenario(path: Optional[Path] = None) -> ScenarioConfig:
    """Merge a scenario file over the shipped defaults and validate every section."""
    defaults = _read_yaml(DEFAULT_SCENARIO)
    if path is None:
        return build_scenario(defaults)
    user = _read_yaml(Path(path))
    missing = [name for name in REQUIRED_SECTIONS if name not in user]
    if missing:
        raise ConfigurationError(f"{path}: missing section(s) {', '.join(f'[{m}]' for m in missing)}")
    unknown = [name for name in user if name not in REQUIRED_SECTIONS + OPTIONAL_SECTIONS + ("master_seed",)]
    if unknown:
        raise ConfigurationError(f"{path}: unknown section(s) {', '.join(unknown)}")
    return build_scenario(_merge(defaults, user))


def build_scenario(data: Mapping[str, Any]) -> ScenarioConfig:
    merged = copy.deepcopy(dict(data))
    for name in REQUIRED_SECTIONS:
        if not isinstance(merged.get(name), Mapping):
            raise ConfigurationError(f"[{name}] section is missing or not a mapping")

    signal = SignalSpec.from_mapping(merged["signal"])
    kernel_section = merged["kernel"]
    kernel = KernelSpec.from_mapping(kernel_section)
    grid_section = merged["grid"]
    grid = PhaseGrid.from_mapping(grid_section)
    profile = SpatialProfile.from_mapping(grid_section.get("profile") or {})

    solver_section = merged["solver"]
    solver = SolverConfig.from_mapping(solver_section)
    solver.check_grid(grid)
    signal_mode = str(solver_section.get("signal_mode", "closed_form")).strip().lower()
    if signal_mode not in EVAL_MODES:
        raise ConfigurationError(
            f"[solver] unknown signal_mode '{signal_mode}'; expected one of {', '.join(EVAL_MODES)}"
        )

    particle_section = merged.get("particles") or {}
    particles = ParticleConfig.from_mapping(particle_section)
    sweep = _sweep_values(merged.get("sweep") or {})
    output = OutputConfig.from_mapping(merged.get("output") or {})
    try:
        master_seed = int(merged.get("master_seed", 0))
        quadrature_order = int(kernel_section.get("quadrature_order", 80))
        particle_t_end = float(particle_section.get("t_end", 1.0))
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid value: {exc}") from exc
    if master_seed < 0:
        raise ConfigurationError("master_seed must be >= 0")

    return ScenarioConfig(
        signal=signal,
        kernel=kernel,
        grid=grid,
        profile=profile,
        solver=solver,
        particles=particles,
        particle_t_end=particle_t_end,
        sweep=sweep,
        output=output,
        master_seed=master_seed,
        signal_mode=signal_mode,
        quadrature_order=quadrature_order,
        raw=merged,
    )


def env_defaults() -> dict[str, Any]:
    """CKIN_OUT_DIR, CKIN_JOBS and CKIN_SEED, parsed; unset variables are omitted."""
    values: dict[str, Any] = {}
    out_dir = os.getenv(ENV_OUT_DIR)
    if out_dir:
        values["out"] = Path(out_dir)
    for name, key in ((ENV_JOBS, "jobs"), (ENV_SEED, "seed")):
        raw = os.getenv(name)
        if raw:
            try:
                values[key] = int(raw)
            except ValueError as exc:
                raise ConfigurationError(f"{name} must be an integer, got '{raw}'") from exc
    return values


def _sweep_values(section: Mapping[str, Any]) -> tuple[float, ...]:
    raw = section.get("eps", [])
    try:
        values = tuple(float(eps) for eps in raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[sweep] invalid eps list: {exc}") from exc
    if any(not eps > 0 for eps in values):
        raise ConfigurationError("[sweep] eps values must be > 0")
    if any(a <= b for a, b in zip(values, values[1:])):
        raise ConfigurationError("[sweep] eps values must be strictly descending")
    return values


def _merge(base: Mapping[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    merged = copy.deepcopy(dict(base))
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _read_yaml(path: Path) -> dict[str, Any]:
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigurationError(f"scenario file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping of sections")
    return data


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
