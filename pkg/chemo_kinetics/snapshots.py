"""
Binary snapshots of grid states and particle checkpoints, each with a YAML sidecar.

Grid snapshot layout (little-endian):
    8 bytes   magic b"CKSNAP01"
    u64       ndim (2 for limit states, 3 for grid states)
    u64 × ndim dims
    f8 × 5    L, v_max, y_max, time, eps
    f8 × ∏dims values in C order

Ensemble checkpoint layout (little-endian):
    8 bytes   magic b"CKENS001"
    u64 × 4   N_p, d, master seed, workers
    f8 × 3    time, eps, noise exponent
    records   x[d] f8, v_index i8, m f8, next_candidate f8, last_tumble f8
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Union

import numpy as np
import yaml

from .errors import ConfigurationError
from .grid_solver import GridDistribution, PhaseGrid
from .kernels import VelocitySet
from .limit_solver import LimitDistribution
from .particle_sim import CSV_LIMIT, ParticleEnsemble


SNAPSHOT_MAGIC = b"CKSNAP01"
ENSEMBLE_MAGIC = b"CKENS001"

Distribution = Union[GridDistribution, LimitDistribution]


@dataclass(frozen=True)
class Snapshot:
    values: np.ndarray
    time: float
    eps: float
    grid: PhaseGrid

    def distribution(self) -> Distribution:
        if self.values.ndim == 3:
            return GridDistribution(values=self.values, grid=self.grid, time=self.time)
        return LimitDistribution(values=self.values, grid=self.grid, time=self.time)


def write_snapshot(dist: Distribution, path: Path, *, eps: float) -> tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = dist.grid
    values = np.ascontiguousarray(dist.values, dtype="<f8")
    header = (
        SNAPSHOT_MAGIC
        + np.array([values.ndim, *values.shape], dtype="<u8").tobytes()
        + np.array(
            [grid.length, grid.velocities.v_max, grid.y_max, dist.time, eps], dtype="<f8"
        ).tobytes()
    )
    path.write_bytes(header + values.tobytes())

    meta = {
        "format": SNAPSHOT_MAGIC.decode("ascii"),
        "byte_order": "little",
        "dtype": "float64",
        "kind": "grid" if values.ndim == 3 else "limit",
        "shape": list(values.shape),
        "axes": ["x", "v", "y"][: values.ndim],
        "time": float(dist.time),
        "eps": float(eps),
        "grid": grid.to_mapping(),
        "velocity_nodes": grid.velocities.values.tolist(),
        "velocity_weights": grid.velocities.weights.tolist(),
    }
    meta_path = _sidecar(path)
    meta_path.write_text(yaml.safe_dump(meta, sort_keys=False), encoding="utf-8")
    return path, meta_path


def read_snapshot(path: Path) -> Snapshot:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != SNAPSHOT_MAGIC:
        raise ConfigurationError(f"{path} is not a grid snapshot")
    ndim = int(np.frombuffer(data, dtype="<u8", count=1, offset=8)[0])
    if ndim not in (2, 3):
        raise ConfigurationError(f"{path}: unsupported tensor rank {ndim}")
    offset = 16
    dims = tuple(int(d) for d in np.frombuffer(data, dtype="<u8", count=ndim, offset=offset))
    offset += 8 * ndim
    length, _v_max, y_max, time, eps = np.frombuffer(data, dtype="<f8", count=5, offset=offset)
    offset += 40
    expected = int(np.prod(dims))
    if len(data) - offset != 8 * expected:
        raise ConfigurationError(f"{path}: payload size does not match the header")
    values = np.frombuffer(data, dtype="<f8", count=expected, offset=offset).reshape(dims).copy()

    meta = _read_sidecar(path)
    velocities = VelocitySet(
        nodes=np.asarray(meta["velocity_nodes"], dtype=float),
        weights=np.asarray(meta["velocity_weights"], dtype=float),
    )
    grid = PhaseGrid(
        length=float(length),
        n_x=dims[0],
        velocities=velocities,
        n_y=int(meta["grid"]["n_y"]),
        y_max=float(y_max),
    )
    return Snapshot(values=values, time=float(time), eps=float(eps), grid=grid)


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype(
        [
            ("x", "<f8", (dim,)),
            ("v_index", "<i8"),
            ("m", "<f8"),
            ("next_candidate", "<f8"),
            ("last_tumble", "<f8"),
        ]
    )


def write_checkpoint(ens: ParticleEnsemble, path: Path) -> tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = np.empty(ens.count, dtype=_record_dtype(ens.dim))
    records["x"] = ens.x.reshape(ens.count, ens.dim)
    records["v_index"] = ens.v_index
    records["m"] = ens.m
    records["next_candidate"] = ens.next_candidate
    records["last_tumble"] = ens.last_tumble
    header = (
        ENSEMBLE_MAGIC
        + np.array([ens.count, ens.dim, ens.master_seed, ens.workers], dtype="<u8").tobytes()
        + np.array([ens.time, ens.eps, ens.noise_exponent], dtype="<f8").tobytes()
    )
    path.write_bytes(header + records.tobytes())

    meta = {
        "format": ENSEMBLE_MAGIC.decode("ascii"),
        "byte_order": "little",
        "N_p": ens.count,
        "dim": ens.dim,
        "time": ens.time,
        "eps": ens.eps,
        "master_seed": ens.master_seed,
        "tumbles": ens.tumbles,
        "velocity_nodes": ens.velocities.nodes.tolist(),
        "velocity_weights": ens.velocities.weights.tolist(),
        "streams": [_plain(stream.bit_generator.state) for stream in ens.streams],
    }
    meta_path = _sidecar(path)
    meta_path.write_text(yaml.safe_dump(meta, sort_keys=False), encoding="utf-8")
    return path, meta_path


def read_checkpoint(path: Path) -> ParticleEnsemble:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != ENSEMBLE_MAGIC:
        raise ConfigurationError(f"{path} is not an ensemble checkpoint")
    count, dim, seed, workers = (int(v) for v in np.frombuffer(data, dtype="<u8", count=4, offset=8))
    time, eps, noise_exponent = np.frombuffer(data, dtype="<f8", count=3, offset=40)
    records = np.frombuffer(data, dtype=_record_dtype(dim), count=count, offset=64)

    meta = _read_sidecar(path)
    states = meta.get("streams") or []
    if len(states) != workers:
        raise ConfigurationError(f"{path}: sidecar lists {len(states)} streams, header {workers}")
    streams = []
    for state in states:
        generator = np.random.Generator(np.random.Philox(0))
        generator.bit_generator.state = _restore_state(state)
        streams.append(generator)

    velocities = VelocitySet(
        nodes=np.asarray(meta["velocity_nodes"], dtype=float),
        weights=np.asarray(meta["velocity_weights"], dtype=float),
    )
    x = records["x"].copy()
    ens = ParticleEnsemble(
        x[:, 0] if dim == 1 else x,
        records["v_index"].copy(),
        records["m"].copy(),
        velocities,
        eps=float(eps),
        master_seed=seed,
        streams=streams,
        time=float(time),
        noise_exponent=float(noise_exponent),
        next_candidate=records["next_candidate"].copy(),
        last_tumble=records["last_tumble"].copy(),
    )
    ens.tumbles = int(meta.get("tumbles", 0))
    return ens


def write_particles_csv(ens: ParticleEnsemble, path: Path) -> Path:
    """Per-particle state; refused above 10⁴ particles."""
    if ens.count > CSV_LIMIT:
        raise ConfigurationError(f"CSV export is limited to {CSV_LIMIT} particles, got {ens.count}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    position_cols = ["x"] if ens.dim == 1 else [f"x{i + 1}" for i in range(ens.dim)]
    x = ens.x.reshape(ens.count, ens.dim)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["index", *position_cols, "v_index", "m"])
        for index in range(ens.count):
            writer.writerow(
                [index, *(repr(float(c)) for c in x[index]), int(ens.v_index[index]), repr(float(ens.m[index]))]
            )
    return path


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".yaml")


def _read_sidecar(path: Path) -> dict[str, Any]:
    meta_path = _sidecar(path)
    try:
        meta = yaml.safe_load(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigurationError(f"missing metadata sidecar {meta_path}") from exc
    if not isinstance(meta, dict):
        raise ConfigurationError(f"{meta_path}: metadata must be a mapping")
    return meta


def _plain(value: Any) -> Any:
    """Bit-generator state as YAML-safe builtins."""
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, np.ndarray):
        return {"uint64": [int(v) for v in value.ravel()]}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _restore_state(value: Any) -> Any:
    if isinstance(value, dict):
        if set(value) == {"uint64"}:
            return np.array(value["uint64"], dtype=np.uint64)
        return {key: _restore_state(item) for key, item in value.items()}
    return value
