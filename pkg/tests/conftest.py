from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import yaml

from chemo_kinetics.grid_solver import PhaseGrid, SolverConfig, SpatialProfile
from chemo_kinetics.kernels import KernelSpec, VelocitySet
from chemo_kinetics.signals import SignalSpec


@pytest.fixture
def small_grid() -> PhaseGrid:
    return PhaseGrid(
        length=10.0,
        n_x=20,
        velocities=VelocitySet.uniform_line(4, 1.0),
        n_y=48,
        y_max=6.0,
    )


@pytest.fixture
def wide_grid() -> PhaseGrid:
    # keeps a centred bump away from both ends for short horizons
    return PhaseGrid(
        length=20.0,
        n_x=40,
        velocities=VelocitySet.uniform_line(4, 1.0),
        n_y=48,
        y_max=6.0,
    )


@pytest.fixture
def fine_y_grid() -> PhaseGrid:
    return PhaseGrid(
        length=1.0,
        n_x=2,
        velocities=VelocitySet.uniform_line(2, 1.0),
        n_y=160,
        y_max=8.0,
    )


@pytest.fixture
def profile() -> SpatialProfile:
    return SpatialProfile(shape="bump", center=5.0, half_width=1.0)


@pytest.fixture
def centred_profile() -> SpatialProfile:
    return SpatialProfile(shape="bump", center=10.0, half_width=1.0)


@pytest.fixture
def linear_signal() -> SignalSpec:
    return SignalSpec.linear(0.5, extent=10.0)


@pytest.fixture
def tanh_kernel() -> KernelSpec:
    return KernelSpec(response="tanh", chi=0.5)


@pytest.fixture
def solver_config() -> SolverConfig:
    return SolverConfig(eps=0.1, dt=0.05, t_end=0.25, output_interval=0.05)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.Philox(12345))


def scenario_mapping(**overrides) -> dict:
    """A scenario small enough for command tests; sections in `overrides` replace defaults."""
    data = {
        "master_seed": 7,
        "signal": {"family": "linear", "dim": 1, "params": {"a": 0.5, "extent": 10.0}},
        "kernel": {"response": "tanh", "chi": 0.5, "base_rate": 1.0, "quadrature_order": 20},
        "grid": {
            "L": 10.0,
            "n_x": 20,
            "K": 4,
            "v_max": 1.0,
            "n_y": 32,
            "y_max": 6.0,
            "profile": {"shape": "bump", "center": 5.0, "half_width": 1.0},
        },
        "solver": {"eps": 0.1, "dt": 0.05, "t_end": 0.2, "output_interval": 0.1},
        "particles": {"N_p": 200, "workers": 2, "t_end": 0.2},
        "sweep": {"eps": [0.2, 0.1, 0.05]},
        "output": {"formats": ["csv", "snapshot"], "plot": False},
    }
    data.update(overrides)
    return data


@pytest.fixture
def write_scenario(tmp_path: Path):
    def write(name: str = "scenario.yaml", **overrides) -> Path:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(scenario_mapping(**overrides), sort_keys=False), encoding="utf-8")
        return path

    return write
