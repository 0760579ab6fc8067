"""
Grid solver for the limiting run-and-tumble model with the averaged kernel Λ̄.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ConfigurationError
from .grid_solver import (
    GridDistribution,
    PhaseGrid,
    SolverConfig,
    check_nonnegative,
    marginal_y,
    ssp_rk2,
    transport_step,
)
from .kernels import LimitKernel
from .signals import SignalSpec, path_derivative


@dataclass(frozen=True, eq=False)
class LimitDistribution:
    values: np.ndarray
    grid: PhaseGrid
    time: float = 0.0

    def __post_init__(self) -> None:
        expected = (self.grid.n_x, self.grid.velocities.size)
        if self.values.shape != expected:
            raise ConfigurationError(
                f"limit distribution shape {self.values.shape} does not match grid {expected}"
            )

    @property
    def mass(self) -> float:
        weights = self.grid.dx * self.grid.velocities.weights[None, :]
        return float(np.sum(self.values * weights))


@dataclass
class LimitRunResult:
    times: np.ndarray
    states: np.ndarray
    outputs: list[list[Any]]
    final: LimitDistribution
    trace: list[str] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class LimitModel:
    signal: SignalSpec
    kernel: LimitKernel
    grid: PhaseGrid

    def __post_init__(self) -> None:
        if self.signal.dim != 1:
            raise ConfigurationError("[signal] the limit solver needs a one-dimensional signal")
        if self.kernel.velocities.size != self.grid.velocities.size:
            raise ConfigurationError("limit kernel and grid use different velocity sets")

    @cached_property
    def out_rate(self) -> np.ndarray:
        return self.grid.velocities.weights @ self.kernel.matrix

    def material_derivative(self, t: float) -> np.ndarray:
        """D_tM(t, x_i, v_k)."""
        grid = self.grid
        return path_derivative(
            self.signal, t, grid.x_centers[:, None], grid.velocities.values[None, :]
        )

    def tumbling_rhs(self, values: np.ndarray, t: float) -> np.ndarray:
        # rate out of each source state (x, v') with kernel argument D_tM(t, x, v')
        rates = (
            self.kernel.spec.base_rate
            * self.kernel.interpolated_response(self.material_derivative(t))
            * values
        )
        weighted = self.kernel.matrix * self.grid.velocities.weights[None, :]
        gain = rates @ weighted.T
        return gain - rates * self.out_rate[None, :]


Hook = Callable[[LimitDistribution], Any]


class LimitSolver:
    def __init__(self, model: LimitModel, config: SolverConfig):
        config.check_grid(model.grid)
        self.model = model
        self.config = config
        self._trace: list[str] = []

    @property
    def trace(self) -> list[str]:
        return list(self._trace)

    def _log(self, message: str) -> None:
        self._trace.append(message)

    def step(self, p: LimitDistribution) -> LimitDistribution:
        cfg = self.config
        grid = self.model.grid
        half = 0.5 * cfg.dt
        values = np.array(p.values, dtype=float)
        speeds = grid.velocities.values

        if cfg.enable_transport:
            values = check_nonnegative(
                transport_step(values, speeds, half, grid.dx, cfg.transport_scheme), "transport"
            )
        if cfg.enable_tumbling:
            t_mid = p.time + half
            values = ssp_rk2(lambda arr: self.model.tumbling_rhs(arr, t_mid), values, cfg.dt)
            values = check_nonnegative(values, "tumbling")
        if cfg.enable_transport:
            values = check_nonnegative(
                transport_step(values, speeds, half, grid.dx, cfg.transport_scheme), "transport"
            )
        return LimitDistribution(values=values, grid=grid, time=p.time + cfg.dt)

    def run(self, p0: LimitDistribution, hooks: Sequence[Hook] = ()) -> LimitRunResult:
        cfg = self.config
        n_steps, every = cfg.n_steps, cfg.output_every
        self._log(
            f"limit run: dt={cfg.dt:g}, steps={n_steps}, scheme={cfg.transport_scheme}, "
            f"kernel={self.model.kernel.spec.response}"
        )
        times: list[float] = []
        states: list[np.ndarray] = []
        outputs: list[list[Any]] = [[] for _ in hooks]

        def emit(state: LimitDistribution) -> None:
            times.append(state.time)
            states.append(state.values.copy())
            for sink, hook in zip(outputs, hooks):
                sink.append(hook(state))

        p = p0
        emit(p)
        for index in range(1, n_steps + 1):
            p = replace(self.step(p), time=index * cfg.dt)
            if index % every == 0 or index == n_steps:
                emit(p)

        self._log(f"limit run finished at t={p.time:g}, mass={p.mass:.15g}")
        return LimitRunResult(
            times=np.asarray(times),
            states=np.asarray(states),
            outputs=outputs,
            final=p,
            trace=self.trace,
        )


def init_limit_from(q0: GridDistribution) -> LimitDistribution:
    """p̄₀ as the y-marginal of a grid datum."""
    return LimitDistribution(values=marginal_y(q0), grid=q0.grid, time=q0.time)


def limit_step(
    p: LimitDistribution,
    config: SolverConfig,
    signal: SignalSpec,
    lk: LimitKernel,
) -> LimitDistribution:
    return LimitSolver(LimitModel(signal, lk, p.grid), config).step(p)


def limit_run(
    p0: LimitDistribution,
    config: SolverConfig,
    signal: SignalSpec,
    lk: LimitKernel,
    hooks: Sequence[Hook] = (),
) -> LimitRunResult:
    return LimitSolver(LimitModel(signal, lk, p0.grid), config).run(p0, hooks)
