from __future__ import annotations

import numpy as np
import pytest

from chemo_kinetics.diagnostics import limit_record
from chemo_kinetics.errors import ConfigurationError
from chemo_kinetics.grid_solver import (
    GridSolver,
    KineticModel,
    SolverConfig,
    init_well_prepared,
    marginal_y,
)
from chemo_kinetics.kernels import KernelSpec, LimitKernel, VelocitySet
from chemo_kinetics.limit_solver import (
    LimitDistribution,
    LimitModel,
    LimitSolver,
    init_limit_from,
    limit_run,
)
from chemo_kinetics.signals import AdaptedSignalState, SignalSpec


@pytest.fixture
def tanh_limit_kernel(tanh_kernel) -> LimitKernel:
    return LimitKernel(tanh_kernel, VelocitySet.uniform_line(4, 1.0), quadrature_order=20)


def weighted_l1(a: np.ndarray, b: np.ndarray, grid) -> float:
    return float(np.sum(np.abs(a - b) * grid.dx * grid.velocities.weights[None, :]))


def test_init_limit_from_takes_the_y_marginal(small_grid, linear_signal, profile):
    q0 = init_well_prepared(small_grid, linear_signal, 0.1, profile, t_end=1.0)
    p0 = init_limit_from(q0)
    np.testing.assert_array_equal(p0.values, marginal_y(q0))
    assert p0.mass == pytest.approx(1.0, abs=1e-14)


def test_shape_must_match_grid(small_grid):
    with pytest.raises(ConfigurationError):
        LimitDistribution(values=np.zeros((3, 4)), grid=small_grid)


def test_kernel_and_grid_velocity_sets_must_agree(small_grid, linear_signal, tanh_kernel):
    lk = LimitKernel(tanh_kernel, VelocitySet.uniform_line(6, 1.0), quadrature_order=20)
    with pytest.raises(ConfigurationError):
        LimitModel(linear_signal, lk, small_grid)


@pytest.mark.parametrize("scheme", ["upwind1", "muscl"])
def test_limit_run_conserves_mass(wide_grid, linear_signal, centred_profile, tanh_limit_kernel, scheme):
    p0 = init_limit_from(init_well_prepared(wide_grid, linear_signal, 0.1, centred_profile, t_end=1.0))
    config = SolverConfig(eps=0.1, dt=0.05, t_end=0.3, output_interval=0.1, transport_scheme=scheme)
    result = limit_run(p0, config, linear_signal, tanh_limit_kernel, hooks=(lambda p: p.mass,))
    np.testing.assert_allclose(result.outputs[0], 1.0, rtol=0.0, atol=1e-12)
    assert result.states.shape == (4, wide_grid.n_x, 4)
    assert result.final.values.min() >= 0.0


@pytest.mark.parametrize("seed", [11, 29])
def test_upwind_limit_run_is_an_l1_contraction(small_grid, linear_signal, profile, tanh_limit_kernel, seed):
    rng = np.random.Generator(np.random.Philox(seed))
    base = init_limit_from(init_well_prepared(small_grid, linear_signal, 0.1, profile, t_end=1.0))
    p0, other = (
        LimitDistribution(values=base.values * rng.uniform(0.5, 1.5, size=base.values.shape), grid=small_grid)
        for _ in range(2)
    )
    config = SolverConfig(
        eps=0.1, dt=0.05, t_end=1.0, output_interval=0.5, transport_scheme="upwind1"
    )
    start = weighted_l1(p0.values, other.values, small_grid)
    first = limit_run(p0, config, linear_signal, tanh_limit_kernel)
    second = limit_run(other, config, linear_signal, tanh_limit_kernel)
    gaps = [
        weighted_l1(a, b, small_grid) for a, b in zip(first.states, second.states)
    ]
    assert gaps[0] == pytest.approx(start)
    assert all(later <= earlier * (1.0 + 1e-12) for earlier, later in zip(gaps, gaps[1:]))


def test_limit_tumbling_substep_is_second_order(small_grid, linear_signal, tanh_limit_kernel, rng):
    # D_tM = a·v does not depend on time for a linear signal
    model = LimitModel(linear_signal, tanh_limit_kernel, small_grid)
    start = LimitDistribution(values=rng.uniform(0.5, 1.5, size=(small_grid.n_x, 4)), grid=small_grid)

    def final(dt: float) -> np.ndarray:
        config = SolverConfig(eps=0.1, dt=dt, t_end=1.0, output_interval=1.0, enable_transport=False)
        return LimitSolver(model, config).run(start).final.values

    reference = final(1.0 / 320)
    errors = [np.max(np.abs(final(dt) - reference)) for dt in (0.1, 0.05, 0.025)]
    orders = np.log2(np.asarray(errors[:-1]) / np.asarray(errors[1:]))
    assert np.all(orders >= 1.7)


def test_flat_kernel_grid_marginal_equals_limit(wide_grid, centred_profile, solver_config):
    signal = SignalSpec.constant(1.0)
    kernel = KernelSpec()
    q0 = init_well_prepared(wide_grid, signal, 0.1, centred_profile, t_end=solver_config.t_end)
    model = KineticModel(signal, kernel, wide_grid, AdaptedSignalState(eps=0.1))
    grid_result = GridSolver(model, solver_config).run(q0)

    lk = LimitKernel(kernel, wide_grid.velocities, quadrature_order=20)
    limit_result = limit_run(init_limit_from(q0), solver_config, signal, lk)
    np.testing.assert_allclose(limit_result.times, grid_result.times)
    np.testing.assert_allclose(limit_result.states, grid_result.marginals, rtol=0.0, atol=1e-12)
    assert any("limit run finished" in line for line in limit_result.trace)


def test_limit_population_drifts_up_the_gradient(wide_grid, centred_profile, tanh_limit_kernel):
    signal = SignalSpec.linear(0.5, extent=20.0)
    p0 = init_limit_from(init_well_prepared(wide_grid, signal, 0.1, centred_profile, t_end=3.0))
    config = SolverConfig(eps=0.1, dt=0.05, t_end=3.0, output_interval=0.5)
    result = limit_run(p0, config, signal, tanh_limit_kernel, hooks=(limit_record,))
    records = result.outputs[0]
    x1 = np.array([r.moment_x1 for r in records])
    assert x1[0] == pytest.approx(10.0, abs=1e-9)
    assert np.all(np.diff(x1) > 0.0)
    v_max_sq = wide_grid.velocities.v_max ** 2
    assert all(r.moment_v2 <= v_max_sq * r.mass + 1e-12 for r in records)
