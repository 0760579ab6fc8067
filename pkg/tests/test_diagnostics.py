from __future__ import annotations

import math

import numpy as np
import pytest
import yaml

from chemo_kinetics.diagnostics import (
    CSV_COLUMNS,
    DiagnosticsRecord,
    attach_limit_gap,
    check_csiszar_kullback,
    compute_record,
    csv_kind,
    fisher_information,
    fit_rate,
    initial_data_report,
    l1_to_maxwellian,
    limit_record,
    moment_bound_report,
    original_l1_gap,
    read_limit_csv,
    read_records_csv,
    read_sweep_csv,
    relative_entropy,
    theorem_envelopes,
    theorem_lhs,
    to_original_variables,
    tumbling_y2,
    write_limit_csv,
    write_rate_fit,
    write_records_csv,
    write_sweep_csv,
)
from chemo_kinetics.errors import ConfigurationError, CorruptedStateError, DomainError
from chemo_kinetics.grid_solver import (
    GridDistribution,
    GridSolver,
    KineticModel,
    PhaseGrid,
    SolverConfig,
    SpatialProfile,
    init_well_prepared,
    marginal_y,
)
from chemo_kinetics.kernels import KernelSpec, VelocitySet
from chemo_kinetics.limit_solver import init_limit_from
from chemo_kinetics.signals import AdaptedSignalState, SignalSpec


SWEEP_EPS = (0.2, 0.1, 0.05, 0.025)


def shifted_gaussian(grid, shift: float) -> GridDistribution:
    """Unit-mass datum, uniform in (x, v), a discrete Gaussian centred at `shift` in y."""
    column = np.exp(-0.5 * (grid.y_centers - shift) ** 2)
    column /= column.sum() * grid.dy
    values = np.broadcast_to(
        column / (grid.length * grid.velocities.measure),
        (grid.n_x, grid.velocities.size, grid.n_y),
    ).copy()
    return GridDistribution(values=values, grid=grid)


def record(t: float, **fields) -> DiagnosticsRecord:
    base = dict(
        t=t,
        mass=1.0,
        moment_v2=0.5,
        moment_x1=5.0,
        moment_y2=1.0,
        entropy=0.0,
        fisher=0.0,
        l1_to_maxwellian=0.0,
    )
    base.update(fields)
    return DiagnosticsRecord(**base)


def test_equilibrium_has_vanishing_functionals(small_grid, linear_signal, profile):
    q0 = init_well_prepared(small_grid, linear_signal, 0.1, profile, t_end=1.0)
    assert fisher_information(q0) < 1e-20
    assert l1_to_maxwellian(q0) < 1e-14
    assert abs(relative_entropy(q0)) < 1e-14
    report = check_csiszar_kullback(q0)
    assert report.chain_ok


def test_shifted_gaussian_matches_closed_forms(fine_y_grid):
    q = shifted_gaussian(fine_y_grid, 0.5)
    # KL = s²/2 and I = s² for a Gaussian shifted by s
    assert relative_entropy(q) == pytest.approx(0.125, abs=1e-8)
    assert fisher_information(q) == pytest.approx(0.25, rel=1e-3)
    assert l1_to_maxwellian(q) ** 2 <= 0.25


@pytest.mark.parametrize("shift", [-1.5, -0.5, 0.05, 0.25, 1.0, 1.5])
def test_chain_holds_for_shifted_gaussians(fine_y_grid, shift):
    report = check_csiszar_kullback(shifted_gaussian(fine_y_grid, shift))
    assert report.chain_ok
    assert report.l1_sq <= 2.0 * report.kl <= report.fisher


def test_chain_holds_for_random_perturbations(fine_y_grid, rng):
    base = shifted_gaussian(fine_y_grid, 0.0)
    for _ in range(1000):
        amplitude = rng.uniform(0.0, 0.9)
        noise = rng.uniform(-1.0, 1.0, size=base.values.shape)
        values = base.values * (1.0 + amplitude * noise)
        values /= np.sum(values * fine_y_grid.cell_weights)
        report = check_csiszar_kullback(GridDistribution(values=values, grid=fine_y_grid))
        assert report.chain_ok


def test_chain_needs_unit_mass(fine_y_grid):
    q = shifted_gaussian(fine_y_grid, 0.0)
    with pytest.raises(DomainError):
        check_csiszar_kullback(GridDistribution(values=2.0 * q.values, grid=fine_y_grid))


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_state_is_reported(small_grid, linear_signal, profile, bad):
    q0 = init_well_prepared(small_grid, linear_signal, 0.1, profile, t_end=1.0)
    values = q0.values.copy()
    values[3, 1, 7] = bad
    with pytest.raises(CorruptedStateError):
        compute_record(GridDistribution(values=values, grid=small_grid))


def test_record_of_well_prepared_datum(small_grid, linear_signal, profile):
    q0 = init_well_prepared(small_grid, linear_signal, 0.1, profile, t_end=1.0)
    p0 = init_limit_from(q0)
    rec = compute_record(q0, p_ref=p0)
    assert rec.mass == pytest.approx(1.0, abs=1e-14)
    assert rec.moment_x1 == pytest.approx(5.0, abs=1e-6)
    assert rec.moment_y2 == pytest.approx(1.0, abs=1e-6)
    assert rec.l1_to_limit == pytest.approx(0.0, abs=1e-15)
    assert rec.tumbling_y2 == 0.0


def test_flat_constant_tumbling_leaves_y_moment_alone(small_grid, profile):
    signal = SignalSpec.constant(1.0)
    model = KineticModel(signal, KernelSpec(), small_grid, AdaptedSignalState(eps=0.1))
    q0 = init_well_prepared(small_grid, signal, 0.1, profile, t_end=1.0)
    assert tumbling_y2(q0, model) == pytest.approx(0.0, abs=1e-12)


def test_fit_recovers_exact_power_laws():
    eps = np.array(SWEEP_EPS)
    half = fit_rate(eps, np.sqrt(eps))
    assert half.slope == pytest.approx(0.5, abs=1e-12)
    assert half.r_squared == pytest.approx(1.0, abs=1e-12)
    linear = fit_rate(eps, eps)
    assert linear.slope == pytest.approx(1.0, abs=1e-12)


def test_fit_is_invariant_under_error_scaling():
    eps = np.array(SWEEP_EPS)
    errors = np.array([0.9, 0.61, 0.47, 0.30])
    base = fit_rate(eps, errors)
    scaled = fit_rate(eps, 7.0 * errors)
    assert scaled.slope == pytest.approx(base.slope, abs=1e-12)
    assert scaled.intercept == pytest.approx(base.intercept + math.log(7.0), abs=1e-12)


def test_logarithmic_factor_flattens_the_apparent_rate():
    eps = np.array(SWEEP_EPS)
    errors = np.sqrt(eps) * (1.0 + np.sqrt(np.abs(np.log(eps))))
    assert 0.35 <= fit_rate(eps, errors).slope <= 0.42


@pytest.mark.parametrize(
    "eps, errors, error",
    [
        ((0.2, 0.1), (1.0, 0.5), ConfigurationError),
        ((0.2, 0.15, 0.1), (1.0, 0.8, 0.5), ConfigurationError),
        ((0.2, 0.1, 0.0), (1.0, 0.5, 0.2), DomainError),
        ((0.2, 0.1, 0.05), (1.0, 0.0, 0.2), DomainError),
        ((0.2, 0.1, 0.05), (1.0, 0.5), ConfigurationError),
    ],
    ids=["too-few", "narrow-span", "zero-eps", "zero-error", "length-mismatch"],
)
def test_fit_rejects_unusable_sweeps(eps, errors, error):
    with pytest.raises(error):
        fit_rate(eps, errors)


def test_rate_fit_yaml(tmp_path):
    eps = np.array(SWEEP_EPS)
    path = write_rate_fit(fit_rate(eps, eps), tmp_path / "fit.yaml", label="pointwise_l1_final")
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    assert data["functional"] == "pointwise_l1_final"
    assert data["slope"] == pytest.approx(1.0)
    assert data["eps_values"] == list(SWEEP_EPS)


def test_moment_bound_constants():
    records = [
        record(0.0, moment_v2=1.0, moment_x1=2.0, moment_y2=1.0),
        record(1.0, moment_v2=2.0, moment_x1=3.0, moment_y2=1.0),
    ]
    report = moment_bound_report(records, eps=0.5)
    assert report.c_v == pytest.approx(1.0)
    assert report.c_x == pytest.approx(2.0)
    assert report.finite
    assert report.stable_against(report)
    with pytest.raises(DomainError):
        moment_bound_report([], eps=0.5)
    with pytest.raises(DomainError):
        moment_bound_report(records, eps=0.0)


@pytest.mark.parametrize("eps", [0.0, 1.0, 1.5])
def test_envelopes_need_eps_in_unit_interval(eps):
    with pytest.raises(DomainError):
        theorem_envelopes(eps, [0.0, 1.0])


def test_envelope_values():
    integrated, pointwise = theorem_envelopes(0.01, np.array([0.0, 1.0]))
    factor0 = 1.0 + math.sqrt(math.log(100.0))
    assert integrated[0] == pytest.approx(0.1 * factor0)
    assert pointwise[0] == pytest.approx(1e-4)
    assert pointwise[1] == pytest.approx(0.1 * (factor0 + 1.0) + 1e-4)


def test_theorem_lhs_integrates_in_time(small_grid, rng):
    records = [record(t, l1_to_maxwellian=0.5) for t in (0.0, 0.5, 1.0)]
    marginals = rng.uniform(size=(3, small_grid.n_x, 4))
    lhs = theorem_lhs(records, marginals, marginals.copy(), small_grid)
    assert lhs.time_integrated_l1_sq == pytest.approx(0.25)
    np.testing.assert_array_equal(lhs.pointwise_l1_series, np.zeros(3))
    with pytest.raises(ConfigurationError):
        theorem_lhs(records, marginals, marginals[:2], small_grid)


def test_attach_limit_gap_fills_the_column(small_grid, rng):
    records = [record(t) for t in (0.0, 0.5)]
    marginals = rng.uniform(size=(2, small_grid.n_x, 4))
    attached = attach_limit_gap(records, marginals, marginals + 1.0, small_grid)
    # a unit offset everywhere has L¹ norm L·|V|
    assert [r.l1_to_limit for r in attached] == pytest.approx([20.0, 20.0])


def test_initial_data_report(small_grid, linear_signal, profile):
    q0 = init_well_prepared(small_grid, linear_signal, 0.1, profile, t_end=1.0)
    report = initial_data_report(q0, 0.1, init_limit_from(q0))
    assert report.mass == pytest.approx(1.0)
    assert report.moment_y2 == pytest.approx(1.0, abs=1e-6)
    assert report.limit_gap_scaled == pytest.approx(0.0, abs=1e-12)
    assert report.limit_moment_v2 == pytest.approx(report.moment_v2)


def test_original_variables_keep_mass_and_gap(fine_y_grid, linear_signal):
    profile = SpatialProfile(shape="indicator", center=0.5, half_width=0.4)
    q0 = init_well_prepared(fine_y_grid, linear_signal, 0.1, profile, t_end=0.0)
    model = KineticModel(linear_signal, KernelSpec(), fine_y_grid, AdaptedSignalState(eps=0.1))
    edges = np.linspace(-1.0, 1.5, 26)
    density = to_original_variables(q0, model, edges)
    weights = fine_y_grid.dx * fine_y_grid.velocities.weights[None, :, None]
    assert np.sum(density * np.diff(edges)[None, None, :] * weights) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(
        np.sum(density * np.diff(edges), axis=-1), marginal_y(q0), rtol=1e-12
    )
    gap = original_l1_gap(q0, model, edges)
    assert gap.rescaled < 1e-14
    assert gap.discrepancy < 1e-2


def test_original_variables_need_increasing_edges(fine_y_grid, linear_signal):
    profile = SpatialProfile(shape="indicator", center=0.5, half_width=0.4)
    q0 = init_well_prepared(fine_y_grid, linear_signal, 0.1, profile, t_end=0.0)
    model = KineticModel(linear_signal, KernelSpec(), fine_y_grid, AdaptedSignalState(eps=0.1))
    with pytest.raises(ConfigurationError):
        to_original_variables(q0, model, np.array([0.0, 0.5, 0.5]))


def test_records_csv_is_deterministic(tmp_path):
    records = [record(0.0), record(0.1, l1_to_limit=0.03125, tumbling_y2=-0.2)]
    first = write_records_csv(records, tmp_path / "a.csv")
    second = write_records_csv(records, tmp_path / "b.csv")
    assert first.read_bytes() == second.read_bytes()
    assert first.read_text(encoding="utf-8").splitlines()[0] == ",".join(CSV_COLUMNS)
    assert read_records_csv(first) == records
    assert read_records_csv(first)[0].l1_to_limit is None
    assert csv_kind(first) == "diagnostics"


def test_records_csv_rejects_bad_files(tmp_path):
    bad_header = tmp_path / "header.csv"
    bad_header.write_text("t,mass\n0.0,1.0\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        read_records_csv(bad_header)
    with pytest.raises(ConfigurationError):
        csv_kind(bad_header)

    short_row = tmp_path / "short.csv"
    short_row.write_text(",".join(CSV_COLUMNS) + "\n0.0,1.0\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        read_records_csv(short_row)

    with pytest.raises(ConfigurationError):
        read_records_csv(tmp_path / "missing.csv")


def test_limit_and_sweep_tables(tmp_path, small_grid, linear_signal, profile):
    p0 = init_limit_from(init_well_prepared(small_grid, linear_signal, 0.1, profile, t_end=1.0))
    limit_path = write_limit_csv([limit_record(p0)], tmp_path / "limit.csv")
    assert csv_kind(limit_path) == "limit"
    (rec,) = read_limit_csv(limit_path)
    assert rec.mass == pytest.approx(1.0)
    assert rec.moment_x1 == pytest.approx(5.0, abs=1e-6)

    sweep_path = write_sweep_csv([(0.2, 0.1, 0.3), (0.1, 0.05, 0.2)], tmp_path / "sweep.csv")
    assert csv_kind(sweep_path) == "sweep"
    table = read_sweep_csv(sweep_path)
    np.testing.assert_array_equal(table["eps"], [0.2, 0.1])
    np.testing.assert_array_equal(table["pointwise_l1_final"], [0.3, 0.2])


def record_run(grid: PhaseGrid, q0: GridDistribution, config: SolverConfig) -> list[DiagnosticsRecord]:
    signal = SignalSpec.linear(0.5, extent=grid.length)
    model = KineticModel(signal, KernelSpec(response="tanh", chi=0.5), grid, AdaptedSignalState(eps=config.eps))
    result = GridSolver(model, config).run(q0, hooks=(lambda q: compute_record(q, model),))
    return result.outputs[0]


def test_moment_constants_survive_grid_refinement():
    signal = SignalSpec.linear(0.5, extent=20.0)
    profile = SpatialProfile(shape="bump", center=10.0, half_width=2.0)
    config = SolverConfig(eps=0.1, dt=0.05, t_end=2.0, output_interval=0.1)
    reports = []
    entropies = []
    for n_x, n_y in ((50, 40), (100, 80)):
        grid = PhaseGrid(length=20.0, n_x=n_x, velocities=VelocitySet.uniform_line(4, 1.0), n_y=n_y, y_max=8.0)
        q0 = init_well_prepared(grid, signal, config.eps, profile, t_end=config.t_end)
        records = record_run(grid, q0, config)
        reports.append(moment_bound_report(records, eps=config.eps))
        entropies.append(max(abs(r.entropy) for r in records))
    coarse, fine = reports
    assert coarse.finite and fine.finite
    assert coarse.stable_against(fine, rtol=0.2)
    assert abs(entropies[0] - entropies[1]) <= 0.2 * max(entropies)


def test_y_moment_relaxes_through_an_initial_layer():
    eps = 0.1
    grid = PhaseGrid(length=10.0, n_x=20, velocities=VelocitySet.uniform_line(4, 1.0), n_y=160, y_max=12.0)
    profile = SpatialProfile(shape="bump", center=5.0, half_width=1.0)
    q0 = init_well_prepared(grid, SignalSpec.linear(0.5, extent=10.0), eps, profile, t_end=0.0)
    # variance 4 in y instead of the local Gaussian
    wide = np.exp(-grid.y_centers**2 / 8.0)
    values = marginal_y(q0)[..., None] * wide / (wide.sum() * grid.dy)
    start = GridDistribution(values=values, grid=grid)
    config = SolverConfig(
        eps=eps,
        dt=eps / 20,
        t_end=5 * eps,
        output_interval=eps / 2,
        enable_transport=False,
        enable_tumbling=False,
    )
    records = record_run(grid, start, config)
    y2 = np.array([r.moment_y2 for r in records])
    assert y2[0] == pytest.approx(4.0, abs=0.05)
    assert np.all(np.diff(y2) < 0.0)
    # records every eps/2: index 2 is t = eps
    assert y2[2] > 1.2
    assert 0.95 <= y2[-1] <= 1.05
    assert moment_bound_report(records, eps=eps).finite
