"""
Command-line front end: scenario runs, ε-sweeps, particle cross-checks and plots.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from functools import partial
from pathlib import Path
from typing import Any, List, Optional

import numpy as np
import typer
import yaml
from dotenv import find_dotenv, load_dotenv
from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from scipy import special

from .config import RunManifest, ScenarioConfig, build_scenario, env_defaults, load_scenario
from .diagnostics import (
    CSV_COLUMNS,
    DiagnosticsRecord,
    RateFit,
    attach_limit_gap,
    check_csiszar_kullback,
    compute_record,
    csv_kind,
    fit_rate,
    initial_data_report,
    limit_record,
    moment_bound_report,
    read_limit_csv,
    read_records_csv,
    read_sweep_csv,
    theorem_envelopes,
    theorem_lhs,
    write_limit_csv,
    write_rate_fit,
    write_records_csv,
    write_sweep_csv,
)
from .errors import (
    BoundViolationError,
    ConfigurationError,
    DomainError,
    NumericalError,
    StatisticsError,
)
from .grid_solver import GridDistribution, GridSolver, RunResult, init_well_prepared
from .kernels import exit_rate, verify_kernel_bounds
from .limit_solver import LimitRunResult, init_limit_from, limit_run
from .particle_sim import (
    CSV_LIMIT,
    ensemble_moments,
    evolve,
    exponential_ks_test,
    rescaled_histogram,
    sample_well_prepared,
)
from .plotting import LIMIT_SERIES, plot_diagnostics, plot_rate
from .signals import sample_lemma_points, verify_lemma_N
from .snapshots import write_checkpoint, write_particles_csv, write_snapshot
from .version import __version__


load_dotenv(find_dotenv(), override=False)

AT_FLOOR = 1e-9
SIGMA_LIMIT = 3.0
FAMILY_ALPHA = 0.01
MIN_EXPECTED_COUNT = 5.0
MIN_COMPARE_PARTICLES = 10_000
LEMMA_SAMPLES = 1000
CENSOR_RATES = 10.0

APP_EPILOG = """
Examples:
  ckin validate --config scenarios/steep.yaml
  ckin run-grid --out runs/default
  ckin sweep --jobs 4
  ckin compare --n-particles 1000000
  ckin plot out/run-grid/diagnostics.csv out/sweep/sweep.csv

Notes:
  1. Without --config the shipped default scenario is used
  2. CKIN_OUT_DIR, CKIN_JOBS and CKIN_SEED (also read from .env) set defaults for --out, --jobs, --seed
  3. Exit codes: 0 ok, 1 unexpected, 2 configuration, 3 numerical instability, 4 particle statistics
"""

SWEEP_EPILOG = """
Examples:
  ckin sweep
  ckin sweep --config scenarios/flat.yaml --jobs 4

Writes sweep.csv, one diagnostics CSV per eps and a YAML rate fit per functional:
  (a) the time-integrated squared L1 distance to the local Gaussian
  (b) the L1 distance of the v-marginal to the limit model at t_end
"""

COMPARE_EPILOG = """
Examples:
  ckin compare
  ckin compare --n-particles 1000000 --seed 7

Discrepancies are reported per marginal in units of the binomial standard error.
A marginal is flagged when its worst cell passes the Sidak threshold for a 1%
family-wise level over its tested cells (never below 3).
"""

app = typer.Typer(
    name="ckin",
    help="Kinetic chemotaxis solvers and convergence checks.",
    epilog=APP_EPILOG,
    add_completion=False,
    context_settings={"help_option_names": ["-h", "--help"]},
)
console = Console()


@app.command("run-grid")
def run_grid(
    config: Optional[Path] = typer.Option(
        None, "--config", "-c", exists=True, help="Scenario YAML; defaults to the shipped scenario."
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed recorded in the manifest."),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory."),
    with_limit: bool = typer.Option(
        True, "--limit/--no-limit", help="Also run the limit model and fill l1_to_limit."
    ),
):
    """
    Run the rescaled grid solver and write diagnostics and the final snapshot.
    """
    try:
        scenario, seed, out_dir, _ = _resolve(config, seed, out, None)
        run_dir = out_dir / "run-grid"
        manifest = RunManifest(config_hash=scenario.config_hash(seed), seed=seed, command="run-grid")
        _print_header("run-grid", scenario, seed, run_dir)

        q0 = _initial_grid(scenario, scenario.eps)
        p_states = None
        if with_limit:
            limit = _limit_trajectory(scenario, q0)
            p_states = limit.states
            _print_trace(limit.trace)
        result, records, violations = _grid_trajectory(scenario.raw, scenario.eps, p_states)
        _print_trace(result.trace)

        _write_grid_outputs(scenario, result, records, run_dir, manifest)
        _print_grid_summary(scenario, result, records, p_states, violations)
        _finish(manifest, run_dir)
    except Exception as exc:
        _fail("Run", exc)


@app.command("run-limit")
def run_limit(
    config: Optional[Path] = typer.Option(
        None, "--config", "-c", exists=True, help="Scenario YAML; defaults to the shipped scenario."
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed recorded in the manifest."),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory."),
):
    """
    Run the limiting run-and-tumble model from the grid datum's y-marginal.
    """
    try:
        scenario, seed, out_dir, _ = _resolve(config, seed, out, None)
        run_dir = out_dir / "run-limit"
        manifest = RunManifest(config_hash=scenario.config_hash(seed), seed=seed, command="run-limit")
        _print_header("run-limit", scenario, seed, run_dir)

        result = _limit_trajectory(scenario, _initial_grid(scenario, scenario.eps))
        _print_trace(result.trace)
        records = result.outputs[0]
        if "csv" in scenario.output.formats:
            manifest.add_output(_saved("Limit CSV", write_limit_csv(records, run_dir / "limit.csv")))
        if "snapshot" in scenario.output.formats:
            path, meta = write_snapshot(result.final, run_dir / "final.snap", eps=scenario.eps)
            manifest.add_output(_saved("Snapshot", path))
            manifest.add_output(meta)
        if scenario.output.plot:
            svg = plot_diagnostics(records, run_dir / "limit.svg", LIMIT_SERIES, title="limit model")
            manifest.add_output(_saved("Plot", svg))

        final = records[-1]
        console.print(
            f"[cyan]Final:[/cyan] t={final.t:g} mass={final.mass:.15g} "
            f"moment_v2={final.moment_v2:.6g} moment_x1={final.moment_x1:.6g}"
        )
        _finish(manifest, run_dir)
    except Exception as exc:
        _fail("Run", exc)


@app.command("run-particles")
def run_particles(
    config: Optional[Path] = typer.Option(
        None, "--config", "-c", exists=True, help="Scenario YAML; defaults to the shipped scenario."
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed of the particle streams."),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory."),
    n_particles: Optional[int] = typer.Option(
        None, "--n-particles", "-n", help="Override [particles] N_p."
    ),
    record_intervals: bool = typer.Option(
        False, "--record-intervals", help="Record inter-tumble times and test them when the kernel is flat."
    ),
):
    """
    Simulate the original (x, v, m) particle system and write a checkpoint.
    """
    try:
        scenario, seed, out_dir, _ = _resolve(config, seed, out, None)
        run_dir = out_dir / "run-particles"
        manifest = RunManifest(
            config_hash=scenario.config_hash(seed), seed=seed, command="run-particles"
        )
        _print_header("run-particles", scenario, seed, run_dir)

        ens = _particle_run(scenario, seed, n_particles, record_intervals=record_intervals)
        _print_trace(ens.trace)
        manifest.seeds = {"master_seed": seed, "workers": ens.workers}

        if "snapshot" in scenario.output.formats:
            path, meta = write_checkpoint(ens, run_dir / "ensemble.ckpt")
            manifest.add_output(_saved("Checkpoint", path))
            manifest.add_output(meta)
        if "csv" in scenario.output.formats:
            if ens.count <= CSV_LIMIT:
                manifest.add_output(_saved("Particle CSV", write_particles_csv(ens, run_dir / "particles.csv")))
            else:
                console.print(f"[yellow]Particle CSV skipped:[/yellow] N_p > {CSV_LIMIT}")

        moments = ensemble_moments(ens, scenario.signal)
        table = Table(title="Ensemble moments", show_header=True, header_style="bold cyan")
        table.add_column("Quantity", style="cyan")
        table.add_column("Value", style="magenta")
        table.add_row("t", f"{ens.time:g}")
        table.add_row("mean |v|²", f"{moments.v2:.6g}")
        table.add_row("mean |x|", f"{moments.x1:.6g}")
        table.add_row("mean (m − M)²/ε²", f"{moments.y2:.6g}")
        table.add_row("tumbles", str(ens.tumbles))
        console.print(table)

        if record_intervals:
            _print_interval_test(scenario, ens)
        _finish(manifest, run_dir)
    except Exception as exc:
        _fail("Run", exc)


@app.command(epilog=SWEEP_EPILOG)
def sweep(
    config: Optional[Path] = typer.Option(
        None, "--config", "-c", exists=True, help="Scenario YAML; defaults to the shipped scenario."
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed recorded in the manifest."),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory."),
    jobs: Optional[int] = typer.Option(None, "--jobs", "-j", help="Concurrent eps runs."),
):
    """
    Run the grid model for every eps in [sweep] and fit the convergence rates.
    """
    try:
        scenario, seed, out_dir, jobs = _resolve(config, seed, out, jobs)
        if not scenario.sweep:
            raise ConfigurationError("[sweep] eps list is empty")
        run_dir = out_dir / "sweep"
        manifest = RunManifest(config_hash=scenario.config_hash(seed), seed=seed, command="sweep")
        _print_header(
            "sweep",
            scenario,
            seed,
            run_dir,
            extra=[f"[bold cyan]Eps:[/bold cyan] {', '.join(f'{e:g}' for e in scenario.sweep)}"],
        )

        limit = _limit_trajectory(scenario, _initial_grid(scenario, scenario.eps))
        _print_trace(limit.trace)
        members = _run_sweep(scenario, limit.states, jobs)

        rows = []
        for member in members:
            eps = member["eps"]
            _print_trace(member["trace"])
            eps_dir = run_dir / f"eps_{eps:g}"
            manifest.add_output(
                _saved(f"Diagnostics eps={eps:g}", write_records_csv(member["records"], eps_dir / "diagnostics.csv"))
            )
            rows.append((eps, member["time_integrated"], member["pointwise_final"]))
        sweep_csv = write_sweep_csv(rows, run_dir / "sweep.csv")
        manifest.add_output(_saved("Sweep CSV", sweep_csv))

        eps_values = [row[0] for row in rows]
        table = Table(title="Sweep errors", show_header=True, header_style="bold cyan")
        table.add_column("eps", style="cyan")
        table.add_column("∫‖q − q̄𝓜‖₁² dt", style="magenta")
        table.add_column("‖q̄(t_end) − p̄(t_end)‖₁", style="magenta")
        table.add_column("envelope at t_end", style="white")
        for eps, integrated, pointwise in rows:
            _, pointwise_shape = theorem_envelopes(eps, scenario.solver.t_end)
            table.add_row(f"{eps:g}", f"{integrated:.6e}", f"{pointwise:.6e}", f"{float(pointwise_shape):.4g}")
        console.print(table)

        fits = Table(title="Rate fits", show_header=True, header_style="bold green")
        fits.add_column("Functional", style="green")
        fits.add_column("Slope")
        fits.add_column("r²")
        fits.add_column("Status")
        for index, label in ((1, "time_integrated_l1_sq"), (2, "pointwise_l1_final")):
            errors = [row[index] for row in rows]
            fit, status = _fit_or_skip(eps_values, errors)
            if fit is None:
                fits.add_row(label, "-", "-", status)
                continue
            fits.add_row(label, f"{fit.slope:.4f}", f"{fit.r_squared:.4f}", status)
            manifest.add_output(_saved("Rate fit", write_rate_fit(fit, run_dir / f"fit_{label}.yaml", label=label)))
            if scenario.output.plot:
                svg = plot_rate(eps_values, errors, run_dir / f"rate_{label}.svg", label=label, fit=fit)
                manifest.add_output(_saved("Plot", svg))
        console.print(fits)
        _finish(manifest, run_dir)
    except Exception as exc:
        _fail("Sweep", exc)


@app.command(epilog=COMPARE_EPILOG)
def compare(
    config: Optional[Path] = typer.Option(
        None, "--config", "-c", exists=True, help="Scenario YAML; defaults to the shipped scenario."
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed of the particle streams."),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory."),
    n_particles: Optional[int] = typer.Option(
        None, "--n-particles", "-n", help="Override [particles] N_p."
    ),
):
    """
    Cross-check particle and grid solutions through their one-dimensional marginals.
    """
    try:
        scenario, seed, out_dir, _ = _resolve(config, seed, out, None)
        run_dir = out_dir / "compare"
        manifest = RunManifest(config_hash=scenario.config_hash(seed), seed=seed, command="compare")
        _print_header("compare", scenario, seed, run_dir)

        solver = replace(scenario.solver, t_end=scenario.particle_t_end)
        q0 = _initial_grid(scenario, scenario.eps, solver.t_end)
        grid_result = GridSolver(scenario.kinetic_model(), solver).run(q0)
        _print_trace(grid_result.trace)

        ens = _particle_run(scenario, seed, n_particles)
        _print_trace(ens.trace)
        manifest.seeds = {"master_seed": seed, "workers": ens.workers}
        if abs(ens.time - grid_result.final.time) > 1e-9:
            raise ConfigurationError(
                f"particle time {ens.time:g} and grid time {grid_result.final.time:g} differ"
            )

        hist = rescaled_histogram(ens, scenario.grid, scenario.adapted_state(), scenario.signal)
        if hist.flagged:
            raise StatisticsError(
                f"{100 * hist.out_of_range_mass:.2f}% of the particle mass lies outside the grid"
            )

        report = _marginal_report(grid_result.final, hist.counts, ens.count)
        report["out_of_range_mass"] = hist.out_of_range_mass
        report["N_p"] = ens.count
        report["t"] = ens.time
        path = run_dir / "compare.yaml"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(report, sort_keys=False), encoding="utf-8")
        manifest.add_output(_saved("Comparison report", path))

        table = Table(title="Marginal discrepancies", show_header=True, header_style="bold cyan")
        table.add_column("Marginal", style="cyan")
        table.add_column("max |Δ|/σ", style="magenta")
        table.add_column("threshold")
        table.add_column("cells tested")
        for axis in ("x", "v", "y"):
            entry = report["marginals"][axis]
            table.add_row(
                axis, f"{entry['max_sigma']:.3f}", f"{entry['threshold']:.3f}", str(entry["cells"])
            )
        console.print(table)
        if report["flagged"]:
            console.print(
                "[yellow]Warning:[/yellow] insufficient statistics or a marginal beyond its "
                "family-wise threshold"
            )
        _finish(manifest, run_dir)
    except Exception as exc:
        _fail("Compare", exc)


@app.command()
def plot(
    csv_files: List[Path] = typer.Argument(..., exists=True, help="Diagnostics, limit or sweep CSV files."),
    out: Optional[Path] = typer.Option(
        None, "--out", "-o", help="Directory for the SVG files; defaults to next to each CSV."
    ),
):
    """
    Render diagnostics or sweep CSVs as standalone SVG line plots.
    """
    try:
        for csv_path in csv_files:
            target = (out or csv_path.parent) / csv_path.stem
            kind = csv_kind(csv_path)
            if kind == "diagnostics":
                records = read_records_csv(csv_path)
                _saved("Plot", plot_diagnostics(records, target.with_suffix(".svg"), title=csv_path.stem))
            elif kind == "limit":
                records = read_limit_csv(csv_path)
                _saved(
                    "Plot",
                    plot_diagnostics(records, target.with_suffix(".svg"), LIMIT_SERIES, title=csv_path.stem),
                )
            else:
                table = read_sweep_csv(csv_path)
                if table["eps"].size == 0:
                    raise ConfigurationError(f"{csv_path}: empty sweep")
                for label in ("time_integrated_l1_sq", "pointwise_l1_final"):
                    svg = target.with_name(f"{target.name}_{label}.svg")
                    _saved("Plot", plot_rate(table["eps"], table[label], svg, label=label))
    except Exception as exc:
        _fail("Plot", exc)


@app.command()
def validate(
    config: Optional[Path] = typer.Option(
        None, "--config", "-c", exists=True, help="Scenario YAML; defaults to the shipped scenario."
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed of the random adapted-signal check samples."),
):
    """
    Check a scenario against every standing assumption without running it.
    """
    try:
        scenario, seed, _, _ = _resolve(config, seed, None, None)
        grid = scenario.grid
        table = Table(title="Scenario checks", show_header=True, header_style="bold cyan")
        table.add_column("Check", style="cyan", width=28)
        table.add_column("Result", style="magenta")

        bounds = scenario.signal.bounds
        if not bounds.is_finite():
            raise ConfigurationError("[signal] W^{2,inf} bounds are not finite")
        table.add_row("signal ‖M‖_{W^{2,∞}}", f"{bounds.w2inf:.6g}")

        kernel_report = verify_kernel_bounds(
            scenario.kernel, grid.velocities, np.linspace(-20.0, 20.0, 4001)
        )
        table.add_row(
            "kernel bounds",
            f"moment {kernel_report.sampled.moment_bound:.6g} ≤ {kernel_report.stored.moment_bound:.6g}, "
            f"rate {kernel_report.sampled.rate_bound:.6g} ≤ {kernel_report.stored.rate_bound:.6g}",
        )

        rng = np.random.Generator(np.random.Philox(seed))
        samples = sample_lemma_points(
            LEMMA_SAMPLES, rng, scenario.signal, t_max=scenario.solver.t_end, v_max=grid.velocities.v_max
        )
        lemma = verify_lemma_N(scenario.adapted_state(), scenario.signal, samples)
        table.add_row(
            "adapted-signal estimates",
            f"max ratios {lemma.max_ratio_lip:.6g} / {lemma.max_ratio_decay:.6g}",
        )
        if not lemma.passed:
            raise BoundViolationError(
                f"adapted-signal estimate exceeded: worst samples {lemma.worst_lip} / {lemma.worst_decay}"
            )

        table.add_row("CFL number", f"{scenario.solver.cfl(grid):.4f}")
        q0 = _initial_grid(scenario, scenario.eps)
        initial = initial_data_report(q0, scenario.eps, init_limit_from(q0))
        table.add_row("initial mass", f"{initial.mass:.15g}")
        table.add_row("initial ∫y²q₀", f"{initial.moment_y2:.6g}")
        table.add_row("initial entropy", f"{initial.entropy:.6g}")
        table.add_row("initial limit gap / ε²", f"{initial.limit_gap_scaled:.3e}")
        chain = check_csiszar_kullback(q0)
        table.add_row("entropy chain", f"l1²={chain.l1_sq:.3e} 2KL={2 * chain.kl:.3e} I={chain.fisher:.3e}")
        console.print(table)
        console.print("[green]✓[/green] Scenario is valid")
    except Exception as exc:
        _fail("Validation", exc)


@app.command()
def info():
    """
    Show the version, supported models, environment and package availability.
    """
    table = Table(title="Chemo Kinetics CLI", show_header=True, header_style="bold cyan")
    table.add_column("Item", style="cyan", width=24)
    table.add_column("Value", style="magenta")
    table.add_row("Version", __version__)
    table.add_row("Signal families", "constant, linear, bump")
    table.add_row("Kernel responses", "flat, tanh, exp")
    table.add_row("Transport schemes", "upwind1, muscl")
    table.add_row("Diagnostics columns", ", ".join(CSV_COLUMNS))
    console.print(table)

    env_table = Table(title="Environment", show_header=True, header_style="bold yellow")
    env_table.add_column("Variable", style="yellow")
    env_table.add_column("Status")
    for name in ("CKIN_OUT_DIR", "CKIN_JOBS", "CKIN_SEED"):
        env_table.add_row(name, _mark(os.getenv(name)))
    console.print(env_table)

    packages = Table(title="Python Packages", show_header=True, header_style="bold blue")
    packages.add_column("Package", style="blue")
    packages.add_column("Status")
    for package in ("numpy", "scipy", "matplotlib", "yaml", "dotenv"):
        packages.add_row(package, _mark_import(package))
    console.print(packages)


@app.command()
def version():
    """
    Show the version.
    """
    console.print(f"[bold cyan]ChemoKinetics[/bold cyan] [bold green]{__version__}[/bold green]")


@app.callback()
def main():
    """
    Kinetic chemotaxis command-line entry point.
    """
    pass


def _resolve(
    config: Optional[Path],
    seed: Optional[int],
    out: Optional[Path],
    jobs: Optional[int],
) -> tuple[ScenarioConfig, int, Path, int]:
    env = env_defaults()
    scenario = load_scenario(config)
    seed = seed if seed is not None else env.get("seed", scenario.master_seed)
    if seed < 0:
        raise ConfigurationError("--seed must be >= 0")
    out_dir = out or env.get("out") or scenario.output.directory
    jobs = jobs if jobs is not None else env.get("jobs", 1)
    if jobs < 1:
        raise ConfigurationError("--jobs must be >= 1")
    return scenario, seed, Path(out_dir), jobs


def _initial_grid(scenario: ScenarioConfig, eps: float, t_end: Optional[float] = None) -> GridDistribution:
    return init_well_prepared(
        scenario.grid,
        scenario.signal,
        eps,
        scenario.profile,
        t_end=scenario.solver.t_end if t_end is None else t_end,
    )


def _limit_trajectory(scenario: ScenarioConfig, q0: GridDistribution) -> LimitRunResult:
    return limit_run(
        init_limit_from(q0),
        scenario.solver,
        scenario.signal,
        scenario.limit_kernel(),
        hooks=(limit_record,),
    )


def _grid_trajectory(
    raw: dict[str, Any],
    eps: float,
    p_states: Optional[np.ndarray] = None,
) -> tuple[RunResult, list[DiagnosticsRecord], int]:
    """Grid run at one eps; top-level so sweep workers can pickle it."""
    scenario = build_scenario(raw)
    model = scenario.kinetic_model(eps)
    config = scenario.solver_config(eps)
    q0 = _initial_grid(scenario, eps)
    result = GridSolver(model, config).run(
        q0, hooks=(lambda q: compute_record(q, model), _chain_holds)
    )
    records = result.outputs[0]
    if p_states is not None:
        records = attach_limit_gap(records, result.marginals, p_states, scenario.grid)
    violations = sum(1 for ok in result.outputs[1] if ok is False)
    return result, records, violations


def _chain_holds(q: GridDistribution) -> Optional[bool]:
    try:
        return check_csiszar_kullback(q, strict=False).chain_ok
    except DomainError:
        # mass left through the outflow boundary
        return None


def _sweep_member(raw: dict[str, Any], eps: float, p_states: np.ndarray) -> dict[str, Any]:
    result, records, violations = _grid_trajectory(raw, eps, p_states)
    lhs = theorem_lhs(records, result.marginals, p_states, result.final.grid)
    trace = result.trace
    if violations:
        trace.append(f"entropy chain violated on {violations} records")
    return {
        "eps": eps,
        "records": records,
        "time_integrated": lhs.time_integrated_l1_sq,
        "pointwise_final": float(lhs.pointwise_l1_series[-1]),
        "trace": trace,
    }


def _run_sweep(scenario: ScenarioConfig, p_states: np.ndarray, jobs: int) -> list[dict[str, Any]]:
    """One member per eps, returned in sweep order whatever the completion order."""
    if jobs == 1:
        return [_sweep_step(eps, partial(_sweep_member, scenario.raw, eps, p_states)) for eps in scenario.sweep]
    with ProcessPoolExecutor(max_workers=min(jobs, len(scenario.sweep))) as pool:
        futures = [(eps, pool.submit(_sweep_member, scenario.raw, eps, p_states)) for eps in scenario.sweep]
        return [_sweep_step(eps, future.result) for eps, future in futures]


def _sweep_step(eps: float, compute) -> dict[str, Any]:
    try:
        member = compute()
    except Exception:
        console.print(f"[red]✗ Sweep member eps={eps:g} failed[/red]")
        raise
    console.print(f"[cyan]eps={eps:g}[/cyan] done")
    return member


def _fit_or_skip(eps_values: list[float], errors: list[float]) -> tuple[Optional[RateFit], str]:
    if all(abs(err) < AT_FLOOR for err in errors):
        return None, "at-floor"
    try:
        return fit_rate(eps_values, errors), "fitted"
    except (ConfigurationError, DomainError) as exc:
        return None, f"skipped: {exc}"


def _particle_run(
    scenario: ScenarioConfig,
    seed: int,
    n_particles: Optional[int],
    *,
    record_intervals: bool = False,
):
    particles = scenario.particles
    count = particles.count if n_particles is None else n_particles
    ens = sample_well_prepared(
        count,
        scenario.profile,
        scenario.signal,
        scenario.eps,
        seed,
        velocities=scenario.grid.velocities if scenario.signal.dim == 1 else None,
        workers=min(particles.workers, count),
        noise_exponent=particles.noise_exponent,
    )
    return evolve(
        ens,
        scenario.particle_t_end,
        scenario.signal,
        scenario.kernel,
        substeps_per_eps=particles.substeps_per_eps,
        record_intervals=record_intervals or particles.record_intervals,
    )


def _print_interval_test(scenario: ScenarioConfig, ens) -> None:
    if scenario.kernel.response != "flat":
        console.print("[yellow]Interval test skipped:[/yellow] needs a flat kernel")
        return
    # a flat response makes the exit rate the same from every velocity
    rate = float(exit_rate(scenario.kernel, scenario.grid.velocities, 0.0, 0))
    cutoff = ens.time - CENSOR_RATES / rate
    if cutoff <= 0:
        console.print("[yellow]Interval test skipped:[/yellow] run too short for uncensored intervals")
        return
    statistic, critical, p_value = exponential_ks_test(ens.recorded_intervals(start_before=cutoff), rate)
    verdict = "[green]passes[/green]" if statistic <= critical else "[red]fails[/red]"
    console.print(
        f"[cyan]Exponential KS test:[/cyan] D={statistic:.4f} critical={critical:.4f} "
        f"p={p_value:.3g} {verdict}"
    )


def _marginal_report(q: GridDistribution, counts: np.ndarray, total: int) -> dict[str, Any]:
    """Largest cell discrepancy of each marginal in binomial standard errors.

    A marginal fails when its worst cell exceeds the Sidak threshold for
    FAMILY_ALPHA over the cells tested, never less than SIGMA_LIMIT.
    """
    expected = q.values * q.grid.cell_weights
    marginals: dict[str, Any] = {}
    flagged = False
    for axis, name in enumerate(("x", "v", "y")):
        others = tuple(i for i in range(3) if i != axis)
        prob = expected.sum(axis=others)
        observed = counts.sum(axis=others) / total
        tested = prob * total >= MIN_EXPECTED_COUNT
        if not np.any(tested):
            marginals[name] = {"max_sigma": float("inf"), "threshold": SIGMA_LIMIT, "cells": 0}
            flagged = True
            continue
        sigma = np.sqrt(prob[tested] * (1.0 - prob[tested]) / total)
        z = np.abs(observed[tested] - prob[tested]) / sigma
        worst = float(z.max())
        threshold = family_threshold(int(tested.sum()))
        marginals[name] = {"max_sigma": worst, "threshold": threshold, "cells": int(tested.sum())}
        flagged = flagged or worst > threshold
    insufficient = total < MIN_COMPARE_PARTICLES
    return {
        "marginals": marginals,
        "sigma_limit": SIGMA_LIMIT,
        "family_alpha": FAMILY_ALPHA,
        "insufficient_statistics": insufficient,
        "flagged": flagged or insufficient,
    }


def family_threshold(cells: int, alpha: float = FAMILY_ALPHA) -> float:
    """Two-sided z beyond which any of `cells` independent normals falls with probability alpha."""
    per_cell = -math.expm1(math.log1p(-alpha) / cells)
    return max(SIGMA_LIMIT, float(special.ndtri(1.0 - 0.5 * per_cell)))


def _write_grid_outputs(
    scenario: ScenarioConfig,
    result: RunResult,
    records: list[DiagnosticsRecord],
    run_dir: Path,
    manifest: RunManifest,
) -> None:
    if "csv" in scenario.output.formats:
        manifest.add_output(_saved("Diagnostics CSV", write_records_csv(records, run_dir / "diagnostics.csv")))
    if "snapshot" in scenario.output.formats:
        path, meta = write_snapshot(result.final, run_dir / "final.snap", eps=scenario.eps)
        manifest.add_output(_saved("Snapshot", path))
        manifest.add_output(meta)
    if scenario.output.plot:
        svg = plot_diagnostics(records, run_dir / "diagnostics.svg", title=f"eps = {scenario.eps:g}")
        manifest.add_output(_saved("Plot", svg))


def _print_grid_summary(
    scenario: ScenarioConfig,
    result: RunResult,
    records: list[DiagnosticsRecord],
    p_states: Optional[np.ndarray],
    violations: int,
) -> None:
    final = records[-1]
    table = Table(title="Grid run", show_header=True, header_style="bold cyan")
    table.add_column("Quantity", style="cyan", width=28)
    table.add_column("Value", style="magenta")
    table.add_row("t_end", f"{final.t:g}")
    table.add_row("mass", f"{final.mass:.15g}")
    table.add_row("‖q − q̄𝓜‖₁ at t_end", f"{final.l1_to_maxwellian:.6e}")
    if p_states is not None:
        lhs = theorem_lhs(records, result.marginals, p_states, result.final.grid)
        table.add_row("∫‖q − q̄𝓜‖₁² dt", f"{lhs.time_integrated_l1_sq:.6e}")
        table.add_row("‖q̄ − p̄‖₁ at t_end", f"{lhs.pointwise_l1_series[-1]:.6e}")
    bounds = moment_bound_report(records, scenario.eps)
    table.add_row("moment constants (v, x, y)", f"{bounds.c_v:.4g}, {bounds.c_x:.4g}, {bounds.c_y:.4g}")
    console.print(table)
    if violations:
        console.print(f"[yellow]Warning:[/yellow] entropy chain violated on {violations} records")


def _print_header(
    command: str,
    scenario: ScenarioConfig,
    seed: int,
    run_dir: Path,
    extra: Optional[list[str]] = None,
) -> None:
    grid = scenario.grid
    lines = [
        f"[bold cyan]Command:[/bold cyan] {command}",
        f"[bold cyan]Output dir:[/bold cyan] {run_dir}",
        f"[bold cyan]Signal:[/bold cyan] {scenario.signal.family}",
        f"[bold cyan]Kernel:[/bold cyan] {scenario.kernel.response}",
        f"[bold cyan]Grid:[/bold cyan] n_x={grid.n_x} K={grid.velocities.size} n_y={grid.n_y}",
        f"[bold cyan]Eps:[/bold cyan] {scenario.eps:g}",
        f"[bold cyan]Seed:[/bold cyan] {seed}",
        *(extra or []),
    ]
    console.print(Panel.fit("\n".join(lines), title="ChemoKinetics", border_style="cyan"))


def _saved(label: str, path: Path) -> Path:
    console.print(f"[green]✓[/green] {label} saved: {path}")
    return path


def _finish(manifest: RunManifest, run_dir: Path) -> None:
    manifest.finish()
    _saved("Manifest", manifest.write(run_dir / "manifest.yaml"))


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, (ConfigurationError, DomainError)):
        return 2
    if isinstance(exc, NumericalError):
        return 3
    if isinstance(exc, StatisticsError):
        return 4
    return 1


def _fail(label: str, exc: Exception) -> None:
    console.print(f"[red]✗ {label} failed:[/red] {exc}")
    raise typer.Exit(_exit_code(exc))


def _mark(value: Optional[str]) -> str:
    return "[green]set[/green]" if value else "[red]not set[/red]"


def _mark_import(module_name: str) -> str:
    try:
        __import__(module_name)
        return "[green]available[/green]"
    except Exception:
        return "[red]missing[/red]"


def _print_trace(trace: list[str]) -> None:
    if not trace:
        return
    console.print("[bold cyan]Trace[/bold cyan]")
    for item in trace:
        console.print(f"  - {item}")


if __name__ == "__main__":
    app()
