"""
Functionals behind the convergence estimates: moments, relative entropy, Fisher
information, L¹ distances to the Maxwellian and to the limit model, rate fits.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import yaml
from scipy import integrate, special

from .errors import ConfigurationError, CorruptedStateError, DomainError, NumericalError
from .grid_solver import GridDistribution, KineticModel, PhaseGrid, marginal_y
from .limit_solver import LimitDistribution


CHAIN_SLACK = 1e-10
MASS_TOLERANCE = 1e-10
CSV_COLUMNS = (
    "t",
    "mass",
    "moment_v2",
    "moment_x1",
    "moment_y2",
    "entropy",
    "fisher",
    "l1_to_maxwellian",
    "l1_to_limit",
    "tumbling_y2",
)
SWEEP_COLUMNS = ("eps", "time_integrated_l1_sq", "pointwise_l1_final")
LIMIT_COLUMNS = ("t", "mass", "moment_v2", "moment_x1")


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    mass: float
    moment_v2: float
    moment_x1: float
    moment_y2: float
    entropy: float
    fisher: float
    l1_to_maxwellian: float
    l1_to_limit: Optional[float] = None
    tumbling_y2: float = 0.0


@dataclass(frozen=True)
class ChainReport:
    l1_sq: float
    kl: float
    fisher: float

    @property
    def chain_ok(self) -> bool:
        return self.l1_sq - 2.0 * self.kl <= CHAIN_SLACK and 2.0 * self.kl - self.fisher <= CHAIN_SLACK


@dataclass(frozen=True)
class MomentBoundReport:
    c_v: float
    c_x: float
    c_y: float

    @property
    def finite(self) -> bool:
        return all(math.isfinite(c) for c in (self.c_v, self.c_x, self.c_y))

    def stable_against(self, other: "MomentBoundReport", rtol: float = 0.2) -> bool:
        pairs = ((self.c_v, other.c_v), (self.c_x, other.c_x), (self.c_y, other.c_y))
        return all(abs(a - b) <= rtol * max(abs(a), abs(b)) for a, b in pairs)


@dataclass(frozen=True)
class RateFit:
    eps_values: tuple[float, ...]
    errors: tuple[float, ...]
    slope: float
    intercept: float
    r_squared: float

    def to_mapping(self) -> dict:
        return {
            "eps_values": list(self.eps_values),
            "errors": list(self.errors),
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
        }


@dataclass(frozen=True)
class TheoremLHS:
    time_integrated_l1_sq: float
    pointwise_l1_series: np.ndarray


@dataclass(frozen=True)
class InitialDataReport:
    mass: float
    moment_x1: float
    moment_v2: float
    moment_y2: float
    entropy: float
    limit_gap_scaled: Optional[float]
    limit_moment_v2: Optional[float]


@dataclass(frozen=True)
class OriginalGapReport:
    original: float
    rescaled: float

    @property
    def discrepancy(self) -> float:
        return abs(self.original - self.rescaled)


def compute_record(
    q: GridDistribution,
    model: Optional[KineticModel] = None,
    p_ref: Optional[LimitDistribution] = None,
) -> DiagnosticsRecord:
    grid = q.grid
    values = q.values
    weights = grid.cell_weights
    density = values * weights
    speed_sq = grid.velocities.speed_sq[None, :, None]

    record = DiagnosticsRecord(
        t=float(q.time),
        mass=float(density.sum()),
        moment_v2=float(np.sum(speed_sq * density)),
        moment_x1=float(np.sum(np.abs(grid.x_centers)[:, None, None] * density)),
        moment_y2=float(np.sum((grid.y_centers**2)[None, None, :] * density)),
        entropy=entropy(q),
        fisher=fisher_information(q),
        l1_to_maxwellian=l1_to_maxwellian(q),
        l1_to_limit=None if p_ref is None else l1_to_limit(q, p_ref),
        tumbling_y2=0.0 if model is None else tumbling_y2(q, model),
    )
    for name in CSV_COLUMNS:
        value = getattr(record, name)
        if value is not None and not math.isfinite(value):
            raise CorruptedStateError(name)
    return record


def entropy(q: GridDistribution) -> float:
    """∫q log(q/𝓜) with 0·log 0 = 0."""
    maxwellian = q.grid.maxwellian[None, None, :]
    return float(np.sum(special.xlogy(q.values, q.values / maxwellian) * q.grid.cell_weights))


def relative_entropy(q: GridDistribution) -> float:
    """KL(q ‖ q̄𝓜)."""
    grid = q.grid
    reference = marginal_y(q)[..., None] * grid.maxwellian[None, None, :]
    ratio = np.divide(q.values, reference, out=np.ones_like(q.values), where=reference > 0)
    return float(np.sum(special.xlogy(q.values, ratio) * grid.cell_weights))


def fisher_information(q: GridDistribution) -> float:
    """(4/Δy)·Σ ½(𝓜_j + 𝓜_{j+1})·|√(q_{j+1}/𝓜_{j+1}) − √(q_j/𝓜_j)|² per (x, v) column."""
    grid = q.grid
    maxwellian = grid.maxwellian
    root = np.sqrt(q.values / maxwellian[None, None, :])
    jumps = np.diff(root, axis=-1) ** 2
    mean_weight = 0.5 * (maxwellian[1:] + maxwellian[:-1])
    column = 4.0 / grid.dy * np.sum(jumps * mean_weight[None, None, :], axis=-1)
    return float(np.sum(column * grid.dx * grid.velocities.weights[None, :]))


def l1_to_maxwellian(q: GridDistribution) -> float:
    grid = q.grid
    reference = marginal_y(q)[..., None] * grid.maxwellian[None, None, :]
    return float(np.sum(np.abs(q.values - reference) * grid.cell_weights))


def l1_to_limit(q: GridDistribution, p_ref: LimitDistribution) -> float:
    if not q.grid.matches(p_ref.grid):
        raise ConfigurationError("grid and limit distributions live on different grids")
    return marginal_l1(marginal_y(q), p_ref.values, q.grid)


def marginal_l1(first: np.ndarray, second: np.ndarray, grid: PhaseGrid) -> float:
    if first.shape != second.shape:
        raise ConfigurationError(f"marginal shapes differ: {first.shape} vs {second.shape}")
    weights = grid.dx * grid.velocities.weights[None, :]
    return float(np.sum(np.abs(first - second) * weights))


def tumbling_y2(q: GridDistribution, model: KineticModel) -> float:
    """J = ∫y²·Q̃[q], the tumbling contribution to the y-moment balance."""
    if not q.grid.matches(model.grid):
        raise ConfigurationError("distribution and model use different grids")
    rhs = model.tumbling_rhs(q.values, q.time)
    y2 = (q.grid.y_centers**2)[None, None, :]
    return float(np.sum(y2 * rhs * q.grid.cell_weights))


def check_csiszar_kullback(q: GridDistribution, *, strict: bool = True) -> ChainReport:
    """‖q − q̄𝓜‖₁² ≤ 2·KL(q ‖ q̄𝓜) ≤ I[q] on the grid."""
    mass = q.mass
    if abs(mass - 1.0) > MASS_TOLERANCE:
        raise DomainError(f"chain check needs unit mass, got {mass:.15g}")
    l1 = l1_to_maxwellian(q)
    report = ChainReport(l1_sq=l1 * l1, kl=relative_entropy(q), fisher=fisher_information(q))
    if strict and not report.chain_ok:
        raise NumericalError(
            "Csiszár–Kullback / log-Sobolev chain violated: "
            f"l1²={report.l1_sq:.6e}, 2KL={2 * report.kl:.6e}, I={report.fisher:.6e}",
            achieved=max(report.l1_sq - 2 * report.kl, 2 * report.kl - report.fisher),
        )
    return report


def moment_bound_report(records: Sequence[DiagnosticsRecord], eps: float) -> MomentBoundReport:
    """Smallest constants C with m_v ≤ C(t+1), m_x ≤ C(t^{3/2}+1), m_y ≤ C(ε⁻²e^{-t/ε}+εt+1)."""
    if not records:
        raise DomainError("record series is empty")
    if not eps > 0:
        raise DomainError("eps must be > 0")
    t = np.array([r.t for r in records])
    v2 = np.array([r.moment_v2 for r in records])
    x1 = np.array([r.moment_x1 for r in records])
    y2 = np.array([r.moment_y2 for r in records])
    layer = np.exp(-t / eps) / eps**2 + eps * t + 1.0
    return MomentBoundReport(
        c_v=float(np.max(v2 / (t + 1.0))),
        c_x=float(np.max(x1 / (t**1.5 + 1.0))),
        c_y=float(np.max(y2 / layer)),
    )


def fit_rate(
    eps_values: Sequence[float],
    errors: Sequence[float],
    *,
    min_points: int = 3,
    min_span: float = 4.0,
) -> RateFit:
    """Least-squares fit of log(error) = slope·log(ε) + intercept."""
    eps_arr = np.asarray(eps_values, dtype=float)
    err_arr = np.asarray(errors, dtype=float)
    if eps_arr.shape != err_arr.shape or eps_arr.ndim != 1:
        raise ConfigurationError("eps values and errors must be equal-length lists")
    if eps_arr.size < min_points:
        raise ConfigurationError(f"a rate fit needs at least {min_points} eps values")
    if np.any(eps_arr <= 0):
        raise DomainError("eps values must be > 0")
    if eps_arr.max() < min_span * eps_arr.min():
        raise ConfigurationError(f"eps values must span at least a factor {min_span:g}")
    if np.any(~(err_arr > 0)):
        raise DomainError("every error must be > 0 to fit a rate")

    log_eps, log_err = np.log(eps_arr), np.log(err_arr)
    slope, intercept = np.polyfit(log_eps, log_err, 1)
    residual = log_err - (slope * log_eps + intercept)
    spread = np.sum((log_err - log_err.mean()) ** 2)
    r_squared = 1.0 if spread == 0 else 1.0 - float(np.sum(residual**2)) / float(spread)
    return RateFit(
        eps_values=tuple(float(e) for e in eps_arr),
        errors=tuple(float(e) for e in err_arr),
        slope=float(slope),
        intercept=float(intercept),
        r_squared=min(1.0, r_squared),
    )


def theorem_lhs(
    records: Sequence[DiagnosticsRecord],
    q_marginals: np.ndarray,
    p_states: np.ndarray,
    grid: PhaseGrid,
) -> TheoremLHS:
    """∫₀ᵗ‖q − q̄𝓜‖₁² ds by trapezoid and ‖q̄(t_k) − p̄(t_k)‖₁ per output time."""
    q_marginals = np.asarray(q_marginals)
    p_states = np.asarray(p_states)
    if q_marginals.shape != p_states.shape:
        raise ConfigurationError(
            f"grid and limit trajectories do not match: {q_marginals.shape} vs {p_states.shape}"
        )
    if len(records) != q_marginals.shape[0]:
        raise ConfigurationError("records and marginals have different output counts")
    times = np.array([r.t for r in records])
    l1_sq = np.array([r.l1_to_maxwellian for r in records]) ** 2
    integrated = float(integrate.trapezoid(l1_sq, times)) if times.size > 1 else 0.0
    pointwise = np.array([marginal_l1(a, b, grid) for a, b in zip(q_marginals, p_states)])
    return TheoremLHS(time_integrated_l1_sq=integrated, pointwise_l1_series=pointwise)


def attach_limit_gap(
    records: Sequence[DiagnosticsRecord],
    q_marginals: np.ndarray,
    p_states: np.ndarray,
    grid: PhaseGrid,
) -> list[DiagnosticsRecord]:
    if len(records) != len(p_states) or len(records) != len(q_marginals):
        raise ConfigurationError("grid and limit runs have different output times")
    return [
        replace(record, l1_to_limit=marginal_l1(a, b, grid))
        for record, a, b in zip(records, q_marginals, p_states)
    ]


def theorem_envelopes(eps: float, t) -> tuple[np.ndarray, np.ndarray]:
    """Error shapes √ε(t+1+|log ε|^½) for the L²-in-time gap and
    √(εt)(t+1+|log ε|^½) + ε² for the pointwise marginal gap."""
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps must lie in (0, 1), got {eps}")
    t_arr = np.asarray(t, dtype=float)
    factor = t_arr + 1.0 + math.sqrt(abs(math.log(eps)))
    return math.sqrt(eps) * factor, np.sqrt(eps * t_arr) * factor + eps**2


def initial_data_report(
    q0: GridDistribution,
    eps: float,
    p_bar0: Optional[LimitDistribution] = None,
) -> InitialDataReport:
    """Quantities behind the moment, entropy and well-preparedness conditions on the data.

    ∫y²q₀ equals ε⁻²∫|m − M₀|²p₀ because N(0) = M₀.
    """
    record = compute_record(q0)
    gap = None
    v2 = None
    if p_bar0 is not None:
        gap = l1_to_limit(q0, p_bar0) / eps**2
        weights = q0.grid.dx * q0.grid.velocities.weights[None, :]
        v2 = float(np.sum(q0.grid.velocities.speed_sq[None, :] * p_bar0.values * weights))
    return InitialDataReport(
        mass=record.mass,
        moment_x1=record.moment_x1,
        moment_v2=record.moment_v2,
        moment_y2=record.moment_y2,
        entropy=record.entropy,
        limit_gap_scaled=gap,
        limit_moment_v2=v2,
    )


def to_original_variables(
    q: GridDistribution,
    model: KineticModel,
    m_edges: np.ndarray,
) -> np.ndarray:
    """Density p(x, v, m) on m-cells, moving each y-cell mass by cell overlap.

    The y-cell [y_a, y_b] occupies [N + εy_a, N + εy_b] in m.
    """
    edges = np.asarray(m_edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigurationError("m_edges must be strictly increasing")
    grid = q.grid
    adapted = model.adapted(q.time)
    eps = model.eps
    cell_mass = q.values * grid.dy
    widths = np.diff(edges)

    out = np.empty(q.values.shape[:2] + (edges.size - 1,))
    for i in range(grid.n_x):
        low = adapted[i][:, None] + eps * grid.y_edges[None, :-1]
        span = eps * grid.dy
        share = np.clip((edges[None, None, :] - low[..., None]) / span, 0.0, 1.0)
        cumulative = np.einsum("ky,kye->ke", cell_mass[i], share)
        out[i] = np.diff(cumulative, axis=-1) / widths[None, :]
    return out


def original_l1_gap(
    q: GridDistribution,
    model: KineticModel,
    m_edges: np.ndarray,
) -> OriginalGapReport:
    """‖p − p̄𝓜_{ε,N}‖₁ in m, next to the rescaled ‖q − q̄𝓜‖₁."""
    edges = np.asarray(m_edges, dtype=float)
    grid = q.grid
    density = to_original_variables(q, model, edges)
    bins = density * np.diff(edges)[None, None, :]

    adapted = model.adapted(q.time)
    cdf = special.ndtr((edges[None, None, :] - adapted[..., None]) / model.eps)
    reference = marginal_y(q)[..., None] * np.diff(cdf, axis=-1)
    weights = grid.dx * grid.velocities.weights[:, None]
    original = float(np.sum(np.abs(bins - reference) * weights[None, :, :]))
    return OriginalGapReport(original=original, rescaled=l1_to_maxwellian(q))


def write_records_csv(records: Iterable[DiagnosticsRecord], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for record in records:
            writer.writerow([_format_cell(getattr(record, name)) for name in CSV_COLUMNS])
    return path


def read_records_csv(path: Path) -> list[DiagnosticsRecord]:
    path = Path(path)
    try:
        with path.open("r", newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ConfigurationError(f"{path} does not start with the diagnostics header")
    records = []
    for number, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_COLUMNS):
            raise ConfigurationError(f"{path}:{number}: expected {len(CSV_COLUMNS)} columns")
        try:
            cells = {
                name: (None if cell == "" else float(cell)) for name, cell in zip(CSV_COLUMNS, row)
            }
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{number}: {exc}") from exc
        missing = [name for name, value in cells.items() if value is None and name != "l1_to_limit"]
        if missing:
            raise ConfigurationError(f"{path}:{number}: empty cells {', '.join(missing)}")
        records.append(DiagnosticsRecord(**cells))
    return records


def write_rate_fit(fit: RateFit, path: Path, *, label: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"functional": label, **fit.to_mapping()}
    path.write_text(yaml.safe_dump(payload, sort_keys=False), encoding="utf-8")
    return path


def _format_cell(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


@dataclass(frozen=True)
class LimitRecord:
    t: float
    mass: float
    moment_v2: float
    moment_x1: float


def limit_record(p: LimitDistribution) -> LimitRecord:
    grid = p.grid
    density = p.values * grid.dx * grid.velocities.weights[None, :]
    return LimitRecord(
        t=float(p.time),
        mass=float(density.sum()),
        moment_v2=float(np.sum(grid.velocities.speed_sq[None, :] * density)),
        moment_x1=float(np.sum(np.abs(grid.x_centers)[:, None] * density)),
    )


def write_sweep_csv(rows: Sequence[tuple[float, float, float]], path: Path) -> Path:
    """One row per ε, in sweep order."""
    return _write_table(SWEEP_COLUMNS, rows, path)


def read_sweep_csv(path: Path) -> dict[str, np.ndarray]:
    return _read_table(SWEEP_COLUMNS, path, "sweep")


def write_limit_csv(records: Iterable[LimitRecord], path: Path) -> Path:
    rows = ([getattr(record, name) for name in LIMIT_COLUMNS] for record in records)
    return _write_table(LIMIT_COLUMNS, rows, path)


def read_limit_csv(path: Path) -> list[LimitRecord]:
    table = _read_table(LIMIT_COLUMNS, path, "limit")
    count = table["t"].shape[0]
    return [LimitRecord(**{name: float(table[name][i]) for name in LIMIT_COLUMNS}) for i in range(count)]


def csv_kind(path: Path) -> str:
    """'diagnostics', 'limit' or 'sweep', judged by the header row."""
    try:
        with Path(path).open("r", newline="", encoding="utf-8") as handle:
            header = tuple(next(csv.reader(handle), []))
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    kinds = {CSV_COLUMNS: "diagnostics", LIMIT_COLUMNS: "limit", SWEEP_COLUMNS: "sweep"}
    if header not in kinds:
        raise ConfigurationError(f"{path}: unrecognised CSV header")
    return kinds[header]


def _write_table(columns: Sequence[str], rows: Iterable[Sequence[float]], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(value) for value in row])
    return path


def _read_table(columns: Sequence[str], path: Path, label: str) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        with path.open("r", newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != tuple(columns):
        raise ConfigurationError(f"{path} does not start with the {label} header")
    values = []
    for number, row in enumerate(rows[1:], start=2):
        if len(row) != len(columns):
            raise ConfigurationError(f"{path}:{number}: expected {len(columns)} columns")
        try:
            values.append([float(cell) for cell in row])
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{number}: {exc}") from exc
    table = np.array(values, dtype=float).reshape(-1, len(columns))
    return {name: table[:, i] for i, name in enumerate(columns)}
