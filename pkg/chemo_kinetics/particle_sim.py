"""
Velocity-jump particle simulation of the original (x, v, m) model.

Particles fly straight, relax their methylation level m towards the signal by an
exact Ornstein–Uhlenbeck update and tumble by thinning against the stored
tumbling-rate bound.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Mapping, Optional

import numpy as np
from scipy import stats

from .errors import BoundViolationError, ConfigurationError, DomainError, StatisticsError
from .grid_solver import GridDistribution, PhaseGrid, SpatialProfile
from .kernels import KernelSpec, VelocitySet
from .signals import AdaptedSignalState, SignalSpec, adapted_signal, eval_signal


SUBSTEPS_PER_EPS = 20
OUT_OF_RANGE_LIMIT = 0.01
ACCEPT_SLACK = 1e-12
CSV_LIMIT = 10_000


@dataclass(frozen=True)
class ParticleConfig:
    count: int = 100_000
    workers: int = 1
    substeps_per_eps: int = SUBSTEPS_PER_EPS
    noise_exponent: float = 1.0
    record_intervals: bool = False

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ConfigurationError("[particles] N_p must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("[particles] workers must be >= 1")
        if self.substeps_per_eps < 1:
            raise ConfigurationError("[particles] substeps_per_eps must be >= 1")
        if not self.noise_exponent >= 1.0:
            raise ConfigurationError("[particles] noise_exponent must be >= 1")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ParticleConfig":
        try:
            return cls(
                count=int(data.get("N_p", data.get("count", 100_000))),
                workers=int(data.get("workers", 1)),
                substeps_per_eps=int(data.get("substeps_per_eps", SUBSTEPS_PER_EPS)),
                noise_exponent=float(data.get("noise_exponent", 1.0)),
                record_intervals=bool(data.get("record_intervals", False)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"[particles] invalid value: {exc}") from exc


class ParticleEnsemble:
    """Particle state (x, v, m) with one Philox stream per worker slice."""

    def __init__(
        self,
        x: np.ndarray,
        v_index: np.ndarray,
        m: np.ndarray,
        velocities: VelocitySet,
        *,
        eps: float,
        master_seed: int,
        streams: list[np.random.Generator],
        time: float = 0.0,
        noise_exponent: float = 1.0,
        next_candidate: Optional[np.ndarray] = None,
        last_tumble: Optional[np.ndarray] = None,
    ):
        count = int(v_index.shape[0])
        if x.shape[0] != count or m.shape[0] != count:
            raise ConfigurationError("particle arrays must have the same length")
        expected = (count,) if velocities.dim == 1 else (count, velocities.dim)
        if x.shape != expected:
            raise ConfigurationError("particle positions do not match the velocity dimension")
        if not streams or len(streams) > count:
            raise ConfigurationError("need between 1 and N_p random streams")
        self.x = np.array(x, dtype=float)
        self.v_index = np.array(v_index, dtype=np.int64)
        self.m = np.array(m, dtype=float)
        self.velocities = velocities
        self.eps = float(eps)
        self.master_seed = int(master_seed)
        self.streams = streams
        self.time = float(time)
        self.noise_exponent = float(noise_exponent)
        self.next_candidate = (
            np.full(count, np.nan) if next_candidate is None else np.array(next_candidate, dtype=float)
        )
        self.last_tumble = (
            np.full(count, self.time) if last_tumble is None else np.array(last_tumble, dtype=float)
        )
        self.intervals: list[np.ndarray] = []
        self.tumbles = 0
        self._trace: list[str] = []

    @property
    def count(self) -> int:
        return int(self.v_index.shape[0])

    @property
    def dim(self) -> int:
        return self.velocities.dim

    @property
    def workers(self) -> int:
        return len(self.streams)

    @property
    def v(self) -> np.ndarray:
        nodes = self.velocities.nodes
        return nodes[self.v_index, 0] if self.dim == 1 else nodes[self.v_index]

    @property
    def trace(self) -> list[str]:
        return list(self._trace)

    def _log(self, message: str) -> None:
        self._trace.append(message)

    def slices(self) -> list[slice]:
        """Contiguous worker slices, in worker order."""
        edges = np.linspace(0, self.count, self.workers + 1).round().astype(int)
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def recorded_intervals(self, start_before: Optional[float] = None) -> np.ndarray:
        """Completed inter-tumble times, optionally only those that started before a time."""
        if not self.intervals:
            return np.empty(0)
        pairs = np.concatenate(self.intervals)
        if start_before is not None:
            pairs = pairs[pairs[:, 0] < start_before]
        return pairs[:, 1]


@dataclass(frozen=True)
class EnsembleMoments:
    v2: float
    x1: float
    y2: float


@dataclass(frozen=True)
class HistogramResult:
    distribution: GridDistribution
    out_of_range_mass: float
    counts: np.ndarray

    @property
    def flagged(self) -> bool:
        return self.out_of_range_mass > OUT_OF_RANGE_LIMIT


def make_streams(master_seed: int, workers: int) -> list[np.random.Generator]:
    """Independent counter-based streams derived from (master seed, worker index)."""
    children = np.random.SeedSequence(master_seed).spawn(workers)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def sample_well_prepared(
    count: int,
    spatial_profile: SpatialProfile,
    signal_spec: SignalSpec,
    eps: float,
    seed: int,
    *,
    velocities: Optional[VelocitySet] = None,
    workers: int = 1,
    noise_exponent: float = 1.0,
) -> ParticleEnsemble:
    """x from the profile, v with probability w_v/|V|, m = M₀(x) + ε·ξ."""
    if count < 1:
        raise DomainError("N_p must be >= 1")
    if eps < 0:
        raise DomainError(f"eps must be >= 0, got {eps}")
    if velocities is None:
        velocities = (
            VelocitySet.uniform_line() if signal_spec.dim == 1 else VelocitySet.circle()
        )
    if velocities.dim != signal_spec.dim:
        raise ConfigurationError("velocity set and signal have different dimensions")

    streams = make_streams(seed, workers)
    shape = (count,) if signal_spec.dim == 1 else (count, signal_spec.dim)
    x = np.empty(shape)
    v_index = np.empty(count, dtype=np.int64)
    m = np.empty(count)
    probabilities = velocities.weights / velocities.measure

    ensemble = ParticleEnsemble(
        x, v_index, m, velocities,
        eps=eps, master_seed=seed, streams=streams, noise_exponent=noise_exponent,
    )
    for part, rng in zip(ensemble.slices(), streams):
        n = part.stop - part.start
        if signal_spec.dim == 1:
            pos = spatial_profile.sample(rng, n)
        else:
            pos = np.stack([spatial_profile.sample(rng, n) for _ in range(signal_spec.dim)], axis=-1)
        ensemble.x[part] = pos
        ensemble.v_index[part] = rng.choice(velocities.size, size=n, p=probabilities)
        ensemble.m[part] = eval_signal(signal_spec, 0.0, pos) + eps * rng.standard_normal(n)
    ensemble._log(f"sampled {count} particles, eps={eps:g}, seed={seed}, workers={workers}")
    return ensemble


def evolve(
    ens: ParticleEnsemble,
    dt_macro: float,
    signal_spec: SignalSpec,
    kernel_spec: KernelSpec,
    *,
    substeps_per_eps: int = SUBSTEPS_PER_EPS,
    record_intervals: bool = False,
) -> ParticleEnsemble:
    """Advance every particle by dt_macro in substeps δt = ε/substeps_per_eps."""
    if not ens.eps > 0:
        raise DomainError("evolve needs eps > 0")
    if dt_macro < 0:
        raise DomainError("dt_macro must be >= 0")
    if signal_spec.dim != ens.dim:
        raise ConfigurationError("signal and ensemble have different dimensions")

    substep = ens.eps / substeps_per_eps
    ratio = dt_macro / substep
    n_sub = int(round(ratio))
    if abs(ratio - n_sub) > 1e-9 * max(1.0, ratio):
        raise ConfigurationError(
            f"dt_macro = {dt_macro:g} is not a multiple of the substep eps/{substeps_per_eps} = {substep:g}"
        )
    bound = kernel_spec.bounds(ens.velocities).rate_bound
    if not math.isfinite(bound) or not bound > 0:
        raise ConfigurationError("[kernel] thinning needs a finite positive rate bound")

    stepper = _SliceStepper(ens, signal_spec, kernel_spec, substep, bound, record_intervals)
    t0 = ens.time
    parts = ens.slices()
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        results = list(
            pool.map(lambda item: stepper.advance(item[0], item[1], t0, n_sub), zip(parts, ens.streams))
        )
    for tumbles, intervals in results:
        ens.tumbles += tumbles
        if record_intervals and intervals.size:
            ens.intervals.append(intervals)

    ens.time = t0 + n_sub * substep
    ens._log(
        f"evolved to t={ens.time:g} in {n_sub} substeps; "
        f"{sum(count for count, _ in results)} tumbles"
    )
    return ens


class _SliceStepper:
    def __init__(
        self,
        ens: ParticleEnsemble,
        signal_spec: SignalSpec,
        kernel_spec: KernelSpec,
        substep: float,
        bound: float,
        record_intervals: bool,
    ):
        self.ens = ens
        self.signal = signal_spec
        self.kernel = kernel_spec
        self.substep = substep
        self.bound = bound
        self.record = record_intervals

        matrix = kernel_spec.redistribution_matrix(ens.velocities)
        weights = ens.velocities.weights
        self.out_rate = kernel_spec.base_rate * (weights @ matrix)
        # cumulative law of the new velocity given the old one, rows indexed by old
        law = (matrix * weights[:, None]).T
        self.cdf = np.cumsum(law / law.sum(axis=1, keepdims=True), axis=1)

        eps = ens.eps
        self.decay = math.exp(-substep / eps)
        self.noise = math.sqrt(eps ** (ens.noise_exponent + 1.0) * -math.expm1(-2.0 * substep / eps))

    def advance(self, part: slice, rng: np.random.Generator, t0: float, n_sub: int):
        ens = self.ens
        x = ens.x[part].copy()
        v_index = ens.v_index[part].copy()
        m = ens.m[part].copy()
        clock = ens.next_candidate[part].copy()
        last = ens.last_tumble[part].copy()
        nodes = ens.velocities.nodes
        eps = ens.eps

        fresh = np.isnan(clock)
        if np.any(fresh):
            clock[fresh] = t0 + rng.exponential(1.0 / self.bound, size=int(fresh.sum()))

        tumbles = 0
        intervals: list[np.ndarray] = []
        for k in range(n_sub):
            t = t0 + k * self.substep
            t_next = t0 + (k + 1) * self.substep
            vel = nodes[v_index, 0] if ens.dim == 1 else nodes[v_index]

            # M frozen at the substep midpoint
            x_mid = x + 0.5 * self.substep * vel
            target = eval_signal(self.signal, t + 0.5 * self.substep, x_mid)
            x = x + self.substep * vel
            m = target + (m - target) * self.decay + self.noise * rng.standard_normal(m.shape[0])

            due = clock < t_next
            while np.any(due):
                idx = np.flatnonzero(due)
                u = (m[idx] - target[idx]) / eps
                rate = self.out_rate[v_index[idx]] * self.kernel.response_value(u)
                accept = rate / self.bound
                if np.any(accept > 1.0 + ACCEPT_SLACK):
                    raise BoundViolationError(
                        f"tumbling rate {float(accept.max()) * self.bound:.6g} exceeds "
                        f"the stored bound {self.bound:.6g}"
                    )
                hit = idx[rng.random(idx.size) < accept]
                if hit.size:
                    draws = rng.random(hit.size)
                    v_index[hit] = np.sum(draws[:, None] > self.cdf[v_index[hit]], axis=1)
                    np.minimum(v_index, ens.velocities.size - 1, out=v_index)
                    if self.record:
                        intervals.append(np.stack([last[hit], clock[hit] - last[hit]], axis=-1))
                    last[hit] = clock[hit]
                    tumbles += int(hit.size)
                clock[idx] += rng.exponential(1.0 / self.bound, size=idx.size)
                due = clock < t_next

        ens.x[part] = x
        ens.v_index[part] = v_index
        ens.m[part] = m
        ens.next_candidate[part] = clock
        ens.last_tumble[part] = last
        recorded = np.concatenate(intervals) if intervals else np.empty((0, 2))
        return tumbles, recorded


def rescaled_histogram(
    ens: ParticleEnsemble,
    grid: PhaseGrid,
    state: AdaptedSignalState,
    signal_spec: SignalSpec,
) -> HistogramResult:
    """Bin particles in (x, v, y) with y = (m − N(t,x,v))/ε, as a density."""
    if ens.dim != 1:
        raise ConfigurationError("histograms are defined on the one-dimensional grid only")
    if ens.velocities.size != grid.velocities.size or not np.allclose(
        ens.velocities.nodes, grid.velocities.nodes
    ):
        raise ConfigurationError("ensemble and grid use different velocity sets")
    if not math.isclose(ens.eps, state.eps, rel_tol=1e-12):
        raise ConfigurationError("ensemble eps differs from the adapted-signal eps")

    y = (ens.m - adapted_signal(state, signal_spec, ens.time, ens.x, ens.v)) / ens.eps
    ix = np.floor(ens.x / grid.dx).astype(np.int64)
    iy = np.floor((y + grid.y_max) / grid.dy).astype(np.int64)
    inside = (ix >= 0) & (ix < grid.n_x) & (iy >= 0) & (iy < grid.n_y)

    flat = (ix[inside] * grid.velocities.size + ens.v_index[inside]) * grid.n_y + iy[inside]
    size = grid.n_x * grid.velocities.size * grid.n_y
    counts = np.bincount(flat, minlength=size).reshape(grid.n_x, grid.velocities.size, grid.n_y)
    density = counts / (ens.count * grid.cell_weights)
    outside = float(ens.count - int(inside.sum())) / ens.count
    result = HistogramResult(
        distribution=GridDistribution(values=density, grid=grid, time=ens.time),
        out_of_range_mass=outside,
        counts=counts,
    )
    if result.flagged:
        ens._log(f"warning: {100 * outside:.2f}% of particles fall outside the histogram range")
    return result


def ensemble_moments(ens: ParticleEnsemble, signal_spec: SignalSpec) -> EnsembleMoments:
    """Mean |v|², mean |x| and mean (m − M)²/ε²."""
    v = ens.v
    x = ens.x
    speed_sq = v * v if ens.dim == 1 else np.sum(v * v, axis=-1)
    distance = np.abs(x) if ens.dim == 1 else np.linalg.norm(x, axis=-1)
    if ens.eps > 0:
        offset = (ens.m - eval_signal(signal_spec, ens.time, x)) / ens.eps
        y2 = float(np.mean(offset * offset))
    else:
        y2 = 0.0
    return EnsembleMoments(v2=float(np.mean(speed_sq)), x1=float(np.mean(distance)), y2=y2)


def exponential_ks_test(intervals: np.ndarray, rate: float, alpha: float = 0.01):
    """KS test of inter-tumble times against Exp(rate); returns (statistic, critical, p-value)."""
    sample = np.asarray(intervals, dtype=float)
    if sample.size < 2:
        raise StatisticsError("need at least two inter-tumble intervals")
    result = stats.kstest(sample, "expon", args=(0.0, 1.0 / rate))
    critical = stats.kstwo.ppf(1.0 - alpha, sample.size)
    return float(result.statistic), float(critical), float(result.pvalue)
