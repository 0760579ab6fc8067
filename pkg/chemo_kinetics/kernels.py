"""
Tumbling kernels Λ(u, v, v') = λ₀·g(u)·K(v, v') and their Gaussian averages Λ̄.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Optional

import numpy as np
from scipy import special

from .errors import ConfigurationError, DomainError


RESPONSES = ("flat", "tanh", "exp")
REDISTRIBUTIONS = ("uniform", "table")
BOUND_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class VelocitySet:
    """Finite velocity nodes with quadrature weights standing in for V."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 2 or nodes.shape[0] != weights.shape[0] or nodes.shape[0] < 1:
            raise ConfigurationError("velocity nodes and weights must have matching lengths")
        if np.any(weights <= 0):
            raise ConfigurationError("velocity weights must be positive")
        if len({tuple(row) for row in nodes.round(14)}) != nodes.shape[0]:
            raise ConfigurationError("velocity nodes must be distinct")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform_line(cls, count: int = 8, v_max: float = 1.0) -> "VelocitySet":
        """Equally spaced nodes on [−v_max, v_max] with trapezoid weights."""
        if count < 2:
            raise ConfigurationError("a velocity line needs at least 2 nodes")
        if not v_max > 0:
            raise ConfigurationError("v_max must be > 0")
        nodes = np.linspace(-v_max, v_max, count)
        step = nodes[1] - nodes[0]
        weights = np.full(count, step)
        weights[[0, -1]] = 0.5 * step
        return cls(nodes=nodes, weights=weights)

    @classmethod
    def circle(cls, count: int = 16, speed: float = 1.0) -> "VelocitySet":
        """Equally spaced directions on the circle of radius `speed` (d = 2)."""
        if count < 3:
            raise ConfigurationError("a velocity circle needs at least 3 nodes")
        angle = 2.0 * np.pi * np.arange(count) / count
        nodes = speed * np.stack([np.cos(angle), np.sin(angle)], axis=-1)
        return cls(nodes=nodes, weights=np.full(count, 2.0 * np.pi * speed / count))

    @property
    def size(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def dim(self) -> int:
        return int(self.nodes.shape[1])

    @property
    def measure(self) -> float:
        return float(self.weights.sum())

    @property
    def speed_sq(self) -> np.ndarray:
        return np.sum(self.nodes * self.nodes, axis=-1)

    @property
    def v_max(self) -> float:
        return float(np.sqrt(self.speed_sq.max()))

    @property
    def values(self) -> np.ndarray:
        """Scalar node values; only meaningful in one dimension."""
        if self.dim != 1:
            raise ConfigurationError("scalar velocity values need a one-dimensional set")
        return self.nodes[:, 0]


@dataclass(frozen=True)
class KernelBounds:
    """sup ∫(1+|v'|²)Λ(u,v',v)dv' (moment) and sup ∫Λ(u,v,v')dv' (rate)."""

    moment_bound: float
    rate_bound: float

    def is_finite(self) -> bool:
        return math.isfinite(self.moment_bound) and math.isfinite(self.rate_bound)


@dataclass(frozen=True)
class KernelSpec:
    response: str = "flat"
    base_rate: float = 1.0
    chi: float = 0.5
    beta: float = 1.0
    cap: Optional[float] = None
    redistribution: str = "uniform"
    table: Optional[tuple[tuple[float, ...], ...]] = None
    declared_bounds: Optional[KernelBounds] = None

    def __post_init__(self) -> None:
        if self.response not in RESPONSES:
            raise ConfigurationError(
                f"[kernel] unknown response '{self.response}'; expected one of {', '.join(RESPONSES)}"
            )
        if not self.base_rate > 0:
            raise ConfigurationError("[kernel] base_rate must be > 0")
        if self.response == "tanh" and not 0.0 < self.chi < 1.0:
            raise ConfigurationError("[kernel] tanh response needs 0 < chi < 1")
        if self.response == "exp":
            if not self.beta > 0:
                raise ConfigurationError("[kernel] exp response needs beta > 0")
            if self.cap is not None and not self.cap >= 1.0:
                raise ConfigurationError("[kernel] exp cap_value must be >= 1")
        if self.redistribution not in REDISTRIBUTIONS:
            raise ConfigurationError(
                f"[kernel] unknown redistribution '{self.redistribution}'"
            )
        if self.redistribution == "table":
            table = np.asarray(self.table, dtype=float) if self.table is not None else None
            if table is None or table.ndim != 2 or table.shape[0] != table.shape[1]:
                raise ConfigurationError("[kernel] redistribution table must be square")
            if not np.allclose(table, table.T) or np.any(table <= 0):
                raise ConfigurationError("[kernel] redistribution table must be symmetric positive")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "KernelSpec":
        """Build from the `[kernel]` scenario section."""
        response = str(data.get("response", "flat")).strip().lower()
        table = data.get("table")
        cap = data.get("cap", data.get("cap_value"))
        try:
            return cls(
                response=response,
                base_rate=float(data.get("base_rate", 1.0)),
                chi=float(data.get("chi", 0.5)),
                beta=float(data.get("beta", 1.0)),
                cap=None if cap is None else float(cap),
                redistribution=str(data.get("redistribution", "uniform")).strip().lower(),
                table=None if table is None else tuple(tuple(float(c) for c in row) for row in table),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"[kernel] invalid value: {exc}") from exc

    def to_mapping(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "response": self.response,
            "base_rate": self.base_rate,
            "redistribution": self.redistribution,
        }
        if self.response == "tanh":
            data["chi"] = self.chi
        if self.response == "exp":
            data["beta"] = self.beta
            data["cap"] = self.cap
        if self.table is not None:
            data["table"] = [list(row) for row in self.table]
        return data

    def response_value(self, u) -> np.ndarray:
        """g(u)."""
        u_arr = np.asarray(u, dtype=float)
        if self.response == "flat":
            return np.ones_like(u_arr)
        if self.response == "tanh":
            return 1.0 + self.chi * np.tanh(u_arr)
        exponent = self.beta * u_arr
        if self.cap is not None:
            # saturates at cap_value
            exponent = np.minimum(exponent, math.log(self.cap))
        with np.errstate(over="ignore"):
            return np.exp(exponent)

    def sup_response(self) -> float:
        if self.response == "flat":
            return 1.0
        if self.response == "tanh":
            return 1.0 + self.chi
        return math.inf if self.cap is None else float(self.cap)

    def redistribution_matrix(self, velocities: VelocitySet) -> np.ndarray:
        """K[new, old] normalised so that Σ_new w_new K[new, old] = 1."""
        if self.redistribution == "uniform":
            raw = np.ones((velocities.size, velocities.size))
        else:
            raw = np.asarray(self.table, dtype=float)
            if raw.shape != (velocities.size, velocities.size):
                raise ConfigurationError(
                    f"[kernel] table is {raw.shape[0]}x{raw.shape[1]} "
                    f"but the velocity set has {velocities.size} nodes"
                )
        column = velocities.weights @ raw
        return raw / column[None, :]

    def derived_bounds(self, velocities: VelocitySet) -> KernelBounds:
        matrix = self.redistribution_matrix(velocities)
        peak = self.base_rate * self.sup_response()
        moment = (velocities.weights * (1.0 + velocities.speed_sq)) @ matrix
        rate = matrix @ velocities.weights
        return KernelBounds(
            moment_bound=float(peak * moment.max()),
            rate_bound=float(peak * rate.max()),
        )

    def bounds(self, velocities: VelocitySet) -> KernelBounds:
        if self.declared_bounds is not None:
            return self.declared_bounds
        return self.derived_bounds(velocities)


@dataclass(frozen=True)
class KernelBoundsReport:
    sampled: KernelBounds
    stored: KernelBounds
    n_samples: int

    @property
    def passed(self) -> bool:
        return _within(self.sampled.moment_bound, self.stored.moment_bound) and _within(
            self.sampled.rate_bound, self.stored.rate_bound
        )


def eval_kernel(
    spec: KernelSpec,
    velocities: VelocitySet,
    u,
    new_index,
    old_index,
) -> np.ndarray:
    """Λ(u, v_new, v_old) for node indices into the velocity set."""
    matrix = spec.redistribution_matrix(velocities)
    return spec.base_rate * spec.response_value(u) * matrix[new_index, old_index]


def exit_rate(spec: KernelSpec, velocities: VelocitySet, u, old_index) -> np.ndarray:
    """∫Λ(u, v', v_old) dv', the total tumbling rate out of v_old."""
    matrix = spec.redistribution_matrix(velocities)
    out = velocities.weights @ matrix
    return spec.base_rate * spec.response_value(u) * out[old_index]


def verify_kernel_bounds(
    spec: KernelSpec,
    velocities: VelocitySet,
    u_samples,
) -> KernelBoundsReport:
    """Dense-sample both integrability suprema and compare with the stored bounds."""
    u = np.ravel(np.asarray(u_samples, dtype=float))
    if u.size == 0:
        raise DomainError("u samples must be nonempty")
    stored = spec.bounds(velocities)
    if not stored.is_finite():
        raise ConfigurationError(
            f"[kernel] stored bounds are not finite (response '{spec.response}' "
            "is unbounded without a cap)"
        )

    matrix = spec.redistribution_matrix(velocities)
    weights = velocities.weights
    rates = spec.base_rate * spec.response_value(u)[:, None, None] * matrix[None, :, :]
    moment = np.einsum("k,unk->uk", weights * (1.0 + velocities.speed_sq), rates)
    rate = np.einsum("unk,k->un", rates, weights)
    report = KernelBoundsReport(
        sampled=KernelBounds(float(moment.max()), float(rate.max())),
        stored=stored,
        n_samples=int(u.size),
    )
    if not report.passed:
        raise ConfigurationError(
            "[kernel] stored bound exceeded: "
            f"sampled moment {report.sampled.moment_bound:.6g} vs {stored.moment_bound:.6g}, "
            f"sampled rate {report.sampled.rate_bound:.6g} vs {stored.rate_bound:.6g}"
        )
    return report


class LimitKernel:
    """Λ̄(m, v, v') = ∫Λ(y − m, v, v')𝓜(y)dy with a cached response average."""

    def __init__(
        self,
        spec: KernelSpec,
        velocities: VelocitySet,
        quadrature_order: int = 80,
        m_max: float = 8.0,
        m_step: float = 2.5e-4,
    ):
        if quadrature_order < 20:
            raise ConfigurationError("[kernel] quadrature_order must be >= 20")
        if not (m_max > 0 and m_step > 0):
            raise ConfigurationError("[kernel] cache range and step must be positive")
        self.spec = spec
        self.velocities = velocities
        self.quadrature_order = quadrature_order

        # physicist Gauss–Hermite: ∫f(y)𝓜(y)dy = Σ w_i f(√2 x_i)/√π
        nodes, weights = np.polynomial.hermite.hermgauss(quadrature_order)
        self._nodes = math.sqrt(2.0) * nodes
        self._weights = weights / math.sqrt(math.pi)

        count = int(round(2.0 * m_max / m_step)) + 1
        self.m_grid = np.linspace(-m_max, m_max, count)
        self.cache = self.averaged_response(self.m_grid)
        self.matrix = spec.redistribution_matrix(velocities)
        for array in (self.m_grid, self.cache, self.matrix):
            array.setflags(write=False)

    def averaged_response(self, m, spread: float = 1.0) -> np.ndarray:
        """ḡ(m) = E[g(spread·Y − m)], Y standard normal."""
        m_arr = np.asarray(m, dtype=float)
        spec = self.spec
        if spec.response == "flat":
            return np.ones_like(m_arr)
        if spec.response == "exp":
            return _exp_response_average(spec, m_arr, spread)
        shifted = spread * self._nodes - m_arr[..., None]
        return spec.response_value(shifted) @ self._weights

    def interpolated_response(self, m) -> np.ndarray:
        """ḡ from the cache; points outside the cached range use the quadrature."""
        m_arr = np.asarray(m, dtype=float)
        values = np.interp(m_arr, self.m_grid, self.cache)
        outside = (m_arr < self.m_grid[0]) | (m_arr > self.m_grid[-1])
        if np.any(outside):
            values = np.where(outside, self.averaged_response(m_arr), values)
        return values

    def bounds(self) -> KernelBounds:
        return self.spec.bounds(self.velocities)


def limit_kernel_value(lk: LimitKernel, m, new_index, old_index) -> np.ndarray:
    """Λ̄(m, v_new, v_old) by Gauss–Hermite quadrature."""
    return lk.spec.base_rate * lk.averaged_response(m) * lk.matrix[new_index, old_index]


def corrected_limit_kernel(
    lk: LimitKernel,
    m,
    new_index,
    old_index,
    alpha: float,
    eps: float,
) -> np.ndarray:
    """Kernel for methylation noise ε^α∂²_m: the Gaussian has standard deviation ε^{α−1}."""
    if not alpha > 1.0:
        raise DomainError(f"alpha must be > 1, got {alpha}")
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps must lie in (0, 1), got {eps}")
    spread = eps ** (alpha - 1.0)
    return (
        lk.spec.base_rate
        * lk.averaged_response(m, spread=spread)
        * lk.matrix[new_index, old_index]
    )


def _exp_response_average(spec: KernelSpec, m: np.ndarray, spread: float) -> np.ndarray:
    """E[min(e^{β(Y − m)}, cap)] for Y ~ N(0, spread²), via the normal CDF."""
    beta = spec.beta
    log_mean = -beta * m + 0.5 * (beta * spread) ** 2
    if spec.cap is None:
        return np.exp(log_mean)
    threshold = m + math.log(spec.cap) / beta
    below = np.exp(log_mean + special.log_ndtr(threshold / spread - beta * spread))
    above = spec.cap * special.ndtr(-threshold / spread)
    return below + above


def _within(sampled: float, stored: float) -> bool:
    return sampled <= stored * (1.0 + BOUND_RTOL)
