"""
Effective signal M(t,x), adapted signal N(t,x,v) and their path-wise derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Mapping, Optional

import numpy as np

from .errors import ConfigurationError, DomainError, NumericalError


FAMILIES = ("constant", "linear", "bump")
EVAL_MODES = ("closed_form", "quadrature")
LEMMA_TOLERANCE = 1e-8

# e^{-40} is below every tolerance used here; the weighted integral is cut there.
SIGMA_CUTOFF = 40.0


@dataclass(frozen=True)
class SignalBounds:
    sup_value: float
    sup_gradient: float
    sup_time: float
    sup_second: float

    @property
    def lipschitz_x(self) -> float:
        return self.sup_gradient

    @property
    def w2inf(self) -> float:
        """‖M‖ in W^{2,∞}: sup|M| + sup of first derivatives + sup of second derivatives."""
        return self.sup_value + max(self.sup_gradient, self.sup_time) + self.sup_second

    def is_finite(self) -> bool:
        return all(
            math.isfinite(value)
            for value in (self.sup_value, self.sup_gradient, self.sup_time, self.sup_second)
        )


@dataclass(frozen=True)
class SignalSpec:
    """Closed-form effective signal families with analytic derivative bounds."""

    family: str
    dim: int = 1
    value: float = 0.0
    gradient: tuple[float, ...] = (0.0,)
    amplitude: float = 1.0
    width: float = 1.0
    speed: float = 0.0
    center: tuple[float, ...] = (0.0,)
    extent: float = 20.0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigurationError(
                f"[signal] unknown family '{self.family}'; expected one of {', '.join(FAMILIES)}"
            )
        if self.dim not in (1, 2):
            raise ConfigurationError(f"[signal] dim must be 1 or 2, got {self.dim}")
        if self.family == "linear" and len(self.gradient) != self.dim:
            raise ConfigurationError(
                f"[signal] gradient has {len(self.gradient)} components for dim={self.dim}"
            )
        if self.family == "bump":
            if len(self.center) != self.dim:
                raise ConfigurationError(
                    f"[signal] center has {len(self.center)} components for dim={self.dim}"
                )
            if not self.amplitude > 0:
                raise ConfigurationError("[signal] bump amplitude must be > 0")
            if not self.width > 0:
                raise ConfigurationError("[signal] bump width must be > 0")
        if not self.extent > 0:
            raise ConfigurationError("[signal] extent must be > 0")

    @classmethod
    def constant(cls, value: float, dim: int = 1) -> "SignalSpec":
        return cls(family="constant", dim=dim, value=float(value))

    @classmethod
    def linear(cls, gradient: float | tuple[float, ...], extent: float = 20.0) -> "SignalSpec":
        grad = tuple(float(g) for g in np.atleast_1d(gradient))
        return cls(family="linear", dim=len(grad), gradient=grad, extent=extent)

    @classmethod
    def bump(
        cls,
        amplitude: float,
        width: float,
        speed: float = 0.0,
        center: float | tuple[float, ...] = 0.0,
    ) -> "SignalSpec":
        ctr = tuple(float(c) for c in np.atleast_1d(center))
        return cls(
            family="bump",
            dim=len(ctr),
            amplitude=float(amplitude),
            width=float(width),
            speed=float(speed),
            center=ctr,
        )

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SignalSpec":
        """Build from the `[signal]` scenario section (keys family, params, dim)."""
        family = str(data.get("family", "")).strip().lower()
        dim = int(data.get("dim", 1))
        params = dict(data.get("params") or {})
        aliases = {"linearinx": "linear", "travelingbump": "bump"}
        family = aliases.get(family, family)
        try:
            if family == "constant":
                return cls(family=family, dim=dim, value=float(params.get("c", 0.0)))
            if family == "linear":
                grad = tuple(float(g) for g in np.atleast_1d(params.get("a", [0.0] * dim)))
                return cls(
                    family=family,
                    dim=dim,
                    gradient=grad,
                    extent=float(params.get("extent", 20.0)),
                )
            if family == "bump":
                ctr = tuple(float(c) for c in np.atleast_1d(params.get("x0", [0.0] * dim)))
                return cls(
                    family=family,
                    dim=dim,
                    amplitude=float(params.get("A", 1.0)),
                    width=float(params.get("w", 1.0)),
                    speed=float(params.get("c", 0.0)),
                    center=ctr,
                    extent=float(params.get("extent", 20.0)),
                )
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"[signal] invalid params: {exc}") from exc
        raise ConfigurationError(
            f"[signal] unknown family '{family}'; expected one of {', '.join(FAMILIES)}"
        )

    def to_mapping(self) -> dict[str, Any]:
        if self.family == "constant":
            params: dict[str, Any] = {"c": self.value}
        elif self.family == "linear":
            params = {"a": list(self.gradient), "extent": self.extent}
        else:
            params = {
                "A": self.amplitude,
                "w": self.width,
                "c": self.speed,
                "x0": list(self.center),
                "extent": self.extent,
            }
        return {"family": self.family, "dim": self.dim, "params": params}

    @cached_property
    def bounds(self) -> SignalBounds:
        return signal_bounds(self)


@dataclass(frozen=True)
class AdaptedSignalState:
    eps: float
    mode: str = "closed_form"
    n_points: int = 16
    rtol: float = 1e-10
    max_refinements: int = 8

    def __post_init__(self) -> None:
        if not self.eps > 0:
            raise DomainError(f"eps must be > 0, got {self.eps}")
        if self.mode not in EVAL_MODES:
            raise ConfigurationError(
                f"unknown eval mode '{self.mode}'; expected one of {', '.join(EVAL_MODES)}"
            )
        if self.n_points < 2:
            raise ConfigurationError("quadrature needs at least 2 points per panel")


@dataclass(frozen=True)
class LemmaSamples:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    v_alt: np.ndarray

    def __len__(self) -> int:
        return int(np.asarray(self.t).shape[0])


@dataclass(frozen=True)
class LemmaReport:
    max_ratio_lip: float
    max_ratio_decay: float
    n_samples: int
    tolerance: float = LEMMA_TOLERANCE
    worst_lip: Optional[dict[str, float]] = field(default=None, compare=False)
    worst_decay: Optional[dict[str, float]] = field(default=None, compare=False)

    @property
    def passed(self) -> bool:
        limit = 1.0 + self.tolerance
        return self.max_ratio_lip <= limit and self.max_ratio_decay <= limit


def signal_bounds(spec: SignalSpec) -> SignalBounds:
    if spec.family == "constant":
        return SignalBounds(abs(spec.value), 0.0, 0.0, 0.0)
    if spec.family == "linear":
        grad = np.asarray(spec.gradient, dtype=float)
        # sup|a·x| over the box [0, extent]^d
        return SignalBounds(
            sup_value=float(np.sum(np.abs(grad)) * spec.extent),
            sup_gradient=float(np.linalg.norm(grad)),
            sup_time=0.0,
            sup_second=0.0,
        )
    amp, width, speed = spec.amplitude, spec.width, abs(spec.speed)
    first = amp * math.exp(-0.5) / width
    return SignalBounds(
        sup_value=amp,
        sup_gradient=first,
        sup_time=speed * first,
        sup_second=amp / width**2 * max(1.0, speed, speed**2),
    )


def eval_signal(spec: SignalSpec, t, x) -> np.ndarray:
    """M(t, x), exact for every family."""
    t_arr = _check_time(t)
    pts = _as_points(x, spec.dim)
    shape = np.broadcast_shapes(t_arr.shape, pts.shape[:-1])
    if spec.family == "constant":
        return np.full(shape, spec.value, dtype=float)
    if spec.family == "linear":
        values = pts @ np.asarray(spec.gradient, dtype=float)
        return np.broadcast_to(values, shape).copy()
    z = _bump_offset(spec, t_arr, pts)
    return spec.amplitude * np.exp(-0.5 * np.sum(z * z, axis=-1) / spec.width**2)


def gradient_x(spec: SignalSpec, t, x) -> np.ndarray:
    """∇ₓM(t, x), last axis of length d."""
    t_arr = _check_time(t)
    pts = _as_points(x, spec.dim)
    shape = np.broadcast_shapes(t_arr.shape, pts.shape[:-1]) + (spec.dim,)
    if spec.family == "constant":
        return np.zeros(shape)
    if spec.family == "linear":
        return np.broadcast_to(np.asarray(spec.gradient, dtype=float), shape).copy()
    z = _bump_offset(spec, t_arr, pts)
    m = spec.amplitude * np.exp(-0.5 * np.sum(z * z, axis=-1) / spec.width**2)
    return -z / spec.width**2 * m[..., None]


def time_derivative(spec: SignalSpec, t, x) -> np.ndarray:
    """∂ₜM(t, x)."""
    if spec.family != "bump":
        t_arr = _check_time(t)
        pts = _as_points(x, spec.dim)
        return np.zeros(np.broadcast_shapes(t_arr.shape, pts.shape[:-1]))
    # the bump travels along the first axis
    return -spec.speed * gradient_x(spec, t, x)[..., 0]


def path_derivative(spec: SignalSpec, t, x, v) -> np.ndarray:
    """D_tM = ∂ₜM + v·∇ₓM."""
    vel = _as_points(v, spec.dim)
    grad = gradient_x(spec, t, x)
    return time_derivative(spec, t, x) + np.sum(vel * grad, axis=-1)


def adapted_signal(state: AdaptedSignalState, spec: SignalSpec, t, x, v) -> np.ndarray:
    """N(t,x,v) solving D_tN = (M − N)/ε with N(0,x,v) = M(0,x)."""
    t_arr = _check_time(t)
    pts = _as_points(x, spec.dim)
    vel = _as_points(v, spec.dim)
    eps = state.eps
    shape = np.broadcast_shapes(t_arr.shape, pts.shape[:-1], vel.shape[:-1])

    if spec.family == "constant":
        return np.full(shape, spec.value, dtype=float)
    if state.mode == "closed_form" and spec.family == "linear":
        grad = np.asarray(spec.gradient, dtype=float)
        decay = -np.expm1(-t_arr / eps)
        values = pts @ grad - eps * (vel @ grad) * decay
        return np.broadcast_to(values, shape).copy()

    # formula for N after σ = (t − s)/ε:
    # N = M(0, x − tv) e^{-t/ε} + ∫_0^{t/ε} M(t − εσ, x − εσv) e^{-σ} dσ
    start = eval_signal(spec, 0.0, pts - t_arr[..., None] * vel) * np.exp(-t_arr / eps)
    integral = _weighted_path_integral(
        lambda s, y, w: eval_signal(spec, s, y),
        state,
        t_arr,
        pts,
        vel,
        scale=max(spec.bounds.sup_value, 1.0),
    )
    return np.broadcast_to(start + integral, shape).copy()


def adapted_path_derivative(state: AdaptedSignalState, spec: SignalSpec, t, x, v) -> np.ndarray:
    """D_tN = (M − N)/ε."""
    t_arr = _check_time(t)
    pts = _as_points(x, spec.dim)
    vel = _as_points(v, spec.dim)
    eps = state.eps
    shape = np.broadcast_shapes(t_arr.shape, pts.shape[:-1], vel.shape[:-1])

    if spec.family == "constant":
        return np.zeros(shape)
    if state.mode == "closed_form" and spec.family == "linear":
        grad = np.asarray(spec.gradient, dtype=float)
        values = -(vel @ grad) * np.expm1(-t_arr / eps)
        return np.broadcast_to(values, shape).copy()

    # (M − N)/ε = ∫_0^{t/ε} D_tM(t − εσ, x − εσv) e^{-σ} dσ, free of cancellation
    bounds = spec.bounds
    integral = _weighted_path_integral(
        lambda s, y, w: path_derivative(spec, s, y, w),
        state,
        t_arr,
        pts,
        vel,
        scale=max(bounds.sup_time + bounds.sup_gradient, 1.0),
    )
    return np.broadcast_to(integral, shape).copy()


def sample_lemma_points(
    n: int,
    rng: np.random.Generator,
    spec: SignalSpec,
    *,
    t_max: float = 4.0,
    v_max: float = 1.0,
) -> LemmaSamples:
    if n < 1:
        raise DomainError("sample set must be nonempty")
    t = rng.uniform(0.0, t_max, size=n)
    x = rng.uniform(0.0, spec.extent, size=(n, spec.dim))
    if spec.family == "bump":
        # keep samples where the bump actually varies
        x = np.asarray(spec.center) + rng.uniform(-4.0, 4.0, size=(n, spec.dim)) * spec.width
        x[:, 0] += spec.speed * t
    return LemmaSamples(
        t=t,
        x=x if spec.dim > 1 else x[:, 0],
        v=_sample_ball(rng, n, spec.dim, v_max),
        v_alt=_sample_ball(rng, n, spec.dim, v_max),
    )


def verify_lemma_N(
    state: AdaptedSignalState,
    spec: SignalSpec,
    samples: LemmaSamples,
) -> LemmaReport:
    """Ratios of both sides of the Lipschitz-in-v and the D_tN → D_tM estimates."""
    if len(samples) == 0:
        raise DomainError("sample set must be nonempty")
    bounds = spec.bounds
    if not bounds.is_finite():
        raise ConfigurationError("[signal] W^{2,inf} bounds are not finite")

    eps = state.eps
    t = np.asarray(samples.t, dtype=float)
    v = _as_points(samples.v, spec.dim)
    v_alt = _as_points(samples.v_alt, spec.dim)

    n_v = adapted_signal(state, spec, t, samples.x, samples.v)
    n_alt = adapted_signal(state, spec, t, samples.x, samples.v_alt)
    gap = np.linalg.norm(v - v_alt, axis=-1)
    lip_num = np.abs(n_v - n_alt)
    lip_den = bounds.lipschitz_x * eps * gap
    lip_ratio = _safe_ratio(lip_num, lip_den)
    lip_ratio[gap == 0.0] = 0.0

    decay_num = np.abs(
        path_derivative(spec, t, samples.x, samples.v)
        - adapted_path_derivative(state, spec, t, samples.x, samples.v)
    )
    decay_den = (
        4.0 * bounds.w2inf * (eps + np.exp(-t / eps)) * (1.0 + np.sum(v * v, axis=-1))
    )
    decay_ratio = _safe_ratio(decay_num, decay_den)

    i_lip = int(np.argmax(lip_ratio))
    i_decay = int(np.argmax(decay_ratio))
    return LemmaReport(
        max_ratio_lip=float(lip_ratio[i_lip]),
        max_ratio_decay=float(decay_ratio[i_decay]),
        n_samples=len(samples),
        worst_lip={"t": float(t[i_lip]), "ratio": float(lip_ratio[i_lip])},
        worst_decay={"t": float(t[i_decay]), "ratio": float(decay_ratio[i_decay])},
    )


def _weighted_path_integral(
    integrand: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
    state: AdaptedSignalState,
    t: np.ndarray,
    x: np.ndarray,
    v: np.ndarray,
    *,
    scale: float,
) -> np.ndarray:
    """∫_0^{min(t/ε, cutoff)} f(t − εσ, x − εσv, v) e^{-σ} dσ by composite Gauss–Legendre.

    Panels are doubled until two successive rules agree to `rtol * scale`.
    """
    eps = state.eps
    t_b, x_b, v_b = _broadcast_path(t, x, v)
    upper = np.minimum(t_b / eps, SIGMA_CUTOFF)
    nodes, weights = np.polynomial.legendre.leggauss(state.n_points)

    def rule(panels: int) -> np.ndarray:
        # nodes on [0, 1], split into equal panels
        offsets = np.arange(panels)[:, None]
        unit = ((offsets + 0.5 * (nodes[None, :] + 1.0)) / panels).ravel()
        unit_w = np.tile(0.5 * weights / panels, panels)
        sigma = upper[..., None] * unit
        s = t_b[..., None] - eps * sigma
        y = x_b[..., None, :] - eps * sigma[..., None] * v_b[..., None, :]
        w = np.broadcast_to(v_b[..., None, :], y.shape)
        if y.shape[-1] == 1:
            y, w = y[..., 0], w[..., 0]
        values = integrand(s, y, w) * np.exp(-sigma)
        return upper * np.sum(values * unit_w, axis=-1)

    panels = 1
    previous = rule(panels)
    achieved = math.inf
    for _ in range(state.max_refinements):
        panels *= 2
        current = rule(panels)
        achieved = float(np.max(np.abs(current - previous), initial=0.0)) / scale
        if achieved <= state.rtol:
            return current
        previous = current
    raise NumericalError(
        f"path quadrature did not converge after {panels} panels "
        f"(achieved relative tolerance {achieved:.3e}, requested {state.rtol:.1e})",
        achieved=achieved,
    )


def _broadcast_path(t: np.ndarray, x: np.ndarray, v: np.ndarray):
    shape = np.broadcast_shapes(t.shape, x.shape[:-1], v.shape[:-1])
    dim = x.shape[-1]
    return (
        np.broadcast_to(t, shape),
        np.broadcast_to(x, shape + (dim,)),
        np.broadcast_to(v, shape + (dim,)),
    )


def _bump_offset(spec: SignalSpec, t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    direction = np.zeros(spec.dim)
    direction[0] = 1.0
    center = np.asarray(spec.center, dtype=float)
    return pts - center - spec.speed * t[..., None] * direction


def _check_time(t) -> np.ndarray:
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise DomainError("time must be >= 0")
    return t_arr


def _as_points(x, dim: int) -> np.ndarray:
    """Positions/velocities as (..., d); in one dimension a trailing axis is added."""
    arr = np.asarray(x, dtype=float)
    if dim == 1:
        return arr[..., None]
    if arr.shape[-1:] != (dim,):
        raise DomainError(f"expected a trailing axis of length {dim}, got shape {arr.shape}")
    return arr


def _sample_ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    if dim == 1:
        return rng.uniform(-radius, radius, size=n)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    return np.stack([r * np.cos(angle), r * np.sin(angle)], axis=-1)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=float)
    den = np.broadcast_to(np.asarray(den, dtype=float), num.shape)
    ratio = np.zeros_like(num)
    positive = den > 0
    ratio[positive] = num[positive] / den[positive]
    ratio[~positive & (num > 0)] = math.inf
    return ratio
