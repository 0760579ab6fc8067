from __future__ import annotations

import numpy as np
import pytest

from chemo_kinetics.errors import ConfigurationError, DomainError
from chemo_kinetics.signals import (
    AdaptedSignalState,
    SignalSpec,
    adapted_path_derivative,
    adapted_signal,
    eval_signal,
    gradient_x,
    path_derivative,
    sample_lemma_points,
    signal_bounds,
    verify_lemma_N,
)


def test_linear_signal_values_and_derivatives(linear_signal):
    x = np.array([0.0, 2.0, 7.5])
    assert eval_signal(linear_signal, 1.0, x) == pytest.approx(0.5 * x)
    assert gradient_x(linear_signal, 1.0, x)[:, 0] == pytest.approx([0.5, 0.5, 0.5])
    assert path_derivative(linear_signal, 1.0, x, -1.0) == pytest.approx([-0.5, -0.5, -0.5])


def test_linear_bounds_use_domain_box():
    bounds = signal_bounds(SignalSpec.linear(0.5, extent=20.0))
    assert bounds.sup_value == pytest.approx(10.0)
    assert bounds.lipschitz_x == pytest.approx(0.5)
    assert bounds.w2inf == pytest.approx(10.5)
    assert bounds.is_finite()


def test_constant_signal_is_already_adapted():
    spec = SignalSpec.constant(2.0)
    state = AdaptedSignalState(eps=0.05)
    t = np.linspace(0.0, 3.0, 7)
    assert adapted_signal(state, spec, t, 4.0, 0.3) == pytest.approx(np.full(7, 2.0))
    assert adapted_path_derivative(state, spec, t, 4.0, 0.3) == pytest.approx(np.zeros(7))


@pytest.mark.parametrize("eps", [0.1, 0.01])
def test_linear_closed_form_matches_quadrature(linear_signal, rng, eps):
    t = rng.uniform(0.0, 4.0, size=200)
    x = rng.uniform(0.0, 10.0, size=200)
    v = rng.uniform(-1.0, 1.0, size=200)
    closed = adapted_signal(AdaptedSignalState(eps=eps), linear_signal, t, x, v)
    quad = adapted_signal(AdaptedSignalState(eps=eps, mode="quadrature"), linear_signal, t, x, v)
    np.testing.assert_allclose(quad, closed, rtol=0.0, atol=1e-9)


def test_bump_path_derivative_matches_finite_differences(rng):
    spec = SignalSpec.bump(1.5, 2.0, speed=0.5, center=5.0)
    t = rng.uniform(0.5, 3.0, size=300)
    x = rng.uniform(0.0, 12.0, size=300)
    v = rng.uniform(-1.0, 1.0, size=300)
    h = 1e-5
    ahead = eval_signal(spec, t + h, x + v * h)
    behind = eval_signal(spec, t - h, x - v * h)
    np.testing.assert_allclose(path_derivative(spec, t, x, v), (ahead - behind) / (2 * h), rtol=0.0, atol=1e-8)


def test_adapted_signal_starts_at_initial_signal():
    spec = SignalSpec.bump(1.0, 2.0, speed=0.5, center=5.0)
    state = AdaptedSignalState(eps=0.1, mode="quadrature")
    x = np.linspace(0.0, 10.0, 11)
    np.testing.assert_allclose(adapted_signal(state, spec, 0.0, x, 0.7), eval_signal(spec, 0.0, x))


def test_adapted_derivative_is_relaxation_gap():
    spec = SignalSpec.bump(1.0, 2.0, speed=0.5, center=5.0)
    eps = 0.1
    state = AdaptedSignalState(eps=eps, mode="quadrature")
    t = np.array([0.05, 0.3, 1.0, 2.5])
    x = np.array([3.0, 5.0, 6.5, 9.0])
    v = np.array([-1.0, 0.2, 0.5, 1.0])
    gap = (eval_signal(spec, t, x) - adapted_signal(state, spec, t, x, v)) / eps
    np.testing.assert_allclose(adapted_path_derivative(state, spec, t, x, v), gap, atol=1e-7)


@pytest.mark.parametrize(
    "spec",
    [
        SignalSpec.constant(1.0),
        SignalSpec.linear(0.5, extent=20.0),
        SignalSpec.bump(1.0, 2.0, speed=0.5, center=10.0),
    ],
    ids=["constant", "linear", "bump"],
)
def test_adapted_signal_estimates_hold_on_random_samples(spec, rng):
    samples = sample_lemma_points(1000, rng, spec, t_max=4.0, v_max=1.0)
    mode = "quadrature" if spec.family == "bump" else "closed_form"
    report = verify_lemma_N(AdaptedSignalState(eps=0.1, mode=mode), spec, samples)
    assert report.n_samples == 1000
    assert report.passed
    assert report.max_ratio_lip <= 1.0 + 1e-8
    assert report.max_ratio_decay <= 1.0 + 1e-8


def test_from_mapping_accepts_family_aliases():
    spec = SignalSpec.from_mapping({"family": "LinearInX", "params": {"a": 0.25, "extent": 8.0}})
    assert spec.family == "linear"
    assert spec.gradient == (0.25,)
    assert spec.extent == 8.0


def test_from_mapping_rejects_unknown_family():
    with pytest.raises(ConfigurationError):
        SignalSpec.from_mapping({"family": "spiral"})


def test_negative_time_is_outside_the_domain(linear_signal):
    with pytest.raises(DomainError):
        eval_signal(linear_signal, -0.1, 1.0)


def test_two_dimensional_points_need_a_trailing_axis():
    spec = SignalSpec.linear((0.5, 0.25))
    assert eval_signal(spec, 0.0, np.array([[2.0, 4.0]])) == pytest.approx([2.0])
    with pytest.raises(DomainError):
        eval_signal(spec, 0.0, np.array([1.0, 2.0, 3.0]))
