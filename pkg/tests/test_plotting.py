from __future__ import annotations

import numpy as np
import pytest

from chemo_kinetics.diagnostics import DiagnosticsRecord, LimitRecord
from chemo_kinetics.errors import ConfigurationError
from chemo_kinetics.plotting import LIMIT_SERIES, plot_diagnostics, plot_rate


def records() -> list[DiagnosticsRecord]:
    return [
        DiagnosticsRecord(
            t=t,
            mass=1.0,
            moment_v2=0.4,
            moment_x1=10.0 + 0.1 * t,
            moment_y2=1.0 + 0.2 * t,
            entropy=0.05 * np.exp(-t),
            fisher=0.1 * np.exp(-t),
            l1_to_maxwellian=0.2 * np.exp(-t),
        )
        for t in np.linspace(0.0, 1.0, 6)
    ]


def test_diagnostics_plot_is_reproducible(tmp_path):
    first = plot_diagnostics(records(), tmp_path / "a.svg", title="eps = 0.1")
    second = plot_diagnostics(records(), tmp_path / "b.svg", title="eps = 0.1")
    assert first.read_text(encoding="utf-8").lstrip().startswith("<?xml")
    assert first.read_bytes() == second.read_bytes()


def test_limit_records_use_their_own_series(tmp_path):
    series = [LimitRecord(t=t, mass=1.0, moment_v2=0.4, moment_x1=10.0) for t in (0.0, 0.5, 1.0)]
    path = plot_diagnostics(series, tmp_path / "limit.svg", LIMIT_SERIES)
    assert path.exists()


def test_empty_series_cannot_be_plotted(tmp_path):
    with pytest.raises(ConfigurationError):
        plot_diagnostics([], tmp_path / "empty.svg")
    with pytest.raises(ConfigurationError):
        plot_rate([], [], tmp_path / "empty_rate.svg", label="pointwise_l1_final")


def test_rate_plot_annotates_the_slope(tmp_path):
    path = plot_rate([0.2, 0.1], [0.4, 0.2], tmp_path / "rate.svg", label="pointwise_l1_final")
    text = path.read_text(encoding="utf-8")
    assert "slope 1.000" in text
