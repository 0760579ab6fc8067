"""
Standalone SVG line plots of diagnostics series and ε-sweep errors.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib import rc_context
from matplotlib.figure import Figure

from .diagnostics import DiagnosticsRecord, LimitRecord, RateFit, fit_rate
from .errors import ConfigurationError


GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
FIG_WIDTH = 5.0
COLORS = ["#08589e", "#2b8cbe", "#4eb3d3", "#7bccc4", "#a8ddb5"]

PLOT_PARAMS = {
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "axes.labelsize": 10,
    "font.family": "serif",
    "font.size": 8,
    "mathtext.fontset": "stix",
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [FIG_WIDTH, FIG_WIDTH * GOLDEN],
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    # fixed ids so identical data gives identical files
    "svg.hashsalt": "chemo-kinetics",
    "svg.fonttype": "none",
}

DEFAULT_SERIES = ("l1_to_maxwellian", "moment_y2", "entropy", "fisher")
LIMIT_SERIES = ("mass", "moment_v2", "moment_x1")


def plot_diagnostics(
    records: Sequence[Union[DiagnosticsRecord, LimitRecord]],
    path: Path,
    series: Sequence[str] = DEFAULT_SERIES,
    *,
    title: Optional[str] = None,
) -> Path:
    """Diagnostics against time, one panel per functional."""
    if not records:
        raise ConfigurationError("cannot plot an empty diagnostics series")
    t = np.array([r.t for r in records])
    with rc_context(PLOT_PARAMS):
        fig = Figure(figsize=(FIG_WIDTH, 0.5 * FIG_WIDTH * len(series)))
        axes = fig.subplots(len(series), 1, sharex=True, squeeze=False)[:, 0]
        for ax, name in zip(axes, series):
            values = np.array(
                [np.nan if getattr(r, name) is None else getattr(r, name) for r in records]
            )
            ax.plot(t, values)
            ax.set_ylabel(name.replace("_", " "))
        axes[-1].set_xlabel("t")
        if title:
            axes[0].set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_rate(
    eps_values: Sequence[float],
    errors: Sequence[float],
    path: Path,
    *,
    label: str,
    fit: Optional[RateFit] = None,
) -> Path:
    """Log–log error against ε with the fitted power law annotated."""
    eps_arr = np.asarray(eps_values, dtype=float)
    err_arr = np.asarray(errors, dtype=float)
    if eps_arr.size == 0:
        raise ConfigurationError("cannot plot an empty sweep")
    if fit is None and eps_arr.size >= 2:
        fit = fit_rate(eps_arr, err_arr, min_points=2, min_span=1.0)

    with rc_context(PLOT_PARAMS):
        fig = Figure()
        ax = fig.subplots()
        ax.loglog(eps_arr, err_arr, "o", label=label.replace("_", " "))
        if fit is not None:
            span = np.array([eps_arr.min(), eps_arr.max()])
            ax.loglog(
                span,
                np.exp(fit.intercept) * span**fit.slope,
                "-",
                label=f"slope {fit.slope:.3f} (r² = {fit.r_squared:.3f})",
            )
        ax.set_xlabel(r"$\varepsilon$")
        ax.set_ylabel("error")
        ax.legend(loc="best")
        fig.tight_layout()
        return _save(fig, path)


def _save(fig: Figure, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path
