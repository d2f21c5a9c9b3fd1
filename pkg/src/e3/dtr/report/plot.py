"""Standalone SVG plots of sensitivity curves and income comparisons.

Plots are drawn on bare matplotlib Figures (no pyplot state) and rendered
with a fixed hash salt and without a date, so the same data always gives
the same SVG bytes. Text is kept as text: the files embed no font or
external asset.
"""

from __future__ import annotations

import matplotlib
from matplotlib.figure import Figure

from e3.dtr.analysis import IncomeComparisonTable, SensitivityCurve


SVG_RC = {
    "svg.hashsalt": "e3-dtr",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def save_svg(figure: Figure, filename: str, title: str) -> None:
    with matplotlib.rc_context(SVG_RC):
        figure.savefig(
            filename, format="svg", metadata={"Date": None, "Title": title}
        )


def plot_sensitivity(curve: SensitivityCurve, filename: str) -> None:
    """Plot treatment proportions against the covariate, with their band."""
    t, stage = curve.entry
    with matplotlib.rc_context(SVG_RC):
        figure = Figure(figsize=(5.0, 3.5))
        ax = figure.add_subplot()
        ax.fill_between(
            curve.grid, curve.lower, curve.upper, alpha=0.25, label="95% band"
        )
        ax.plot(curve.grid, curve.proportions, marker="o", markersize=3)
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel(curve.covariate)
        ax.set_ylabel("proportion of treatment")
        ax.set_title(
            f"(t={t}, stage={stage}), {curve.replications} patients per point"
        )
        ax.legend(loc="best")
        figure.tight_layout()
    save_svg(figure, filename, f"sensitivity to {curve.covariate}")


def plot_income_comparison(
    table: IncomeComparisonTable, filename: str
) -> None:
    """Plot treatment proportions against epochs, one panel per stage."""
    epochs = range(1, table.epochs + 1)
    with matplotlib.rc_context(SVG_RC):
        figure = Figure(figsize=(3.0 * table.stages, 3.2))
        axes = figure.subplots(1, table.stages, sharey=True, squeeze=False)
        for s, ax in enumerate(axes[0]):
            ax.plot(
                epochs,
                table.low[:, s],
                marker="o",
                markersize=3,
                label=f"income {table.low_income:g}",
            )
            ax.plot(
                epochs,
                table.high[:, s],
                marker="s",
                markersize=3,
                label=f"income {table.high_income:g}",
            )
            ax.set_ylim(-0.02, 1.02)
            ax.set_xlabel("t")
            ax.set_title(f"stage {s + 1}")
        axes[0][0].set_ylabel("proportion of treatment")
        axes[0][-1].legend(loc="best")
        figure.tight_layout()
    save_svg(
        figure,
        filename,
        f"income {table.low_income:g} vs {table.high_income:g}",
    )
