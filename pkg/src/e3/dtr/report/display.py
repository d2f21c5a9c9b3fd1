"""Human readable rendering of experiment results."""

from __future__ import annotations

from typing import IO, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from e3.dtr.analysis import (
    Dominance,
    IncomeComparisonTable,
    SensitivityCurve,
    StageDominance,
)
from e3.dtr.policy import TREATMENT
from e3.dtr.utils import ColorConfig


def action_label(action: int, colors: ColorConfig) -> str:
    """Return the colored name of an action identifier."""
    if action == TREATMENT:
        return f"{colors.Fore.RED}T{colors.Fore.RESET}"
    return f"{colors.Fore.GREEN}R{colors.Fore.RESET}"


def format_action_matrix(
    decisions: np.ndarray, colors: ColorConfig
) -> List[str]:
    """Format an (N-1, J) action matrix, one line per epoch.

    Remission shows as "R", treatment as "T".
    """
    stages = decisions.shape[1]
    lines = [
        "{}t   {}{}".format(
            colors.Style.BRIGHT,
            " ".join(f"s{s:<2}" for s in range(1, stages + 1)),
            colors.Style.RESET_ALL,
        )
    ]
    for t, row in enumerate(decisions, 1):
        lines.append(
            f"{t:<3} "
            + " ".join(
                action_label(int(a), colors) + "  " for a in row
            ).rstrip()
        )
    return lines


def format_policy_values(
    policies: Mapping[str, Sequence[float]], colors: ColorConfig
) -> List[str]:
    """Format expected total utilities, one line per policy."""
    stages = len(next(iter(policies.values())))
    lines = [
        "{}{:<11}{}{}".format(
            colors.Style.BRIGHT,
            "policy",
            " ".join(f"s{s}".rjust(10) for s in range(1, stages + 1)),
            colors.Style.RESET_ALL,
        )
    ]
    for name, values in policies.items():
        lines.append(
            f"{name:<11}" + " ".join(f"{v:>10.6f}" for v in values)
        )
    return lines


def dominance_color(dominance: Dominance, colors: ColorConfig) -> str:
    return {
        Dominance.HIGH: colors.Fore.GREEN,
        Dominance.LOW: colors.Fore.YELLOW,
        Dominance.TIE: colors.Style.DIM,
        Dominance.MIXED: colors.Fore.MAGENTA,
    }[dominance]


def format_income_table(
    table: IncomeComparisonTable,
    summary: Sequence[StageDominance],
    colors: ColorConfig,
) -> List[str]:
    """Format both proportion tables side by side, then dominance verdicts."""
    lo, hi = f"{table.low_income:g}", f"{table.high_income:g}"
    lines = [
        "{}Income {} vs {} ({} patients per group){}".format(
            colors.Style.BRIGHT,
            lo,
            hi,
            table.group_size,
            colors.Style.RESET_ALL,
        )
    ]
    header = "t   " + " ".join(
        f"s{s}:{lo:>8} {hi:>8}" for s in range(1, table.stages + 1)
    )
    lines.append(header)
    for t in range(table.epochs):
        cells = []
        for s in range(table.stages):
            low, high = table.low[t, s], table.high[t, s]
            color = ""
            if high > low:
                color = colors.Fore.GREEN
            elif high < low:
                color = colors.Fore.YELLOW
            cells.append(
                f"{color}   {low:>8.2f} {high:>8.2f}{colors.Fore.RESET}"
            )
        lines.append(f"{t + 1:<3} " + " ".join(cells))

    low_rate, high_rate = table.treatment_rates()
    lines.append(
        f"pooled treatment rate: {low_rate:.4f} vs {high_rate:.4f}"
    )
    for verdict in summary:
        line = "stage {}: {}{}{}".format(
            verdict.stage,
            dominance_color(verdict.dominance, colors),
            verdict.dominance.value,
            colors.Style.RESET_ALL,
        )
        if verdict.crossovers:
            line += ", crossovers " + ", ".join(
                f"t={a}..{b}" for a, b in verdict.crossovers
            )
        lines.append(line)
    return lines


def format_curve(curve: SensitivityCurve, colors: ColorConfig) -> str:
    """Summarize a sensitivity curve on one line."""
    t, stage = curve.entry
    slope = curve.slope()
    color = colors.Fore.RED if slope < 0 else colors.Fore.GREEN
    return (
        "{} at (t={}, stage={}): slope {}{:+.4g}{}, range {:.2f}..{:.2f}"
    ).format(
        curve.covariate,
        t,
        stage,
        color,
        slope,
        colors.Fore.RESET,
        float(curve.proportions.min()),
        float(curve.proportions.max()),
    )


def generate_report(
    output_file: IO[str],
    colors: ColorConfig,
    config_hash: str,
    seed: int,
    decisions: Optional[np.ndarray],
    curves: Sequence[SensitivityCurve],
    comparisons: Sequence[
        Tuple[IncomeComparisonTable, Sequence[StageDominance]]
    ],
    policies: Optional[Mapping[str, Sequence[float]]] = None,
) -> None:
    """Write a text report of all the available results.

    :param decisions: Action matrix of the reference profile, if solved.
    :param curves: Sensitivity curves, if computed.
    :param comparisons: Income comparison tables and their dominance
        verdicts, if computed.
    :param policies: Expected total utility of reference policies for the
        reference profile, by starting state.
    """
    sep_line = "-" * 79
    lines = [f"config: {config_hash}", f"seed: {seed}", ""]

    if decisions is not None:
        lines += [sep_line, "Action matrix of the reference profile", sep_line]
        lines += format_action_matrix(decisions, colors)
        lines.append("")

    if policies:
        lines += [sep_line, "Expected total utility from t=1", sep_line]
        lines += format_policy_values(policies, colors)
        lines.append("")

    if curves:
        lines += [sep_line, "Sensitivity", sep_line]
        lines += [format_curve(c, colors) for c in curves]
        lines.append("")

    for table, summary in comparisons:
        lines += [sep_line]
        lines += format_income_table(table, summary, colors)
        lines.append("")

    for line in lines:
        print(line, file=output_file)
