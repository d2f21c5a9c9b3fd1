"""Entry point for the e3-dtr script."""

from __future__ import annotations

import logging
import sys
from typing import List, Optional

from e3.main import Main

from e3.dtr import DTRError
from e3.dtr.config import load_config
from e3.dtr.experiment import COMMANDS, Experiment
from e3.dtr.utils import ColorConfig, isatty


logger = logging.getLogger("dtr.main")


def main(args: Optional[List[str]] = None) -> int:
    """Run one step of an experiment, or all of them.

    :param args: Command line arguments. If None, use `sys.argv`.
    :return: 0 on success, 1 on invalid configuration or missing artifacts.
    """
    m = Main()
    parser = m.argument_parser
    parser.description = (
        "Compute covariate-adjusted treatment policies on simulated cohorts."
    )
    parser.add_argument(
        "command",
        choices=COMMANDS + ("all",),
        help="Step to run. 'all' runs every step in order.",
    )
    parser.add_argument(
        "--config",
        metavar="FILE",
        help="JSON or YAML configuration file, merged over the bundled"
        " defaults.",
    )
    parser.add_argument(
        "--seed",
        type=int,
        help="Master seed. Overrides the seed of the configuration.",
    )
    parser.add_argument(
        "--out",
        metavar="DIR",
        help="Output directory. Overrides the output directory of the"
        " configuration.",
    )
    parser.add_argument(
        "--set",
        metavar="KEY=VALUE",
        dest="overrides",
        action="append",
        default=[],
        help="Override a setting of the configuration, for instance"
        " reward.lambda=1.2 or analysis.income_pairs.0=[10000, 80000]. Can be"
        " repeated.",
    )
    parser.add_argument(
        "-j",
        "--jobs",
        type=int,
        default=1,
        help="Number of workers for fits and per-patient solves. 0 means one"
        " per CPU.",
    )
    m.parse_args(args)
    assert m.args is not None

    enable_colors = (
        not m.args.nocolor
        and not m.args.log_file
        and isatty(sys.stdout)
        and isatty(sys.stderr)
    )

    try:
        config = load_config(
            m.args.config,
            overrides=m.args.overrides,
            seed=m.args.seed,
            output_dir=m.args.out,
        )
        experiment = Experiment(
            config, jobs=m.args.jobs, colors=ColorConfig(enable_colors)
        )
        commands = COMMANDS if m.args.command == "all" else (m.args.command,)
        for command in commands:
            experiment.run(command)
    except DTRError as exc:
        logger.error(str(exc))
        return 1
    return 0


if __name__ == "__main__":  # interactive-only
    sys.exit(main())
