"""CSV tables with a commented header.

Each table starts with ``# key: value`` lines (config hash, master seed and
other metadata) followed by a regular CSV document.
"""

from __future__ import annotations

from typing import Any, Dict, Mapping, Tuple

import pandas as pd

FLOAT_FORMAT = "%.12g"


def write_table(
    filename: str, frame: pd.DataFrame, header: Mapping[str, Any]
) -> None:
    """Write ``frame`` to ``filename`` as CSV, preceded by ``header``."""
    with open(filename, "w", newline="") as f:
        for key, value in header.items():
            f.write(f"# {key}: {value}\n")
        frame.to_csv(
            f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
        )


def read_header(filename: str) -> Dict[str, str]:
    """Return the metadata in the commented header of a table."""
    result: Dict[str, str] = {}
    with open(filename) as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].partition(":")
            result[key.strip()] = value.strip()
    return result


def read_table(filename: str) -> Tuple[pd.DataFrame, Dict[str, str]]:
    """Read a table written by ``write_table`` and its header."""
    return pd.read_csv(filename, comment="#"), read_header(filename)
