"""Miscellaneous helpers."""

from __future__ import annotations

import hashlib
import json
import sys
from typing import Any, AnyStr, IO, Optional
import zlib

import numpy as np


def isatty(stream: IO[AnyStr]) -> bool:
    """Return whether stream is a TTY.

    This is a safe predicate: it works if stream is None or if it does not even
    support TTY detection: in these cases, be conservative (consider it's not a
    TTY).
    """
    return bool(stream) and hasattr(stream, "isatty") and stream.isatty()


class DummyColors:
    """Stub to replace colorama's Fore/Style when colors are disabled."""

    def __getattr__(self, name: str) -> str:
        return ""


class ColorConfig:
    """Proxy for color management.

    This embeds colorama's Fore/Style, or DummyColors instances when colors are
    disabled.
    """

    def __init__(self, colors_enabled: Optional[bool] = None):
        """
        Initialize a ColorConfig instance.

        :param colors_enabled: Whether to enable colors. If left to None,
            enable it iff the standard output is a TTY.
        """
        from colorama import Fore, Style

        self.Fore = Fore
        self.Style = Style

        if colors_enabled is None:
            colors_enabled = isatty(sys.stdout)

        if not colors_enabled:
            self.Fore = DummyColors()
            self.Style = DummyColors()


def indent(text: str, prefix: str = "  ") -> str:
    """Prepend ``prefix`` to every line in ``text``."""
    return "\n".join((prefix + line) for line in text.splitlines())


def derive_seed(master_seed: int, *labels: Any) -> int:
    """Derive a reproducible sub-seed from a master seed and labels.

    Two calls with the same master seed and the same labels always return the
    same value. Labels can be strings or integers.

    :param master_seed: Seed of the whole experiment.
    :param labels: Purpose of the derived seed, for instance ("cohort",) or
        ("income", 10000).
    """
    key = [zlib.crc32(str(label).encode("utf-8")) for label in labels]
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=key)
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def canonical_json(doc: Any) -> str:
    """Serialize ``doc`` to a JSON string that is stable across runs."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: Any) -> str:
    """Return the SHA-256 hex digest of the canonical JSON form of ``doc``."""
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def file_sha256(filename: str) -> str:
    """Return the SHA-256 hex digest of the content of ``filename``."""
    h = hashlib.sha256()
    with open(filename, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
