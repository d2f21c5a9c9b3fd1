"""Manifest of experiment artifacts.

The manifest records, for every file in an output directory, its SHA-256
digest, together with the configuration hash, the master seed and the
versions of the packages that produced the files. It makes an experiment
citable: re-running it must give files with the same digests.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import metadata
import json
import os
import platform
from typing import Dict, List, Optional

from e3.dtr import DTRError
from e3.dtr.utils import file_sha256


VERSIONED_PACKAGES = (
    "e3-dtr",
    "e3-core",
    "numpy",
    "scipy",
    "pandas",
    "matplotlib",
)

IGNORED_FILES = ("status",)
"""Files of the output directory that are not artifacts."""


def package_versions() -> Dict[str, str]:
    """Return the installed version of each package in VERSIONED_PACKAGES."""
    result = {"python": platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            result[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            result[name] = "unknown"
    return result


@dataclass(frozen=True)
class ArtifactEntry:
    filename: str
    """Path relative to the output directory, with "/" separators."""

    sha256: str
    size: int


class ArtifactIndex:
    """Manifest of the artifacts in one output directory."""

    INDEX_FILENAME = "manifest.json"
    INDEX_MAGIC = "e3.dtr.report.index.ArtifactIndex:1"

    def __init__(
        self,
        output_dir: str,
        config_hash: str,
        seed: int,
        versions: Optional[Dict[str, str]] = None,
    ) -> None:
        self.output_dir = output_dir
        self.config_hash = config_hash
        self.seed = seed
        self.versions = package_versions() if versions is None else versions

        self.entries: Dict[str, ArtifactEntry] = {}
        """Map relative filenames to their entries."""

    def add(self, filename: str) -> ArtifactEntry:
        """Hash a file and add it to the index.

        :param filename: Path relative to the output directory.
        """
        path = os.path.join(self.output_dir, filename)
        entry = ArtifactEntry(
            filename.replace(os.sep, "/"),
            file_sha256(path),
            os.path.getsize(path),
        )
        self.entries[entry.filename] = entry
        return entry

    def scan(self) -> None:
        """Add every artifact found in the output directory."""
        for root, dirs, files in os.walk(self.output_dir):
            dirs.sort()
            for name in sorted(files):
                rel = os.path.relpath(
                    os.path.join(root, name), self.output_dir
                )
                if rel in IGNORED_FILES or rel == self.INDEX_FILENAME:
                    continue
                self.add(rel)

    def changed(self) -> List[str]:
        """Return the indexed files that are missing or differ on disk."""
        result = []
        for name, entry in sorted(self.entries.items()):
            path = os.path.join(self.output_dir, name)
            if not os.path.isfile(path) or file_sha256(path) != entry.sha256:
                result.append(name)
        return result

    @classmethod
    def read(cls, output_dir: str) -> ArtifactIndex:
        """Read the manifest in the given output directory."""
        filename = os.path.join(output_dir, cls.INDEX_FILENAME)
        try:
            with open(filename) as f:
                doc = json.load(f)
        except (OSError, ValueError) as exc:
            raise DTRError(
                f"cannot read {filename}: {exc}", origin="ArtifactIndex"
            )
        if not isinstance(doc, dict) or doc.get("magic") != cls.INDEX_MAGIC:
            raise DTRError(
                f"{filename}: invalid manifest format", origin="ArtifactIndex"
            )

        result = cls(
            output_dir, doc["config_hash"], int(doc["seed"]), doc["versions"]
        )
        for e in doc["artifacts"]:
            entry = ArtifactEntry(e["filename"], e["sha256"], int(e["size"]))
            result.entries[entry.filename] = entry
        return result

    def write(self) -> str:
        """Write the manifest on disk and return its filename."""
        doc = {
            "magic": self.INDEX_MAGIC,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "versions": self.versions,
            "artifacts": [
                {"filename": e.filename, "sha256": e.sha256, "size": e.size}
                for _, e in sorted(self.entries.items())
            ],
        }
        filename = os.path.join(self.output_dir, self.INDEX_FILENAME)
        with open(filename, "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
        return filename
