"""Deterministic run artifacts: CSV writers, config hashing, run manifests.

All numeric CSV output uses 17-significant-digit formatting so re-runs with
the same configuration produce byte-identical bodies; wall-clock timestamps
live only in the manifest, which is written atomically at run end.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

TOOL_VERSION = "0.1.0"

__all__ = ["TOOL_VERSION", "format_number", "write_csv", "config_hash", "RunManifest"]


def format_number(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_number(v) for v in row])


def config_hash(payload) -> str:
    """SHA-256 of the canonical (sorted-keys) JSON encoding."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    command: str
    argv: list
    config_hash: str = ""
    tool_version: str = TOOL_VERSION
    started_at: str = field(default_factory=_utcnow)
    finished_at: str = ""
    exit_status: int = 0

    def finalize(self, exit_status: int = 0) -> None:
        self.finished_at = _utcnow()
        self.exit_status = exit_status

    def write(self, path) -> None:
        """Atomic write: temp file in the target directory, then rename."""
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(asdict(self), fh, indent=2)
                fh.write("\n")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
