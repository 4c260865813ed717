"""Run manifests written next to every command output."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the stamp for byte-identical reruns.
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch and epoch.isdigit() else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass
class RunManifest:
    command: str
    arguments: dict
    seed: int | None = None
    inputs: dict = field(default_factory=dict)
    version: str = __version__
    timestamp: str = field(default_factory=_timestamp)

    @classmethod
    def build(cls, command: str, arguments: dict, seed=None, input_paths=()) -> "RunManifest":
        inputs = {str(p): sha256_file(p) for p in input_paths if p is not None}
        return cls(command, dict(arguments), seed, inputs)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path
