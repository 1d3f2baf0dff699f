"""Run manifests: every CLI output directory carries exactly one
manifest.json recording the command, its full configuration, the seed, and a
content hash over the produced files, so a run can be reproduced and its
outputs verified byte for byte (double-precision mode)."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    status: str = "completed"  # or "aborted_nan"
    artifact_hash: str = ""
    started_at: float = field(default_factory=time.time)
    finished_at: float = 0.0


def artifact_hash(out_dir) -> str:
    """Content hash over every file under ``out_dir`` except the manifest.

    A tree hash in the git spirit: sha256 over sorted (relative path, file
    digest) pairs, so it is independent of write order and timestamps.
    """
    out_dir = Path(out_dir)
    entries = []
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != MANIFEST_NAME:
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            entries.append(f"{path.relative_to(out_dir).as_posix()}:{digest}")
    return hashlib.sha256("\n".join(entries).encode()).hexdigest()


def write_manifest(out_dir, manifest: RunManifest) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.finished_at = time.time()
    manifest.artifact_hash = artifact_hash(out_dir)
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(asdict(manifest), indent=1, sort_keys=True))
    return path


def read_manifest(out_dir) -> dict:
    return json.loads((Path(out_dir) / MANIFEST_NAME).read_text())
