#!/usr/bin/env python3
"""
Run Manifest Builder

Gives every run a stable identity and records what it was built from:
config snapshot, dataset hashes, a content hash of the code version, seeds
and timestamps. The manifest is written before any training step so a run
can be reproduced from it alone.

Usage:
    python run_manifest.py runs/<run_id>     # print a run's manifest
"""

import hashlib
import json
import os
import uuid
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

from dotenv import load_dotenv

PathLike = Union[str, Path]

SCRIPTS_DIR = Path(__file__).resolve().parent
MANIFEST_NAME = 'manifest.json'
LOCK_NAME = '.lock'


class RunLockedError(RuntimeError):
    """Raised when another process holds the run directory."""


def runs_root() -> Path:
    """Root of all run directories; UPESV_RUNS_DIR overrides the default."""
    load_dotenv()
    return Path(os.getenv('UPESV_RUNS_DIR', 'runs'))


def content_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def file_hash(path: PathLike) -> str:
    """SHA-256 of a file, read in chunks."""
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def code_version_hash(root: PathLike = SCRIPTS_DIR) -> str:
    """
    Git-style content hash of the code version.

    Hashes every module's name and blob hash in sorted order, so any edit to
    a module changes the version.
    """
    tree = hashlib.sha256()
    for path in sorted(Path(root).glob('*.py')):
        data = path.read_bytes()
        blob = hashlib.sha1(b'blob %d\0' % len(data) + data).hexdigest()
        tree.update(f"{blob} {path.name}\n".encode())
    return tree.hexdigest()


def config_key(config: Dict[str, object]) -> str:
    """Normalized config string; key order does not matter."""
    return json.dumps(config, sort_keys=True, separators=(',', ':'))


def generate_run_id(config: Dict[str, object], label: str = 'run',
                    now: Optional[datetime] = None) -> str:
    """
    Run id from a UTC timestamp and a deterministic UUID of the config.

    The same config always produces the same UUID suffix.
    """
    now = now or datetime.now(timezone.utc)
    hash_bytes = hashlib.sha256(config_key(config).encode()).digest()[:16]
    short = str(uuid.UUID(bytes=hash_bytes))[:8]
    return f"{label}-{now.strftime('%Y%m%dT%H%M%SZ')}-{short}"


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: Dict[str, object]
    dataset_hashes: Dict[str, str] = field(default_factory=dict)
    code_version: str = field(default_factory=code_version_hash)
    seeds: List[int] = field(default_factory=list)
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished_at: Optional[str] = None

    def write(self, run_dir: PathLike) -> Path:
        path = Path(run_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + '\n')
        return path

    @classmethod
    def read(cls, run_dir: PathLike) -> 'RunManifest':
        return cls(**json.loads((Path(run_dir) / MANIFEST_NAME).read_text()))

    def mark_finished(self, run_dir: PathLike) -> Path:
        self.finished_at = datetime.now(timezone.utc).isoformat()
        return self.write(run_dir)


@contextmanager
def run_lock(run_dir: PathLike) -> Iterator[Path]:
    """Hold runs/{run_id}/.lock for the duration of a command."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise RunLockedError(f"{run_dir} is locked by another process ({lock})") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


if __name__ == '__main__':
    import sys

    for arg in sys.argv[1:]:
        manifest = RunManifest.read(arg)
        print(f"Run {manifest.run_id} ({manifest.command})")
        print(f"  code version: {manifest.code_version[:12]}")
        print(f"  seeds: {manifest.seeds}")
        for name, digest in manifest.dataset_hashes.items():
            print(f"  {name}: {digest[:12]}")
