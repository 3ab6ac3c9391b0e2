"""Run directories: manifest, structured logs, environment capture."""

from __future__ import annotations

import json
import os
import platform
import subprocess
import sys
import time
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

RUN_ROOT_ENV = "SEMCYCLE_RUN_ROOT"
MANIFEST_FILE = "manifest.json"


def default_run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        rev = out.stdout.strip()
        return rev if out.returncode == 0 and rev else "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def environment() -> dict:
    import torch

    from . import __version__

    return {
        "package": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "torch": torch.__version__,
        "platform": platform.platform(),
        "threads": torch.get_num_threads(),
        "revision": revision(),
    }


def write_manifest(run_dir: Union[str, Path], command: str, config, **fields) -> Path:
    """Write ``manifest.json`` before any heavy work; returns its path."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "status": "running",
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "started_unix": time.time(),
        "config": _jsonable(config),
        "environment": environment(),
        **_jsonable(fields),
    }
    path = run_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def finalize_manifest(run_dir: Union[str, Path], status: str = "complete", **fields) -> None:
    path = Path(run_dir) / MANIFEST_FILE
    manifest = json.loads(path.read_text()) if path.is_file() else {}
    manifest.update(_jsonable(fields))
    manifest["status"] = status
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    if "started_unix" in manifest:
        manifest["wall_clock_s"] = time.time() - manifest["started_unix"]
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def read_manifest(run_dir: Union[str, Path]) -> dict:
    return json.loads((Path(run_dir) / MANIFEST_FILE).read_text())


class JsonlLog:
    """Append-only JSON-lines log, flushed per record."""

    def __init__(self, path: Optional[Union[str, Path]]):
        self.path = Path(path) if path is not None else None
        self.records = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        record = _jsonable(record)
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")

    def truncate_after(self, step: int) -> None:
        """Drop records past ``step`` (used when resuming from a snapshot)."""
        if self.path is None or not self.path.is_file():
            return
        kept = [r for r in read_jsonl(self.path) if r.get("step", 0) <= step]
        self.path.write_text("".join(json.dumps(r) + "\n" for r in kept))


def read_jsonl(path: Union[str, Path]) -> list:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
