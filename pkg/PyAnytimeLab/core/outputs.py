from __future__ import annotations

import csv
import json
import logging
import shutil
import subprocess
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Sequence

from PyAnytimeLab.core.paths import project_root


log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class OutputExistsError(FileExistsError):
    pass


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return f"{value:.16e}"
    return str(value)


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([format_value(v) for v in row])
    return path


def prepare_output_dir(path: Path, *, overwrite: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise OutputExistsError(f"output path {path} exists and is not a directory")
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise OutputExistsError(f"output directory {path} is not empty; pass --overwrite to replace it")
        log.info("clearing output directory %s", path)
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def git_describe() -> str:
    try:
        p = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=project_root(),
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            check=False,
            text=True,
            timeout=5,
        )
    except Exception:
        return "unknown"
    out = (p.stdout or "").strip()
    return out if p.returncode == 0 and out else "unknown"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def inventory(root: Path) -> list[str]:
    return sorted(
        p.relative_to(root).as_posix()
        for p in root.rglob("*")
        if p.is_file() and p.name != MANIFEST_NAME
    )


@dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str
    tool_version: str
    git_describe: str
    started_at: str
    finished_at: str = ""
    wall_time_s: float = 0.0
    status: str = "running"
    runs: list[dict] = field(default_factory=list)
    files: list[str] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def record(self, name: str, status: str, **details: Any) -> None:
        self.runs.append({"name": name, "status": status, **details})

    def to_dict(self) -> dict[str, Any]:
        return {"manifest_version": MANIFEST_VERSION, **asdict(self)}

    def write(self, out_dir: Path) -> Path:
        self.files = inventory(out_dir)
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n", encoding="utf-8")
        return path
