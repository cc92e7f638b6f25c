import os
from pathlib import Path


OUTPUT_ROOT_ENV = "PYANYTIME_OUT"


def project_root() -> Path:
    return Path(__file__).resolve().parents[1]


def runs_examples_dir() -> Path:
    return project_root() / "runs" / "examples"


def runs_saved_dir() -> Path:
    return project_root() / "runs" / "saved"


def settings_path() -> Path:
    return project_root() / "config" / "settings.json"


def default_output_root(fallback: str) -> Path:
    env = os.environ.get(OUTPUT_ROOT_ENV, "").strip()
    return Path(env) if env else Path(fallback)
