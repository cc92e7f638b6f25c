import json
import logging
from dataclasses import dataclass
from pathlib import Path

from PyAnytimeLab.core.paths import settings_path


_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass(frozen=True)
class AppSettings:
    default_output_root: str
    default_jobs: int
    overwrite: bool
    log_level: str
    stability_trial_steps: int
    stability_bisection_iters: int


DEFAULT_SETTINGS = AppSettings(
    default_output_root="out",
    default_jobs=1,
    overwrite=False,
    log_level="INFO",
    stability_trial_steps=500,
    stability_bisection_iters=12,
)


def _positive_int(data: dict, key: str, default: int) -> int:
    try:
        value = int(data.get(key, default))
    except Exception:
        value = default
    return max(1, value)


def load_settings(path: Path | None = None) -> AppSettings:
    defaults = DEFAULT_SETTINGS
    path = path or settings_path()
    if not path.exists():
        return defaults

    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except Exception:
        logging.getLogger(__name__).warning("settings unreadable path=%s; using defaults", path)
        return defaults

    if not isinstance(data, dict):
        return defaults

    output_root = str(data.get("default_output_root", defaults.default_output_root)).strip() or defaults.default_output_root

    log_level = str(data.get("log_level", defaults.log_level)).strip().upper()
    if log_level not in _LOG_LEVELS:
        log_level = defaults.log_level

    return AppSettings(
        default_output_root=output_root,
        default_jobs=_positive_int(data, "default_jobs", defaults.default_jobs),
        overwrite=bool(data.get("overwrite", defaults.overwrite)),
        log_level=log_level,
        stability_trial_steps=_positive_int(data, "stability_trial_steps", defaults.stability_trial_steps),
        stability_bisection_iters=_positive_int(data, "stability_bisection_iters", defaults.stability_bisection_iters),
    )


def save_settings(settings: AppSettings, path: Path | None = None) -> None:
    path = path or settings_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {
        "schema_version": 1,
        "default_output_root": settings.default_output_root,
        "default_jobs": int(settings.default_jobs),
        "overwrite": bool(settings.overwrite),
        "log_level": settings.log_level,
        "stability_trial_steps": int(settings.stability_trial_steps),
        "stability_bisection_iters": int(settings.stability_bisection_iters),
    }
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
