import argparse
from dataclasses import replace
import logging
import signal
import sys
import threading
from pathlib import Path


if __package__ is None or __package__ == "":
    sys.path.append(str(Path(__file__).resolve().parent.parent))

from PyAnytimeLab import __version__
from PyAnytimeLab.core.commands import COMMANDS, EXIT_CONFIG, CommandContext, run_command
from PyAnytimeLab.core.paths import default_output_root
from PyAnytimeLab.core.run_config import RunConfigError, load_run_config
from PyAnytimeLab.core.run_log import PACKAGE_LOGGER
from PyAnytimeLab.core.settings import load_settings


log = logging.getLogger(PACKAGE_LOGGER)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pyanytimelab",
        description="Deterministic risk curves for SGD learning-rate schedules on power-law linear regression.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="run config JSON (a manifest.json is accepted)")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: <root>/<name>-<command>)")
        p.add_argument("--jobs", type=int, default=None, help="worker threads (default: config, then settings)")
        p.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
        p.add_argument("--log-level", default=None, choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    g = sub.add_parser("gui")
    g.add_argument("--config", type=Path, default=None, help="run config to open in the editor")
    g.add_argument("--log-level", default=None, choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return parser


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
        stream=sys.stderr,
    )
    log.setLevel(level)


def run_gui(log_level: str | None = None, config_path: Path | None = None) -> int:
    from PySide6.QtWidgets import QApplication

    from PyAnytimeLab.ui.app import MainWindow
    from PyAnytimeLab.ui.theme import apply_theme

    settings = load_settings()
    if log_level:
        settings = replace(settings, log_level=log_level)

    app = QApplication(sys.argv)
    apply_theme(app)
    window = MainWindow(settings)
    if config_path is not None:
        window.open_config(config_path)
    window.show()
    return app.exec()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = load_settings()
    _configure_logging(args.log_level or settings.log_level)

    if args.command == "gui":
        return run_gui(args.log_level, args.config)

    try:
        config = load_run_config(args.config)
    except RunConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("config error: cannot read %s: %s", args.config, exc)
        return EXIT_CONFIG

    jobs = args.jobs or config.jobs or settings.default_jobs
    if jobs < 1:
        log.error("config error: --jobs must be >= 1 (got %d)", jobs)
        return EXIT_CONFIG

    out_dir = args.out or default_output_root(settings.default_output_root) / f"{config.name}-{args.command}"
    stop = threading.Event()
    ctx = CommandContext(
        out_dir=out_dir,
        jobs=jobs,
        overwrite=args.overwrite or settings.overwrite,
        settings=settings,
        should_stop=stop.is_set,
    )

    previous = signal.getsignal(signal.SIGINT)

    def _interrupt(_signum, _frame) -> None:
        log.warning("interrupt received; stopping at the next checkpoint")
        stop.set()

    signal.signal(signal.SIGINT, _interrupt)
    try:
        result = run_command(args.command, config, ctx)
    finally:
        signal.signal(signal.SIGINT, previous)
    return result.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
