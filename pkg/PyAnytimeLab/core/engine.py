import logging
import threading
from typing import Any

from PyAnytimeLab.core.commands import CommandContext, CommandResult, run_command
from PyAnytimeLab.core.run_config import RunConfigError, parse_run_config
from PyAnytimeLab.core.run_log import RunLog, attach, detach


log = logging.getLogger(__name__)


class CommandEngine:
    """Runs one command at a time on a background thread.

    The GUI polls ``read_logs`` and ``last_result``; ``stop`` is cooperative
    and takes effect at the next cancellation poll inside the simulation.
    """

    def __init__(self, log_level: str | int = logging.INFO) -> None:
        self._run_log = RunLog(level=log_level)
        attach(self._run_log, log_level)

        self._stop_event = threading.Event()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self._last_result: CommandResult | None = None

    @property
    def is_running(self) -> bool:
        t = self._thread
        return t is not None and t.is_alive()

    @property
    def last_result(self) -> CommandResult | None:
        return self._last_result

    def start(self, command: str, document: dict[str, Any], ctx: CommandContext) -> bool:
        with self._lock:
            if self.is_running:
                log.warning("engine already running")
                return False

            config = parse_run_config(document)
            self._stop_event.clear()
            self._last_result = None
            ctx.should_stop = self._stop_event.is_set

            self._thread = threading.Thread(target=self._run, args=(command, config, ctx), daemon=True)
            self._thread.start()
            return True

    def stop(self) -> None:
        if self.is_running:
            log.info("stop requested")
        self._stop_event.set()

    def shutdown(self, timeout_s: float = 2.0) -> None:
        self.stop()
        t = self._thread
        if t is not None:
            t.join(timeout=timeout_s)
        with self._lock:
            if self._thread is t:
                self._thread = None
        detach(self._run_log)

    def wait(self, timeout_s: float | None = None) -> CommandResult | None:
        t = self._thread
        if t is not None:
            t.join(timeout=timeout_s)
        return self._last_result

    def read_logs(self, since: int = 0) -> tuple[int, list[str]]:
        return self._run_log.read_logs(since)

    def _run(self, command: str, config, ctx: CommandContext) -> None:
        try:
            self._last_result = run_command(command, config, ctx)
        except Exception as e:
            log.exception("error: %s: %s", type(e).__name__, e)
        finally:
            with self._lock:
                if self._thread is threading.current_thread():
                    self._thread = None


__all__ = ["CommandEngine", "RunConfigError"]
