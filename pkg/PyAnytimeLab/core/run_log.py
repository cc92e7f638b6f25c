from collections import deque
import logging
import threading


PACKAGE_LOGGER = "PyAnytimeLab"


class RunLog(logging.Handler):
    """Sequenced ring buffer of formatted log lines.

    Readers poll with the last sequence number they saw, so a UI timer can
    drain new lines without holding the lock while rendering.
    """

    def __init__(self, maxlen: int = 2000, level: int = logging.INFO) -> None:
        super().__init__(level=level)
        self._buffer_lock = threading.Lock()
        self._seq = 0
        self._buffer: deque[tuple[int, str]] = deque(maxlen=maxlen)
        self.setFormatter(logging.Formatter("%(asctime)s %(name)s: %(message)s", datefmt="%H:%M:%S"))

    def emit(self, record: logging.LogRecord) -> None:
        try:
            message = self.format(record)
        except Exception:
            self.handleError(record)
            return
        self.append(message)

    def append(self, message: str) -> None:
        with self._buffer_lock:
            self._seq += 1
            self._buffer.append((self._seq, message))

    def read_logs(self, since: int = 0) -> tuple[int, list[str]]:
        with self._buffer_lock:
            if since <= 0:
                messages = [m for _i, m in self._buffer]
            else:
                messages = [m for i, m in self._buffer if i > since]
            last = self._seq
        return last, messages

    def clear(self) -> None:
        with self._buffer_lock:
            self._buffer.clear()


def attach(handler: logging.Handler, level: str | int = logging.INFO) -> logging.Logger:
    logger = logging.getLogger(PACKAGE_LOGGER)
    if handler not in logger.handlers:
        logger.addHandler(handler)
    logger.setLevel(level)
    return logger


def detach(handler: logging.Handler) -> None:
    logging.getLogger(PACKAGE_LOGGER).removeHandler(handler)
