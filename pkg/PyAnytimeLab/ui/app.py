from pathlib import Path

from PySide6.QtCore import QTimer
from PySide6.QtGui import QCloseEvent
from PySide6.QtWidgets import QLabel, QMainWindow

from PyAnytimeLab.core.engine import CommandEngine
from PyAnytimeLab.core.settings import AppSettings, load_settings
from PyAnytimeLab.ui.config_editor import ConfigEditorWidget


class MainWindow(QMainWindow):
    def __init__(self, settings: AppSettings | None = None) -> None:
        super().__init__()
        self.setWindowTitle("PyAnytime Lab")
        self.resize(980, 720)

        self._settings = settings or load_settings()

        self._engine = CommandEngine(self._settings.log_level)
        self._editor = ConfigEditorWidget(self._engine, self._settings)
        self.setCentralWidget(self._editor)

        self._status_label = QLabel()
        self.statusBar().addPermanentWidget(self._status_label)

        self._status_timer = QTimer(self)
        self._status_timer.setInterval(200)
        self._status_timer.timeout.connect(self._sync_status)
        self._status_timer.start()
        self._sync_status()

    def open_config(self, path: Path) -> None:
        self._editor.open_path(path)

    def _sync_status(self) -> None:
        if self._engine.is_running:
            self._status_label.setText("Status: Running")
            return
        result = self._engine.last_result
        if result is None:
            self._status_label.setText("Status: Idle")
        else:
            self._status_label.setText(f"Status: Idle (last {result.command}: exit {result.exit_code})")

    def closeEvent(self, event: QCloseEvent) -> None:
        try:
            self._status_timer.stop()
        except Exception:
            pass
        try:
            self._editor.cleanup()
        except Exception:
            pass
        try:
            self._engine.shutdown()
        except Exception:
            pass
        super().closeEvent(event)
