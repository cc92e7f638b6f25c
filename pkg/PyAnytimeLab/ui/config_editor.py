import json
from pathlib import Path
from typing import Any

from PySide6.QtCore import QTimer
from PySide6.QtWidgets import (
    QCheckBox,
    QComboBox,
    QFileDialog,
    QGroupBox,
    QHBoxLayout,
    QLabel,
    QLineEdit,
    QMessageBox,
    QPushButton,
    QPlainTextEdit,
    QSpinBox,
    QTabWidget,
    QVBoxLayout,
    QWidget,
)

from PyAnytimeLab.core.commands import COMMANDS, CommandContext
from PyAnytimeLab.core.engine import CommandEngine
from PyAnytimeLab.core.paths import default_output_root, runs_examples_dir, runs_saved_dir
from PyAnytimeLab.core.run_config import RunConfigError, load_run_config, parse_run_config, save_run_config
from PyAnytimeLab.core.settings import AppSettings


_DEFAULT_RUN = {
    "schema_version": 1,
    "name": "untitled",
    "problem": {"dimension": 200, "capacity": 2.0, "source": 1.5, "noise_var": 1.0},
    "steps": 1000,
    "checkpoints": [10, 100, 1000],
    "schedules": [{"kind": "constant", "lr_frac": 0.5}],
    "averaging": [{"kind": "none"}, {"kind": "tail_fraction", "value": 0.5}],
}


class ConfigEditorWidget(QWidget):
    def __init__(self, engine: CommandEngine, settings: AppSettings) -> None:
        super().__init__()
        self._engine = engine
        self._settings = settings
        self._cleaned_up = False
        self._last_log_seq = 0
        self._current_path: Path | None = None
        self._reported = None

        self._editor = QPlainTextEdit()
        self._editor.setPlaceholderText("Paste or write a run config JSON here...")
        self._editor.setTabStopDistance(32)

        self._logs = QPlainTextEdit()
        self._logs.setObjectName("logs")
        self._logs.setReadOnly(True)
        self._logs.setMaximumBlockCount(4000)

        self._command = QComboBox()
        self._command.addItems(list(COMMANDS))
        self._out_dir = QLineEdit()
        self._out_dir.setPlaceholderText("output directory (default: <root>/<name>-<command>)")
        self._jobs = QSpinBox()
        self._jobs.setRange(1, 256)
        self._jobs.setValue(int(settings.default_jobs))
        self._overwrite = QCheckBox("Overwrite")
        self._overwrite.setChecked(bool(settings.overwrite))

        self._btn_new = QPushButton("New")
        self._btn_format = QPushButton("Format")
        self._btn_validate = QPushButton("Check")
        self._btn_run = QPushButton("Run")
        self._btn_stop = QPushButton("Stop")
        self._btn_stop.setObjectName("secondary")
        self._btn_load = QPushButton("Load")
        self._btn_load.setObjectName("secondary")
        self._btn_save = QPushButton("Save")
        self._btn_save.setObjectName("secondary")
        self._btn_save_as = QPushButton("Save As")
        self._btn_save_as.setObjectName("secondary")
        self._btn_clear_logs = QPushButton("Clear Logs")
        self._btn_clear_logs.setObjectName("secondary")

        self._build_layout()
        self._wire_events()

        self._log_timer = QTimer(self)
        self._log_timer.setInterval(75)
        self._log_timer.timeout.connect(self._drain_logs)
        self._log_timer.start()

        self._state_timer = QTimer(self)
        self._state_timer.setInterval(150)
        self._state_timer.timeout.connect(self._sync_state)
        self._state_timer.start()

        self._editor.setPlainText(json.dumps(_DEFAULT_RUN, indent=2))

    def cleanup(self) -> None:
        if self._cleaned_up:
            return
        self._cleaned_up = True
        try:
            self._log_timer.stop()
            self._state_timer.stop()
        except Exception:
            pass

    def _build_layout(self) -> None:
        root = QVBoxLayout(self)

        tabs = QTabWidget()
        tabs.addTab(self._build_editor_tab(), "Run Config")
        tabs.addTab(self._build_logs_tab(), "Logs")
        root.addWidget(tabs)

    def _build_editor_tab(self) -> QWidget:
        w = QWidget()
        l = QVBoxLayout(w)

        bar = QHBoxLayout()
        bar.addWidget(self._btn_new)
        bar.addWidget(self._btn_format)
        bar.addWidget(self._btn_validate)
        bar.addStretch(1)
        bar.addWidget(self._btn_load)
        bar.addWidget(self._btn_save)
        bar.addWidget(self._btn_save_as)
        l.addLayout(bar)

        run_bar = QHBoxLayout()
        run_bar.addWidget(QLabel("Command"))
        run_bar.addWidget(self._command)
        run_bar.addWidget(QLabel("Jobs"))
        run_bar.addWidget(self._jobs)
        run_bar.addWidget(self._out_dir, 1)
        run_bar.addWidget(self._overwrite)
        run_bar.addSpacing(12)
        run_bar.addWidget(self._btn_run)
        run_bar.addWidget(self._btn_stop)
        l.addLayout(run_bar)

        box = QGroupBox("Run config JSON")
        box_l = QVBoxLayout(box)
        box_l.addWidget(self._editor)
        l.addWidget(box, 1)
        return w

    def _build_logs_tab(self) -> QWidget:
        w = QWidget()
        l = QVBoxLayout(w)

        top = QHBoxLayout()
        top.addStretch(1)
        top.addWidget(self._btn_clear_logs)
        l.addLayout(top)

        box = QGroupBox("Logs")
        box_l = QVBoxLayout(box)
        box_l.addWidget(self._logs)
        l.addWidget(box, 1)
        return w

    def _wire_events(self) -> None:
        self._btn_new.clicked.connect(self._new_config)
        self._btn_format.clicked.connect(self._format_json)
        self._btn_validate.clicked.connect(self._validate_current)
        self._btn_run.clicked.connect(self._run_current)
        self._btn_stop.clicked.connect(self._engine.stop)
        self._btn_load.clicked.connect(self._load)
        self._btn_save.clicked.connect(self._save)
        self._btn_save_as.clicked.connect(lambda: self._save(save_as=True))
        self._btn_clear_logs.clicked.connect(self._logs.clear)

    def _parse_editor_json(self) -> dict[str, Any]:
        raw = self._editor.toPlainText()
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as e:
            raise RunConfigError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}")
        if not isinstance(data, dict):
            raise RunConfigError("run config must be a JSON object")
        return data

    def _new_config(self) -> None:
        if self._engine.is_running:
            return
        self._current_path = None
        self._editor.setPlainText(json.dumps(_DEFAULT_RUN, indent=2))

    def _format_json(self) -> None:
        try:
            data = self._parse_editor_json()
        except RunConfigError as e:
            QMessageBox.warning(self, "Invalid JSON", str(e))
            return
        self._editor.setPlainText(json.dumps(data, indent=2))

    def _validate_current(self) -> None:
        try:
            config = parse_run_config(self._parse_editor_json())
        except RunConfigError as e:
            QMessageBox.warning(self, "Invalid run config", str(e))
            return
        QMessageBox.information(self, "Valid", f"Run config is valid.\nconfig hash {config.config_hash[:12]}")

    def _run_current(self) -> None:
        if self._engine.is_running:
            return
        command = self._command.currentText()
        try:
            document = self._parse_editor_json()
            name = parse_run_config(document).name
        except RunConfigError as e:
            QMessageBox.warning(self, "Invalid run config", str(e))
            return

        out_text = self._out_dir.text().strip()
        out_dir = Path(out_text) if out_text else default_output_root(self._settings.default_output_root) / f"{name}-{command}"
        ctx = CommandContext(
            out_dir=out_dir,
            jobs=int(self._jobs.value()),
            overwrite=self._overwrite.isChecked(),
            settings=self._settings,
        )
        self._engine.start(command, document, ctx)

    def _load(self) -> None:
        if self._engine.is_running:
            return
        start_dir = runs_saved_dir()
        if not start_dir.exists():
            start_dir = runs_examples_dir()
        file_path, _ = QFileDialog.getOpenFileName(
            self,
            "Load Run Config",
            str(start_dir),
            "Run config JSON (*.json);;All Files (*.*)",
        )
        if not file_path:
            return
        self.open_path(Path(file_path))

    def open_path(self, path: Path) -> None:
        try:
            config = load_run_config(path)
        except (RunConfigError, OSError) as e:
            QMessageBox.critical(self, "Load failed", str(e))
            return
        self._current_path = path
        self._editor.setPlainText(json.dumps(config.document, indent=2))

    def _save(self, save_as: bool = False) -> None:
        if self._engine.is_running:
            return
        try:
            document = self._parse_editor_json()
            parse_run_config(document)
        except RunConfigError as e:
            QMessageBox.warning(self, "Invalid run config", str(e))
            return

        if save_as or self._current_path is None:
            start_dir = runs_saved_dir()
            start_dir.mkdir(parents=True, exist_ok=True)
            file_path, _ = QFileDialog.getSaveFileName(
                self,
                "Save Run Config",
                str(start_dir / "run.json"),
                "Run config JSON (*.json);;All Files (*.*)",
            )
            if not file_path:
                return
            path = Path(file_path)
        else:
            path = self._current_path

        try:
            save_run_config(path, document)
        except OSError as e:
            QMessageBox.critical(self, "Save failed", f"{type(e).__name__}: {e}")
            return
        self._current_path = path

    def _drain_logs(self) -> None:
        last, messages = self._engine.read_logs(self._last_log_seq)
        if messages:
            for msg in messages:
                self._logs.appendPlainText(msg)
            self._last_log_seq = last

        result = self._engine.last_result
        if result is not None and result is not self._reported:
            self._reported = result
            self._logs.appendPlainText(f"exit code {result.exit_code}; outputs in {result.out_dir}")

    def _sync_state(self) -> None:
        running = self._engine.is_running
        self._btn_run.setEnabled(not running)
        self._btn_stop.setEnabled(running)

        for w in (self._btn_new, self._btn_format, self._btn_validate, self._btn_load, self._btn_save, self._btn_save_as):
            w.setEnabled(not running)
