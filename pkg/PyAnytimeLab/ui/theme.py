from PySide6.QtGui import QFontDatabase
from PySide6.QtWidgets import QApplication

PALETTE = {
    "window": "#F4F6F5",
    "field": "#FFFFFF",
    "border": "#CBD5D1",
    "accent": "#0F766E",
    "accent_muted": "#8CC7C0",
    "secondary": "#E6ECEA",
    "text": "#10201D",
    "log_bg": "#0B1F1C",
    "log_text": "#D7F2EC",
}

_STYLESHEET = """
QWidget {{ font-size: 13px; color: {text}; }}
QMainWindow {{ background: {window}; }}

QLineEdit, QSpinBox, QComboBox, QPlainTextEdit {{
    background: {field};
    border: 1px solid {border};
    border-radius: 6px;
    padding: 4px 6px;
}}
QPlainTextEdit#logs {{ background: {log_bg}; color: {log_text}; }}

QPushButton {{
    background: {accent};
    color: white;
    border: none;
    border-radius: 6px;
    padding: 7px 12px;
    font-weight: 600;
}}
QPushButton:disabled {{ background: {accent_muted}; }}
QPushButton#secondary {{
    background: {secondary};
    color: {text};
    border: 1px solid {border};
}}

QSplitter::handle {{ background: {border}; }}
"""


def stylesheet(palette: dict[str, str] | None = None) -> str:
    colors = dict(PALETTE)
    colors.update(palette or {})
    return _STYLESHEET.format(**colors)


def apply_theme(app: QApplication) -> None:
    app.setStyleSheet(stylesheet())
    # config JSON and logs both read better in a fixed-width face
    font = QFontDatabase.systemFont(QFontDatabase.SystemFont.FixedFont)
    font.setPointSize(max(font.pointSize(), 10))
    app.setFont(font, "QPlainTextEdit")
