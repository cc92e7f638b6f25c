import math

from PyAnytimeLab.core.figures import write_gap_figure, write_trace_figure


def test_gap_figure_is_deterministic(tmp_path):
    envelope = {100: 1.0, 200: 0.6, 400: 0.35}
    methods = {"constant": {100: 1.2, 200: 0.8, 400: 0.6}, "wsd": {100: 1.05, 200: math.inf, 400: 0.36}}
    first = write_gap_figure(tmp_path / "a.svg", "a1.5_b1.5", envelope, methods)
    second = write_gap_figure(tmp_path / "b.svg", "a1.5_b1.5", envelope, methods)
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes().lstrip().startswith(b"<?xml")


def test_trace_figure_skips_initial_row(tmp_path):
    traces = {"constant:last": ([0, 10, 100], [1.0, 0.5, 0.1]), "from60": ([0, 10, 100], [1.0, math.nan, 0.2])}
    path = write_trace_figure(tmp_path / "nested" / "traces.svg", "inst", traces)
    assert path.exists()
    assert b"Date" not in path.read_bytes()
