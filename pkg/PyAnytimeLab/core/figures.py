from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


_RC = {
    "svg.hashsalt": "pyanytimelab",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _finite(xs: Sequence[float], ys: Sequence[float]) -> tuple[list[float], list[float]]:
    pairs = [(x, y) for x, y in zip(xs, ys) if math.isfinite(y)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def write_gap_figure(
    path: Path,
    title: str,
    envelope: Mapping[int, float],
    methods: Mapping[str, Mapping[int, float]],
) -> Path:
    horizons = sorted(envelope)
    with plt.rc_context(_RC):
        fig, (ax_risk, ax_gap) = plt.subplots(1, 2, figsize=(9.0, 3.6))

        ax_risk.plot(horizons, [envelope[h] for h in horizons], "k--", marker="o", ms=3, label="cosine envelope")
        for name, risks in methods.items():
            xs, ys = _finite(horizons, [risks[h] for h in horizons])
            ax_risk.plot(xs, ys, marker="o", ms=3, label=name)
            gx, gy = _finite(horizons, [(risks[h] - envelope[h]) / envelope[h] for h in horizons])
            ax_gap.plot(gx, gy, marker="o", ms=3, label=name)

        ax_risk.set_xscale("log")
        ax_risk.set_yscale("log")
        ax_risk.set_xlabel("horizon (steps)")
        ax_risk.set_ylabel("excess risk")
        ax_risk.legend(fontsize=7)

        ax_gap.axhline(0.0, color="k", lw=0.8)
        ax_gap.set_xscale("log")
        ax_gap.set_xlabel("horizon (steps)")
        ax_gap.set_ylabel("relative gap to envelope (negative = better)")

        fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def write_trace_figure(path: Path, title: str, traces: Mapping[str, tuple[Sequence[int], Sequence[float]]]) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.6))
        for name, (steps, risks) in traces.items():
            xs, ys = _finite([s for s in steps if s > 0], [r for s, r in zip(steps, risks) if s > 0])
            if xs:
                ax.plot(xs, ys, label=name, lw=1.0)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("excess risk")
        ax.set_title(title)
        ax.legend(fontsize=6)
        fig.tight_layout()
        return _save(fig, path)
