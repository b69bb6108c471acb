"""Static SVG figures with byte-stable output."""

from __future__ import annotations

import io
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write_bytes  # noqa: E402

_STYLE = {"svg.hashsalt": "negplan", "svg.fonttype": "none", "figure.figsize": (6.0, 3.6)}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def smooth(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing moving average; the first points average what is available."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def line_plot(path, series: Mapping[str, Sequence[float]], title: str, xlabel: str, ylabel: str) -> None:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for name, ys in series.items():
            ys = np.asarray(ys, dtype=float)
            ax.plot(np.arange(len(ys)), ys, marker="o" if len(ys) == 1 else None, label=name)
        ax.set(title=title, xlabel=xlabel, ylabel=ylabel)
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        _save(fig, path)


def bar_plot(path, labels: Sequence[str], values: Sequence[float], title: str, ylabel: str) -> None:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.bar(list(labels), list(values), color="tab:blue")
        ax.set(title=title, ylabel=ylabel)
        fig.tight_layout()
        _save(fig, path)


def histogram(path, values: Sequence[float], title: str, xlabel: str, bins: int = 20, value_range=(0.0, 1.0)) -> None:
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins, range=value_range)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="black")
        ax.set(title=title, xlabel=xlabel, ylabel="scenes")
        fig.tight_layout()
        _save(fig, path)
