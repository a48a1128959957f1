"""Static line charts written next to the CSV outputs."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the SVG bytes independent of the run date
_SVG_META = {"Date": None, "Creator": "symrl"}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def plot_curves(path, iters: Sequence[int], panels: Mapping[str, Mapping[str, tuple]],
                title: str = "") -> None:
    """One panel per metric, one line per label with an optional +-std band.

    ``panels[metric][label] = (mean, std)``; ``std`` may be None.
    """
    fig, axes = plt.subplots(len(panels), 1, figsize=(7, 3 * len(panels)), sharex=True, squeeze=False)
    x = np.asarray(iters)
    for ax, (metric, curves) in zip(axes[:, 0], panels.items()):
        for label, (mean, std) in curves.items():
            mean = np.asarray(mean, dtype=float)
            line, = ax.plot(x, mean, label=label, lw=1.2)
            if std is not None:
                std = np.asarray(std, dtype=float)
                ax.fill_between(x, mean - std, mean + std, color=line.get_color(), alpha=0.2, lw=0)
        ax.set_ylabel(metric)
        ax.grid(alpha=0.3)
        ax.legend(fontsize="small")
    axes[-1, 0].set_xlabel("iteration")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    _save(fig, path)
