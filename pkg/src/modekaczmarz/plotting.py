"""SVG line charts of aggregated error curves."""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import exceptions  # noqa: E402

if TYPE_CHECKING:
    from .harness import AggregateRow


def plot_error_curves(rows: Sequence[AggregateRow], path: str | Path, title: str = "") -> Path:
    """Mean squared error per sweep point on a log scale, shaded between the 5th and 95th percentiles."""

    path = Path(path)
    series: dict[str, list[AggregateRow]] = {}
    for row in rows:
        if row.count:
            series.setdefault(row.point.key, []).append(row)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    try:
        for label, points in series.items():
            points.sort(key=lambda r: r.iteration)
            its = [r.iteration for r in points]
            # log scale cannot show exact zeros
            floor = 1e-300
            line = ax.plot(its, [max(r.mean, floor) for r in points], label=label, linewidth=1.2)[0]
            ax.fill_between(
                its,
                [max(r.p05, floor) for r in points],
                [max(r.p95, floor) for r in points],
                color=line.get_color(),
                alpha=0.2,
            )
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(r"$\|x_i - x^*\|^2$")
        if title:
            ax.set_title(title)
        if series:
            ax.legend(fontsize="small")
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    except (OSError, ValueError) as e:
        raise exceptions.SerializationError(f"Failed to write plot {path}: {e}") from e
    finally:
        plt.close(fig)
    return path
