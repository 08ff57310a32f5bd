"""Candidate logs, depth/width population statistics, and SVG scatter plots.

Plots are plain hand-written SVG so output bytes are deterministic and the
package needs no plotting dependency.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from hybridnas.search import Candidate, SearchHistory


@dataclass(frozen=True)
class PopulationRow:
    """Depth/width summary of one candidate."""

    id: str
    depth: int  # total block count, classifier included
    max_channels: int  # widest channel dimension anywhere in the graph
    params: int
    val_accuracy: float


def candidate_stats(candidate: Candidate) -> PopulationRow:
    max_channels = max(
        node["shape"][0] for node in candidate.graph_json["nodes"] if node["shape"]
    )
    return PopulationRow(
        id=candidate.id,
        depth=candidate.arch.depth,
        max_channels=max_channels,
        params=candidate.cost.params,
        val_accuracy=candidate.val_accuracy if candidate.val_accuracy is not None else 0.0,
    )


def population_stats(history: SearchHistory) -> list[PopulationRow]:
    """One row per ok candidate, ordered by birth index."""
    return [candidate_stats(c) for c in history.candidates if c.status == "ok"]


def write_stats_csv(rows: Sequence[PopulationRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("id,depth,max_channels,params,val_accuracy\n")
        for row in rows:
            fh.write(
                f"{row.id},{row.depth},{row.max_channels},{row.params},{row.val_accuracy!r}\n"
            )


def read_stats_csv(path: str | Path) -> list[PopulationRow]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    rows = []
    for line in lines[1:]:
        id_, depth, max_ch, params, acc = line.split(",")
        rows.append(PopulationRow(id_, int(depth), int(max_ch), int(params), float(acc)))
    return rows


def write_pareto_csv(history: SearchHistory, front: Sequence[Candidate], path: str | Path) -> None:
    """Subset of history.csv rows restricted to the Pareto front."""
    front_ids = {c.id for c in front}
    rows = history.csv_rows()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(rows[0]) + "\n")
        for row in rows[1:]:
            if row[0] in front_ids:
                fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# SVG scatter
# ---------------------------------------------------------------------------

_WIDTH, _HEIGHT = 640, 480
_MARGIN = 60


def _scale(values: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        hi = lo + 1.0
    return lo, hi


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def emit_scatter(
    points: Sequence[tuple[float, float]],
    front_points: Sequence[tuple[float, float]],
    axes: tuple[str, str],
    out_path: str | Path,
) -> None:
    """Self-contained SVG: one circle per point, front joined by a polyline.

    The front polyline is drawn in ascending x order.  Deterministic bytes
    for identical inputs.
    """
    x_label, y_label = axes
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<line x1="{_MARGIN}" y1="{_HEIGHT - _MARGIN}" x2="{_WIDTH - _MARGIN}" '
        f'y2="{_HEIGHT - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" '
        f'y2="{_HEIGHT - _MARGIN}" stroke="black"/>',
        f'<text x="{_WIDTH // 2}" y="{_HEIGHT - 15}" text-anchor="middle" '
        f'font-size="14">{x_label}</text>',
        f'<text x="18" y="{_HEIGHT // 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 18 {_HEIGHT // 2})">{y_label}</text>',
    ]

    if points:
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        x_lo, x_hi = _scale(xs)
        y_lo, y_hi = _scale(ys)

        def px(x: float) -> float:
            return _MARGIN + (x - x_lo) / (x_hi - x_lo) * (_WIDTH - 2 * _MARGIN)

        def py(y: float) -> float:
            return _HEIGHT - _MARGIN - (y - y_lo) / (y_hi - y_lo) * (_HEIGHT - 2 * _MARGIN)

        for tick, value in (("x", x_lo), ("x", x_hi), ("y", y_lo), ("y", y_hi)):
            if tick == "x":
                parts.append(
                    f'<text x="{_fmt(px(value))}" y="{_HEIGHT - _MARGIN + 18}" '
                    f'text-anchor="middle" font-size="11">{_fmt(value)}</text>'
                )
            else:
                parts.append(
                    f'<text x="{_MARGIN - 8}" y="{_fmt(py(value))}" '
                    f'text-anchor="end" font-size="11">{_fmt(value)}</text>'
                )

        if front_points:
            ordered = sorted(front_points)
            coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in ordered)
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="crimson" stroke-width="1.5"/>'
            )
        for x, y in points:
            parts.append(
                f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3" '
                f'fill="steelblue" fill-opacity="0.7"/>'
            )

    parts.append("</svg>")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
        fh.write("\n")
