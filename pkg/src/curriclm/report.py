"""Loss-curve and metric reporting: CSV tables and an SVG overlay chart.

The SVG is generated directly (no plotting dependency) so identical
inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Mapping, Sequence

from .curriculum import LossTrace
from .errors import ValidationError
from .fileio import atomic_write_text
from .metrics import EvalReport

SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_WIDTH, _HEIGHT = 800, 480
_MARGIN_LEFT, _MARGIN_RIGHT, _MARGIN_TOP, _MARGIN_BOTTOM = 70, 160, 30, 50


def loss_curves_csv(traces: Mapping[str, Sequence[LossTrace]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["curriculum", "stage", "step", "train_loss", "val_loss"])
    for curriculum in traces:
        for trace in traces[curriculum]:
            for point in trace.points:
                writer.writerow(
                    [curriculum, trace.stage, point.step, repr(point.train_loss), repr(point.val_loss)]
                )
    return buffer.getvalue()


def metrics_csv(reports: Mapping[tuple[str, str], EvalReport]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["curriculum", "model_size", "bleu", "inform", "success", "combined"])
    for (curriculum, size), report in reports.items():
        writer.writerow(
            [curriculum, size, repr(report.bleu), repr(report.inform),
             repr(report.success), repr(report.combined)]
        )
    return buffer.getvalue()


def _scale(value: float, lo: float, hi: float, out_lo: float, out_hi: float) -> float:
    if hi == lo:
        return (out_lo + out_hi) / 2.0
    return out_lo + (value - lo) / (hi - lo) * (out_hi - out_lo)


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * k / (count - 1) for k in range(count)]


def loss_curves_svg(traces: Mapping[str, Sequence[LossTrace]]) -> str:
    """Overlaid validation-loss curves, one polyline per curriculum."""
    series: list[tuple[str, list[tuple[int, float]]]] = []
    for curriculum in traces:
        points: list[tuple[int, float]] = []
        for trace in traces[curriculum]:
            points.extend((p.step, p.val_loss) for p in trace.points)
        if points:
            series.append((curriculum, points))
    if not series:
        raise ValidationError("no trace points to plot")

    xs = [x for _, pts in series for x, _ in pts]
    ys = [y for _, pts in series for _, y in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    pad = 0.05 * (y_hi - y_lo) or 0.1
    y_lo, y_hi = y_lo - pad, y_hi + pad

    plot_left = _MARGIN_LEFT
    plot_right = _WIDTH - _MARGIN_RIGHT
    plot_top = _MARGIN_TOP
    plot_bottom = _HEIGHT - _MARGIN_BOTTOM

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<rect x="{plot_left}" y="{plot_top}" width="{plot_right - plot_left}" '
        f'height="{plot_bottom - plot_top}" fill="none" stroke="#333333"/>',
    ]
    for tick in _ticks(x_lo, x_hi):
        x = _scale(tick, x_lo, x_hi, plot_left, plot_right)
        out.append(
            f'<line x1="{x:.1f}" y1="{plot_bottom}" x2="{x:.1f}" y2="{plot_bottom + 5}" stroke="#333333"/>'
        )
        out.append(
            f'<text x="{x:.1f}" y="{plot_bottom + 20}" font-size="11" text-anchor="middle" '
            f'font-family="sans-serif">{tick:.0f}</text>'
        )
    for tick in _ticks(y_lo, y_hi):
        y = _scale(tick, y_lo, y_hi, plot_bottom, plot_top)
        out.append(
            f'<line x1="{plot_left - 5}" y1="{y:.1f}" x2="{plot_left}" y2="{y:.1f}" stroke="#333333"/>'
        )
        out.append(
            f'<text x="{plot_left - 8}" y="{y + 4:.1f}" font-size="11" text-anchor="end" '
            f'font-family="sans-serif">{tick:.3f}</text>'
        )
    out.append(
        f'<text x="{(plot_left + plot_right) / 2:.1f}" y="{_HEIGHT - 10}" font-size="12" '
        f'text-anchor="middle" font-family="sans-serif">optimizer step</text>'
    )
    out.append(
        f'<text x="18" y="{(plot_top + plot_bottom) / 2:.1f}" font-size="12" text-anchor="middle" '
        f'font-family="sans-serif" transform="rotate(-90 18 {(plot_top + plot_bottom) / 2:.1f})">'
        "validation loss (nats/token)</text>"
    )
    for k, (curriculum, points) in enumerate(series):
        color = SERIES_COLORS[k % len(SERIES_COLORS)]
        coords = " ".join(
            f"{_scale(x, x_lo, x_hi, plot_left, plot_right):.2f},"
            f"{_scale(y, y_lo, y_hi, plot_bottom, plot_top):.2f}"
            for x, y in points
        )
        out.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.8"/>'
        )
        legend_y = plot_top + 16 + 18 * k
        out.append(
            f'<line x1="{plot_right + 12}" y1="{legend_y}" x2="{plot_right + 36}" '
            f'y2="{legend_y}" stroke="{color}" stroke-width="1.8"/>'
        )
        out.append(
            f'<text x="{plot_right + 42}" y="{legend_y + 4}" font-size="12" '
            f'font-family="sans-serif">{curriculum}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(
    traces: Mapping[str, Sequence[LossTrace]],
    reports: Mapping[tuple[str, str], EvalReport] | None,
    outdir: str | Path,
    formats: Sequence[str] = ("csv", "svg"),
) -> list[Path]:
    """Write the loss-curve table, the metrics table, and the SVG chart."""
    if not traces or not any(t.points for group in traces.values() for t in group):
        raise ValidationError("no trace points to report")
    unknown = [f for f in formats if f not in ("csv", "svg")]
    if unknown:
        raise ValidationError(f"unknown report format {unknown[0]!r}")
    outdir = Path(outdir)
    written: list[Path] = []
    if "csv" in formats:
        written.append(atomic_write_text(outdir / "loss_curves.csv", loss_curves_csv(traces)))
        if reports:
            written.append(atomic_write_text(outdir / "metrics.csv", metrics_csv(reports)))
    if "svg" in formats:
        written.append(atomic_write_text(outdir / "loss_curves.svg", loss_curves_svg(traces)))
    return written
