"""Emission of report artifacts: CSV tables, SVG plots and markdown summaries.

Every artifact starts with a provenance header naming the command line, the
config hash and the seeds that produced it.
"""
import csv
import io
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import jinja2
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from rdlab.schemas.evaluation import RdCurve, ReportTable
from rdlab.utils.common import InvalidArgument, content_hash, ensure_directory_exists, format_float, get_logger

logger = get_logger("reports")

plt.rcParams["svg.hashsalt"] = "rdlab"

# Template environment for markdown summaries
template_env = jinja2.Environment(
    autoescape=jinja2.select_autoescape(['html', 'xml'], default_for_string=False),
    undefined=jinja2.StrictUndefined,
    keep_trailing_newline=True,
)

SUMMARY_TEMPLATE = """# {{ table.name }}

- command: `{{ provenance.command }}`
- config hash: `{{ provenance.config_hash }}`
- seeds: {{ provenance.seeds | join(", ") }}

| {{ table.columns | join(" | ") }} |
|{% for _ in table.columns %} --- |{% endfor %}
{% for row in rows %}| {{ row | join(" | ") }} |
{% endfor %}
{% if table.annotations %}
Reference values (context only):
{% for note in table.annotations %}- {{ note }}
{% endfor %}{% endif %}"""


def provenance(command: Optional[str], run_hashes: Sequence[str], seeds: Sequence[int]) -> Dict[str, Any]:
    """Command, a hash over the contributing run hashes, and the seed list"""
    return {
        "command": command or "",
        "config_hash": content_hash(sorted(run_hashes)),
        "seeds": sorted({int(s) for s in seeds}),
    }


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def table_csv(table: ReportTable, meta: Dict[str, Any]) -> str:
    buffer = io.StringIO()
    buffer.write(f"# command: {meta['command']}\n")
    buffer.write(f"# config_hash: {meta['config_hash']}\n")
    buffer.write(f"# seeds: {','.join(str(s) for s in meta['seeds'])}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([_cell(v) for v in row])
    return buffer.getvalue()


def render_summary(table: ReportTable, meta: Dict[str, Any]) -> str:
    try:
        rows = [[_format_md(v) for v in row] for row in table.rows]
        return template_env.from_string(SUMMARY_TEMPLATE).render(table=table, rows=rows, provenance=meta)
    except jinja2.TemplateError as e:
        raise InvalidArgument(f"Error rendering summary for {table.name}: {str(e)}") from e


def _format_md(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_series(path: Path, x_label: str, y_label: str, series: Dict[str, List[List[float]]],
                title: str = "", log_x: bool = False) -> Path:
    """Line plot of named (x, y) series"""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, marker="o", label=label)
    if log_x:
        ax.set_xscale("log")
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    if title:
        ax.set_title(title)
    if series:
        ax.legend()
    ax.grid(True, alpha=0.3)
    _save_svg(fig, path)
    return path


def plot_rd_curves(path: Path, curves: Sequence[RdCurve], title: str = "") -> Path:
    """Rate on a log x-axis against quality in dB"""
    series = {c.label or f"curve {i}": [c.sorted().rates, c.sorted().qualities] for i, c in enumerate(curves)}
    return plot_series(path, "rate (bits/dim)", "quality (dB)", series, title=title, log_x=True)


def write_report(table: ReportTable, out_dir, meta: Dict[str, Any], stem: Optional[str] = None,
                 plot: Optional[Dict[str, Any]] = None, rd_curves: Sequence[RdCurve] = ()) -> ReportTable:
    """Write <stem>.csv, <stem>.md and optionally <stem>.svg and <stem>_rd.svg; returns the table with file paths"""
    out = Path(out_dir)
    ensure_directory_exists(str(out))
    stem = stem or table.name
    files = []
    csv_path = out / f"{stem}.csv"
    csv_path.write_text(table_csv(table, meta))
    files.append(str(csv_path))
    md_path = out / f"{stem}.md"
    md_path.write_text(render_summary(table, meta))
    files.append(str(md_path))
    if plot is not None:
        svg_path = out / f"{stem}.svg"
        plot_series(svg_path, **plot)
        files.append(str(svg_path))
    if rd_curves:
        rd_path = out / f"{stem}_rd.svg"
        plot_rd_curves(rd_path, rd_curves, title=table.name.replace("_", " "))
        files.append(str(rd_path))
    logger.info(f"Wrote {table.name} report to {out}")
    return table.model_copy(update={"files": files})
