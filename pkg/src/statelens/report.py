"""Static HTML report with matplotlib figures.

Figures are rendered to PNG files next to the delimited outputs, then
embedded into a single self-contained HTML document (base64 data URIs,
no network fetches), so the report stays viewable offline while the raw
figures and CSV tables remain available to other tools.
"""

from __future__ import annotations

import base64
import html
import shutil
import subprocess
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analytics import DeltaResult, Fingerprint, FitResult, VariabilityResult


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def render_fingerprint_heatmap(fp: Fingerprint, path) -> Path:
    fig, ax = plt.subplots(figsize=(max(6, 0.28 * len(fp.probe_names)), 2.5 + 0.3 * len(fp.class_labels)))
    im = ax.imshow(fp.matrix, aspect="auto", cmap="viridis", interpolation="nearest")
    ax.set_yticks(range(len(fp.class_labels)), [str(c) for c in fp.class_labels])
    ax.set_xticks(range(len(fp.probe_names)), fp.probe_names, rotation=90, fontsize=6)
    ax.set_ylabel("class")
    ax.set_title(f"{fp.model_id}: {fp.metric} utilization per class and probe")
    fig.colorbar(im, ax=ax, label=fp.metric)
    return _save(fig, Path(path))


def render_delta_histogram(delta: DeltaResult, path) -> Path:
    edges = delta.bin_edges
    centers = (edges[:-1] + edges[1:]) / 2
    width = (edges[1] - edges[0]) * 0.42
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(centers - width / 2, delta.counts1, width=width, label=delta.model_ids[0])
    ax.bar(centers + width / 2, delta.counts2, width=width, label=delta.model_ids[1])
    for rng in delta.disjoint_ranges:
        ax.axvspan(rng.low, rng.high, color="red", alpha=0.15)
    ax.set_xlabel("utilization value")
    ax.set_ylabel("matrix entries per bin")
    ax.set_title("fingerprint value histograms (shaded: single-model ranges)")
    ax.legend()
    return _save(fig, Path(path))


def render_variability(var: VariabilityResult, path) -> Path:
    fig, ax = plt.subplots(figsize=(max(6, 0.28 * len(var.probe_names)), 4))
    xs = np.arange(len(var.probe_names))
    for i, label in enumerate(var.class_labels):
        ax.plot(xs, var.sigma[i], marker="o", markersize=2.5, linewidth=0.8,
                label=f"class {label}")
    ax.set_xticks(xs, var.probe_names, rotation=90, fontsize=6)
    ax.set_ylabel("replicate std dev")
    ax.set_title(f"replicate variability (max {var.max_sigma:.4g} at {var.max_probe})")
    if len(var.class_labels) <= 10:
        ax.legend(fontsize=7)
    return _save(fig, Path(path))


def render_fit(samples, fit: FitResult, path, ylabel="mean utilization") -> Path:
    m = np.array([s[0] for s in samples], dtype=float)
    u = np.array([s[1] for s in samples], dtype=float)
    grid = np.linspace(m.min(), m.max(), 200)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(m, u, color="tab:blue", label="measured")
    ax.plot(grid, fit.predict(grid), color="tab:red",
            label=f"u = {fit.a:.4g} ln(M) + {fit.b:.4g}  (R²={fit.r_squared:.4f})")
    ax.set_xlabel("images M")
    ax.set_ylabel(ylabel)
    ax.set_title("utilization vs sample count")
    ax.legend()
    return _save(fig, Path(path))


def render_dot_svg(dot_text: str) -> str | None:
    """Pre-render DOT to SVG when a graphviz binary is available."""
    exe = shutil.which("dot")
    if exe is None:
        return None
    try:
        out = subprocess.run([exe, "-Tsvg"], input=dot_text.encode(),
                             capture_output=True, timeout=60)
    except (OSError, subprocess.TimeoutExpired):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.decode("utf-8", errors="replace")


def _embed_png(path: Path) -> str:
    data = base64.b64encode(path.read_bytes()).decode("ascii")
    return f'<img src="data:image/png;base64,{data}" style="max-width:100%">'


_PAGE = """<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>{title}</title>
<style>
 body {{ font-family: sans-serif; margin: 2em auto; max-width: 1100px; color: #222; }}
 h1 {{ border-bottom: 2px solid #444; }}
 h2 {{ margin-top: 2em; color: #333; }}
 table {{ border-collapse: collapse; font-size: 0.85em; }}
 td, th {{ border: 1px solid #bbb; padding: 3px 8px; text-align: left; }}
 pre {{ background: #f4f4f4; padding: 1em; overflow-x: auto; font-size: 0.75em; }}
 .note {{ color: #666; font-size: 0.9em; }}
</style></head><body>
<h1>{title}</h1>
{body}
</body></html>
"""


class ReportBuilder:
    """Accumulates sections, then writes one self-contained HTML file."""

    def __init__(self, title: str = "statelens report"):
        self.title = title
        self.sections: list[str] = []

    def add_section(self, heading: str, body_html: str) -> None:
        self.sections.append(f"<h2>{html.escape(heading)}</h2>\n{body_html}")

    def add_figure(self, heading: str, png_path: Path, note: str | None = None) -> None:
        body = _embed_png(Path(png_path))
        if note:
            body += f'\n<p class="note">{html.escape(note)}</p>'
        self.add_section(heading, body)

    def add_table(self, heading: str, header: list[str], rows: list[list], note=None) -> None:
        head = "".join(f"<th>{html.escape(str(h))}</th>" for h in header)
        body_rows = "\n".join(
            "<tr>" + "".join(f"<td>{html.escape(str(v))}</td>" for v in row) + "</tr>"
            for row in rows
        )
        table = f"<table><tr>{head}</tr>\n{body_rows}</table>"
        if note:
            table += f'\n<p class="note">{html.escape(note)}</p>'
        self.add_section(heading, table)

    def add_preformatted(self, heading: str, text: str) -> None:
        self.add_section(heading, f"<pre>{html.escape(text)}</pre>")

    def add_raw(self, heading: str, markup: str) -> None:
        self.add_section(heading, markup)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(_PAGE.format(title=html.escape(self.title),
                                     body="\n".join(self.sections)))
        return path
