"""Figures and the HTML report for benchmark, trace and weights runs."""

import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from jinja2 import Environment  # noqa: E402

from .errors import ConfigError  # noqa: E402

logger = logging.getLogger(__name__)


REPORT_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{{ title }}</title>
<style>
  body { background: {{ colors.background }}; color: {{ colors.text }}; font-family: sans-serif; margin: 2em; }
  h1, h2 { color: {{ colors.accent }}; }
  table { border-collapse: collapse; margin-bottom: 2em; }
  th, td { border: 1px solid {{ colors.grid }}; padding: 4px 10px; text-align: right; }
  th { background: {{ colors.header }}; }
  img { max-width: 100%; margin-bottom: 2em; border: 1px solid {{ colors.grid }}; }
</style>
</head>
<body>
<h1>{{ title }}</h1>
{% for name, rows in tables.items() %}
<h2>{{ name }}</h2>
{% if rows %}
<table>
  <tr>{% for col in rows[0].keys() %}<th>{{ col }}</th>{% endfor %}</tr>
  {% for row in rows %}
  <tr>{% for value in row.values() %}<td>{{ value | fmt }}</td>{% endfor %}</tr>
  {% endfor %}
</table>
{% else %}
<p>no rows</p>
{% endif %}
{% endfor %}
{% for caption, src in figures %}
<h2>{{ caption }}</h2>
<img src="{{ src }}" alt="{{ caption }}">
{% endfor %}
</body>
</html>
"""


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


class ResultVisualizer:
    """Draws Pareto fronts, step traces and node error surfaces in a light or dark theme."""

    THEMES = {
        "light": {
            "background": "#ffffff",
            "text": "#333333",
            "grid": "#cccccc",
            "header": "#eef3fb",
            "accent": "#2E5C8A",
            "highlight": "#E74C3C",
            "series": ["#4A90E2", "#F39C12", "#27AE60", "#8E44AD", "#E74C3C", "#16A085"],
            "colormap": "viridis",
        },
        "dark": {
            "background": "#0a1931",
            "text": "#e8f4fd",
            "grid": "#4a90e2",
            "header": "#185adb",
            "accent": "#00d9ff",
            "highlight": "#00ff88",
            "series": ["#00d9ff", "#F39C12", "#00ff88", "#ff6bcb", "#ffd166", "#a0c4ff"],
            "colormap": "magma",
        },
    }

    def __init__(self, theme: str = "light", dpi: int = 150):
        if theme not in self.THEMES:
            raise ConfigError(f"unknown theme {theme!r}", field="theme")
        self.theme = theme
        self.colors = self.THEMES[theme]
        self.dpi = dpi

    def _figure(self, rows: int = 1, figsize=(8, 6)):
        fig, axes = plt.subplots(rows, 1, figsize=figsize, squeeze=False)
        fig.patch.set_facecolor(self.colors["background"])
        for ax in axes[:, 0]:
            ax.set_facecolor(self.colors["background"])
            ax.tick_params(colors=self.colors["text"])
            for spine in ax.spines.values():
                spine.set_color(self.colors["grid"])
            ax.xaxis.label.set_color(self.colors["text"])
            ax.yaxis.label.set_color(self.colors["text"])
            ax.title.set_color(self.colors["text"])
            ax.grid(True, color=self.colors["grid"], alpha=0.4)
        return fig, axes[:, 0]

    def _legend(self, ax):
        if ax.get_legend_handles_labels()[0]:
            ax.legend(facecolor=self.colors["background"], edgecolor=self.colors["grid"], labelcolor=self.colors["text"])

    def _save(self, fig, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.tight_layout()
        fig.savefig(path, dpi=self.dpi, facecolor=self.colors["background"], bbox_inches="tight")
        plt.close(fig)
        logger.info("figure saved to %s", path)
        return path

    def save_pareto_plot(self, points: Sequence, path, title: str = "Error per step versus evaluations") -> Path:
        """Log-log front per method family; learner rows are drawn as single markers."""
        fig, (ax,) = self._figure()
        families: Dict[str, List] = defaultdict(list)
        for p in points:
            families[p.family].append(p)
        series = self.colors["series"]
        for i, (family, members) in enumerate(families.items()):
            members = sorted(members, key=lambda p: p.avg_evaluations)
            x = [p.avg_evaluations for p in members]
            y = [p.avg_error_per_step for p in members]
            color = series[i % len(series)]
            if family in ("learner", "meta"):
                for p in members:
                    ax.scatter(p.avg_evaluations, p.avg_error_per_step, s=80, marker="*", color=color, label=p.method, zorder=3)
            else:
                ax.plot(x, y, marker="o", color=color, label=family)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("evaluations")
        ax.set_ylabel("average error per step")
        ax.set_title(title)
        self._legend(ax)
        return self._save(fig, path)

    def save_trace_plot(self, result, path, tol: Optional[float] = None, title: str = "Step trace") -> Path:
        """Integrand or state (top) and chosen step sizes (bottom); violations marked."""
        fig, (top, bottom) = self._figure(rows=2, figsize=(9, 7))
        rows = result.rows
        pos = np.array([r.position for r in rows])
        values = np.array([np.atleast_1d(r.value) for r in rows], dtype=float)
        series = self.colors["series"]
        for k in range(values.shape[1]):
            name = "f" if result.kind == "quadrature" else f"x{k + 1}"
            top.plot(pos, values[:, k], color=series[k % len(series)], label=name)
        for t in result.switch_times:
            top.axvline(t, color=self.colors["accent"], linestyle="--", alpha=0.7)
        top.set_ylabel("f" if result.kind == "quadrature" else "state")
        top.set_title(title)
        self._legend(top)

        hs = np.array([r.h for r in rows])
        bottom.step(pos, hs, where="post", color=series[0], label="h")
        bad = np.array([r.violation for r in rows], dtype=bool)
        if bad.any():
            bottom.scatter(pos[bad], hs[bad], color=self.colors["highlight"], zorder=3,
                           label=f"error >= tol{'' if tol is None else f' ({tol:g})'}")
        bottom.set_xlabel("x" if result.kind == "quadrature" else "t")
        bottom.set_ylabel("step size")
        self._legend(bottom)
        return self._save(fig, path)

    def save_error_surface(self, surface, path, analytic=None, title: str = "Fitted error over node positions") -> Path:
        """One-node error curve (with an optional closed-form curve) or two-node heat map."""
        fig, (ax,) = self._figure()
        if surface.n_nodes == 1:
            ax.plot(surface.axis, surface.eps, color=self.colors["series"][0], label="fitted eps")
            if analytic is not None:
                xs, eps = analytic
                ax.plot(xs, eps, color=self.colors["series"][1], linestyle="--", label="closed form")
            ax.axvline(surface.best_nodes[0], color=self.colors["highlight"], linestyle=":",
                       label=f"minimum at {surface.best_nodes[0]:.3f}")
            ax.set_xlabel("x1")
            ax.set_ylabel("eps")
            self._legend(ax)
        else:
            extent = [surface.axis[0], surface.axis[-1], surface.axis[0], surface.axis[-1]]
            image = ax.imshow(np.log10(surface.eps.T), origin="lower", extent=extent, cmap=self.colors["colormap"], aspect="auto")
            colorbar = fig.colorbar(image, ax=ax)
            colorbar.set_label("log10 eps", color=self.colors["text"])
            ax.scatter(*surface.best_nodes, color=self.colors["highlight"], marker="x", s=80)
            ax.set_xlabel("x1")
            ax.set_ylabel("x2")
        ax.set_title(title)
        return self._save(fig, path)

    def save_training_plot(self, log, path, window: int = 50, title: str = "Training reward") -> Path:
        fig, (ax,) = self._figure()
        rewards = [e.mean_reward for e in log.episodes]
        ax.plot(range(len(rewards)), rewards, color=self.colors["series"][0], alpha=0.4, label="episode")
        ma = log.moving_average(window)
        if ma.size:
            ax.plot(range(window - 1, window - 1 + ma.size), ma, color=self.colors["series"][1], label=f"moving average ({window})")
        ax.set_xlabel("episode")
        ax.set_ylabel("mean reward")
        ax.set_title(title)
        self._legend(ax)
        return self._save(fig, path)

    def save_html_report(self, title: str, tables: Dict[str, List[dict]], figures: Sequence, path) -> Path:
        """Render result tables and links to the figures; figure paths are made relative to the report."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        links = []
        for caption, fig_path in figures:
            fig_path = Path(fig_path)
            try:
                src = fig_path.relative_to(path.parent)
            except ValueError:
                src = fig_path
            links.append((caption, src.as_posix()))
        env = Environment()
        env.filters["fmt"] = _fmt
        template = env.from_string(REPORT_TEMPLATE)
        html = template.render(title=title, tables=tables, figures=links, colors=self.colors)
        with open(path, "w", encoding="utf-8") as f:
            f.write(html)
        logger.info("report saved to %s", path)
        return path
