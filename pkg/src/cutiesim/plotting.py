"""Figures rendered next to the CSV tables of the CLI.

Rendering goes through the non-interactive Agg backend so it works headless.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .activity import ITEMS, EnergyReport, ToggleStats  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_energy(reports: Sequence[EnergyReport], path) -> Path:
    """Stacked per-layer energy items, one panel group per report."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        n = len(reports)
        width = 0.8 / max(n, 1)
        for r_i, rep in enumerate(reports):
            x = np.arange(len(rep.layers)) + r_i * width
            bottom = np.zeros(len(rep.layers))
            for k_i, item in enumerate(ITEMS):
                vals = np.array([row[item] for row in rep.layers]) * 1e-6
                if not vals.any():
                    continue
                ax.bar(x, vals, width, bottom=bottom, color=f"C{k_i}",
                       label=item if r_i == 0 else None,
                       hatch="//" if r_i % 2 else None, edgecolor="white", linewidth=0.3)
                bottom += vals
        ax.set_xlabel("layer")
        ax.set_ylabel("energy [uJ]")
        ax.set_xticks(np.arange(len(reports[0].layers)) + width * (n - 1) / 2)
        ax.set_xticklabels([str(row["layer"]) for row in reports[0].layers])
        ax.set_title(" vs ".join(r.label or f"run {i}" for i, r in enumerate(reports)))
        ax.legend(fontsize=7, ncol=2)
        return _save(fig, path)


def plot_toggles(stats: Sequence[ToggleStats], path) -> Path:
    """Per-layer toggle probabilities at multiplier and adder-tree inputs."""
    with plt.rc_context(STYLE):
        fig, (ax_m, ax_a) = plt.subplots(1, 2, sharey=False)
        for i, st in enumerate(stats):
            layers = [lt.layer for lt in st.layers]
            ax_m.plot(layers, [lt.multiplier_toggle_prob for lt in st.layers], "o-", color=f"C{i}", label=st.label)
            ax_a.plot(layers, [lt.adder_input_toggle_prob for lt in st.layers], "o-", color=f"C{i}", label=st.label)
        ax_m.set_title("multiplier inputs")
        ax_a.set_title("adder-tree inputs")
        for ax in (ax_m, ax_a):
            ax.set_xlabel("layer")
            ax.set_ylim(bottom=0)
        ax_m.set_ylabel("toggle probability")
        ax_a.legend()
        return _save(fig, path)


def plot_tiling(rows: Sequence[dict], path) -> Path:
    """Energy breakdown per feature-map size and strategy."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        parts = ("feature_energy_uj", "weight_energy_uj", "compute_energy_uj")
        labels = [f"{r['fm']}\n{r['strategy'].replace('_', '-')}" for r in rows]
        bottom = np.zeros(len(rows))
        for i, part in enumerate(parts):
            vals = np.array([r[part] for r in rows])
            ax.bar(labels, vals, bottom=bottom, color=f"C{i}", label=part.rsplit("_", 2)[0])
            bottom += vals
        ax.set_yscale("log")
        ax.set_ylim(bottom=1.0)
        ax.set_ylabel("energy [uJ]")
        ax.legend()
        return _save(fig, path)


def plot_quantization(rows: Sequence[dict], path) -> Path:
    """Sparsity of each newly quantized subset over the schedule steps."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        keys = sorted({(r["layer"], r["strategy"]) for r in rows})
        for i, (layer, strat) in enumerate(keys):
            pts = [(r["step"], r["sparsity"]) for r in rows if (r["layer"], r["strategy"]) == (layer, strat)]
            steps, sp = zip(*pts)
            ax.plot(steps, sp, "o-", color=f"C{i % 10}", label=f"{layer}:{strat}")
        ax.set_xlabel("step")
        ax.set_ylabel("subset sparsity")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        return _save(fig, path)
