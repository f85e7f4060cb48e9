"""SVG panels of Monte Carlo statistics: median line over a 5-95 % band."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .simharness import StatsBundle  # noqa: E402

COLORS = {"dmpc": "tab:red", "cempc": "tab:blue"}
PANELS = ("altitude", "input", "mode_prob", "param_mean")


def _channels(stats, plot_cfg: dict) -> dict:
    alt = f"x{plot_cfg.get('altitude_state', 3)}"
    inp = f"u{plot_cfg.get('input_channel', 0)}"
    mode = f"p{plot_cfg.get('mode_channel', 0)}"
    any_stats = next(iter(stats.controllers.values()))
    means = sorted(c for c in any_stats.quantiles if c.startswith("mu") and c.endswith("_0"))
    return {
        "altitude": ([alt], "altitude [m]"),
        "input": ([inp], "elevator [rad]"),
        "mode_prob": ([mode], "p(nominal mode)"),
        "param_mean": (means, "parameter mean"),
    }


def emit_plots(stats: StatsBundle, out_dir, plot_cfg: dict | None = None) -> list:
    """Write the four panels plus the per-controller statistics CSVs.

    Returns the written paths. Raises ``ValueError("no runs")`` when the
    bundle holds no successful run.
    """
    if not stats.controllers or stats.empty:
        raise ValueError("no runs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plot_cfg = plot_cfg or {}
    written = list(stats.write_csv(out))
    for panel, (channels, ylabel) in _channels(stats, plot_cfg).items():
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        for kind, s in stats.controllers.items():
            if not s.n_runs:
                continue
            color = COLORS.get(kind, "black")
            for i, ch in enumerate(channels):
                if ch not in s.quantiles:
                    continue
                q05, med, q95 = s.quantiles[ch]
                steps = range(med.size)
                style = "-" if i == 0 else "--"
                label = kind if len(channels) == 1 else f"{kind} {ch}"
                ax.fill_between(steps, q05, q95, color=color, alpha=0.2, linewidth=0)
                ax.plot(steps, med, style, color=color, linewidth=2.0, label=label)
        ax.set_xlabel("step k")
        ax.set_ylabel(ylabel)
        ax.legend(loc="best", fontsize="small")
        fig.tight_layout()
        path = out / f"{panel}.svg"
        # fixed hash salt and no date keep the SVG byte-stable for identical stats
        with plt.rc_context({"svg.hashsalt": "dualmpc"}):
            fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
