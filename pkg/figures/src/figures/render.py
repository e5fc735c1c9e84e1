"""Figure layouts over the result CSV.

Three layouts mirror the experiment sweeps:
  1: training-error grid over (gamma, m) panels, one curve per coupling,
     simulation solid / mean-field dashed;
  2: momentum sweep, one curve per forgetting factor, panel per m;
  3: normalized variance (m times the variance column), empirical vs the
     z-continued prediction.

Rendering is a pure function of the CSV bytes and the spec: Agg backend,
SVG output with a fixed hash salt and no date metadata, so identical
inputs give identical bytes.  Error bands are +-2 stderr (for the
variance layout, +-2 * normal-theory standard error of a variance).
"""

from dataclasses import dataclass, field

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .csvdata import Rows, read_csv


class MissingSeries(Exception):
    """A series selector matched no CSV rows."""


@dataclass
class FigureSpec:
    csv_paths: list
    panels: list              # [{"filter": {...}, "title": str}]
    series: list              # [{"filter": {...}, "label": str, "style": {...}}]
    out_path: str
    y: str = "mean"           # "mean" or "normvar"
    xlabel: str = "iteration"
    ylabel: str = "training error"
    ncols: int = 2
    logy: bool = False

    def validate(self):
        if not self.panels:
            raise ValueError("panels non-empty")
        if not self.series:
            raise ValueError("series non-empty")
        return self


_STYLE = {"linewidth": 1.4}


def _series_values(rows: Rows, y):
    rows = rows.curve()
    l = np.array([r["l"] for r in rows])
    if y == "mean":
        val = np.array([r["mean"] for r in rows])
        band = 2.0 * np.array([r["stderr"] for r in rows])
    elif y == "normvar":
        m = np.array([r["m"] for r in rows], dtype=float)
        reps = np.array([r["replications"] for r in rows], dtype=float)
        val = m * np.array([r["variance"] for r in rows])
        band = 2.0 * val * np.sqrt(2.0 / np.maximum(reps - 1, 1))
    else:
        raise ValueError(f"unknown y quantity {y!r}")
    return l, val, band


def render(spec: FigureSpec):
    """Draw the figure and return the output path."""
    spec.validate()
    data = read_csv(spec.csv_paths)
    n = len(spec.panels)
    ncols = min(spec.ncols, n)
    nrows = (n + ncols - 1) // ncols
    with plt.rc_context({"svg.hashsalt": "gmixdyn-figures",
                         "svg.fonttype": "none",
                         "figure.dpi": 100, "font.size": 9}):
        fig, axes = plt.subplots(nrows, ncols,
                                 figsize=(4.2 * ncols, 3.2 * nrows),
                                 squeeze=False)
        for i, panel in enumerate(spec.panels):
            ax = axes[i // ncols][i % ncols]
            sub = data.where(**panel.get("filter", {}))
            for ser in spec.series:
                rows = sub.where(**ser["filter"])
                if len(rows) == 0:
                    raise MissingSeries(
                        f"selector {ser['filter']} (panel {panel.get('title')}) "
                        "matched no rows")
                l, val, band = _series_values(rows, spec.y)
                style = dict(_STYLE)
                style.update(ser.get("style", {}))
                ax.plot(l, val, label=ser["label"], **style)
                ax.fill_between(l, val - band, val + band, alpha=0.2,
                                color=ax.lines[-1].get_color(), linewidth=0)
            ax.set_title(panel.get("title", ""))
            ax.set_xlabel(spec.xlabel)
            ax.set_ylabel(spec.ylabel)
            if spec.logy:
                ax.set_yscale("log")
            ax.legend(fontsize=7)
        for j in range(n, nrows * ncols):
            axes[j // ncols][j % ncols].axis("off")
        fig.tight_layout()
        fig.savefig(spec.out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return spec.out_path


# ----------------------------------------------------------------------
# Layout builders
# ----------------------------------------------------------------------

def training_grid_spec(csv_paths, out_path, metric="loss"):
    """Layout 1: panels over every (gamma, m) pair in the data; one curve
    per coupling; simulation solid, mean-field dashed."""
    data = read_csv(csv_paths).where(metric=metric)
    combos = sorted({(r["gamma"], r["m"]) for r in data.rows})
    panels = [{"filter": {"gamma": g, "m": m}, "title": f"gamma={g:g}, m={m}"}
              for g, m in combos]
    couplings = data.distinct("coupling")
    series = []
    for c in couplings:
        series.append({"filter": {"method": "empirical", "coupling": c},
                       "label": f"simulation, coupling {c:g}", "style": {}})
        series.append({"filter": {"method": "dmf", "coupling": c},
                       "label": f"mean field, coupling {c:g}",
                       "style": {"linestyle": "--"}})
    return FigureSpec(csv_paths=csv_paths, panels=panels, series=series,
                      out_path=out_path)


def momentum_sweep_spec(csv_paths, out_path, metric="loss"):
    """Layout 2: panel per m, one curve per forgetting factor."""
    data = read_csv(csv_paths).where(metric=metric)
    panels = [{"filter": {"m": m}, "title": f"m={m}"}
              for m in data.distinct("m")]
    series = []
    for s in data.distinct("s"):
        series.append({"filter": {"method": "empirical", "s": s},
                       "label": f"simulation, s={s:g}", "style": {}})
        series.append({"filter": {"method": "dmf", "s": s},
                       "label": f"mean field, s={s:g}",
                       "style": {"linestyle": "--"}})
    return FigureSpec(csv_paths=csv_paths, panels=panels, series=series,
                      out_path=out_path)


def normalized_variance_spec(csv_paths, out_path, metric="loss"):
    """Layout 3: m * variance of the per-replication metric, empirical
    against the z-continued surrogate prediction."""
    series = [
        {"filter": {"method": "empirical", "metric": metric},
         "label": "empirical", "style": {}},
        {"filter": {"method": "refined", "metric": metric},
         "label": "prediction", "style": {"linestyle": "--"}},
    ]
    return FigureSpec(csv_paths=csv_paths,
                      panels=[{"filter": {}, "title": "normalized variance"}],
                      series=series, out_path=out_path, y="normvar",
                      ylabel="m x variance", ncols=1)


LAYOUTS = {1: training_grid_spec, 2: momentum_sweep_spec,
           3: normalized_variance_spec}
