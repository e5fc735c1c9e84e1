"""Figure scripts over the gmixdyn result-CSV contract."""

from .render import (FigureSpec, MissingSeries, render, training_grid_spec,
                     momentum_sweep_spec, normalized_variance_spec, LAYOUTS)

__all__ = ["FigureSpec", "MissingSeries", "render", "training_grid_spec",
           "momentum_sweep_spec", "normalized_variance_spec", "LAYOUTS"]
