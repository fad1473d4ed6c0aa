"""Density-based flow-field topology optimization for a vanadium redox flow battery negative half-cell."""
from .config import CaseConfig, ConfigError, dump_config, parse_config
from .geometry import Grid, Patch, Region, build_grid, permeability

__all__ = ["CaseConfig", "ConfigError", "dump_config", "parse_config", "Grid", "Patch", "Region",
           "build_grid", "permeability"]
__version__ = "0.1.0"
