"""Site-specific outdoor RF propagation simulator.

Builds 3D urban scenes from OpenStreetMap extracts and terrain grids,
traces reflected and diffracted radio paths, and produces received-power
routes, coverage heatmaps, and coverage statistics.
"""

__version__ = "0.1.0"
