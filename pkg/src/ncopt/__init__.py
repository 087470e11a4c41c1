"""Neural combinatorial optimisation workbench for 2D Euclidean TSP."""

__version__ = "0.1.0"
