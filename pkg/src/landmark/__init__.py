"""Desk-scale neural scene reconstruction and rendering engine.

Two rendering families (grid-encoded volume rendering and 3D Gaussian
splatting), a cell-partitioned scene manager, a two-tier parameter store
with dynamic loading, and a deterministic in-process simulation of
distributed execution.
"""

__version__ = "0.1.0"
