"""Geometric-moment guidance for voxel-space diffusion over multi-label 3D grids."""

__version__ = "0.1.0"
