"""Cortical surface reconstruction from 3D volumes via learned implicit fields.

Pipeline: affine registration to a template box, dense evaluation of a
hypercolumn-conditioned implicit field, genus-zero topology correction,
marching cubes, and mapping back to native coordinates.
"""
import os

# omp is thread-safe for parallel kernels launched from worker threads
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
