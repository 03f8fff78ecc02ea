"""Dense field evaluation, topology correction and surface extraction."""
from .grid import GridSpec, ImplicitVolume, evaluate_grid, field_volumes
from .marching_cubes import marching_cubes
from .pipeline import Reconstruction, extract_surfaces, reconstruct_all, register_to_template, save_reconstruction
from .topology import DigitalTopology, digital_topology, topology_correct

__all__ = [
    "DigitalTopology", "GridSpec", "ImplicitVolume", "Reconstruction", "digital_topology", "evaluate_grid",
    "extract_surfaces", "field_volumes", "marching_cubes", "reconstruct_all", "register_to_template",
    "save_reconstruction", "topology_correct",
]
