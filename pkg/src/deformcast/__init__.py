"""Soft-body contact simulation and deformation prediction with a physics-encoded graph network."""

from .encoding import ForceDescriptor
from .errors import DeformcastError
from .mesh import MeshGraph, TriMesh, build_graph, extract_patch, load_mesh, normalize_pair, save_obj
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "DeformcastError",
    "ForceDescriptor",
    "MeshGraph",
    "ModelConfig",
    "TriMesh",
    "build_graph",
    "extract_patch",
    "forward",
    "init_params",
    "load_checkpoint",
    "load_mesh",
    "normalize_pair",
    "save_checkpoint",
    "save_obj",
]
