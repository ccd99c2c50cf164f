"""FireCastNet: wildfire danger forecasting with a graph network on an icosahedral multi-mesh."""

__version__ = "0.1.0"

from .coupling import GridSpec
from .geomesh import build_lam_mesh, build_multimesh, load_mesh, save_mesh
from .model import FireCastNetConfig, firecastnet_forward, init_parameters, prepare_graphs

__all__ = [
    "GridSpec",
    "FireCastNetConfig",
    "build_lam_mesh",
    "build_multimesh",
    "firecastnet_forward",
    "init_parameters",
    "load_mesh",
    "prepare_graphs",
    "save_mesh",
    "__version__",
]
