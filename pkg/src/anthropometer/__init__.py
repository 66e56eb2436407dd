"""Body-dimension ground truth from meshes, silhouette rendering and a CNN regressor."""

from .measure import MeasurementConfig, measure_all
from .mesh import HBD_NAMES, HbdVector, JointSet, TriMesh, load_joints, load_manifest, load_mesh

__version__ = "0.1.0"

__all__ = [
    "HBD_NAMES",
    "HbdVector",
    "JointSet",
    "MeasurementConfig",
    "TriMesh",
    "__version__",
    "load_joints",
    "load_manifest",
    "load_mesh",
    "measure_all",
]
