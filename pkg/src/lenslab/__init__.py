"""lenslab: lens rigidity and tensor tomography on the unit disc.

Submodules
----------
metric_chart    metrics on a chart around the closed unit disc
geodesic_flow   batched geodesic and Jacobi field integration
lens_data       scattering relation and travel times, completeness audit
jet_recovery    boundary metric and its normal derivative from travel times
tensor_fields   symmetric 2-tensors on a grid and the solenoidal decomposition
ray_transform   geodesic ray transform, normal operator, LLFS1 storage
rigidity_lab    boundary-fixing gauges and quadratic remainder experiments
cli             the ``lenslab`` command
"""

__version__ = "0.1.0"

from .metric_chart import (EuclideanChart, ConformalChart, PolarNormalChart, TabulatedChart,
                           make_chart, sphere_chart)
from .geodesic_flow import PhasePoint, GeodesicPath, PathStatus, shoot, shoot_batch
from .lens_data import BallPoint, GridSpec, LensDataset, generate_dataset, audit_completeness
from .jet_recovery import recover_jet, direct_boundary_jet
from .tensor_fields import TensorGrid, SymTensorField, decompose
from .ray_transform import ForwardSystem, assemble, reconstruct, sinjectivity_spectrum
from .rigidity_lab import BoundaryFixingDiffeo, pullback_metric

__all__ = [
    "EuclideanChart", "ConformalChart", "PolarNormalChart", "TabulatedChart", "make_chart",
    "sphere_chart", "PhasePoint", "GeodesicPath", "PathStatus", "shoot", "shoot_batch",
    "BallPoint", "GridSpec", "LensDataset", "generate_dataset", "audit_completeness",
    "recover_jet", "direct_boundary_jet", "TensorGrid", "SymTensorField", "decompose",
    "ForwardSystem", "assemble", "reconstruct", "sinjectivity_spectrum",
    "BoundaryFixingDiffeo", "pullback_metric",
]
