"""Dense non-rigid shape correspondence learned from a geodesic supervision field."""

from .descriptor import DescriptorConfig, DescriptorNet, DescriptorSet, forward
from .field import FieldConfig, GeodesicField, build_field
from .geodesics import Geodesics, all_pairs
from .matching import Correspondence, mean_geodesic_error, retrieve
from .mesh import AnchorMap, AugmentSpec, TriMesh, augment, load_mesh
from .training import TrainConfig, train

__version__ = "0.1.0"
