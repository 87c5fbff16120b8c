"""Ridge-valley feature detection and enhancement for point clouds."""

from .cloud import LocalFrame, PointCloud, PrincipalInfo, SpatialIndex, build_index, estimate_density, estimate_normals, local_frame, principal_directions
from .curvature import CurvatureField, HeightQuadric, curvature_field, fit_height_quadric, mean_curvature_at
from .enhance import EnhanceResult, MeanPlanePair, RegionPartition, TargetSet, enhance
from .errors import InputError, NumericalError, RidgevalError
from .parameterize import NodeTransform, ParamCloud, apply_param, invert_param, node_transform, optimize_rotations, small_angle_rotate
from .ridge_detect import FeaturePointSet, detect_features
from .ridge_lines import Affiliation, FeatureNode, FeaturePolyline, affiliate, augment_cloud, build_polylines, node_attributes

__version__ = "0.1.0"
