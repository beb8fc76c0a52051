"""Gaussian point encoders for point-cloud classification."""

from .encoder import GPEClassifier, GaussianEncoder, GlobalFeature, TNet, encode_cloud, forward_classify
from .errors import GPEError
from .pointnet import PointNetModel

__version__ = "0.1.0"

__all__ = [
    "GPEClassifier",
    "GPEError",
    "GaussianEncoder",
    "GlobalFeature",
    "PointNetModel",
    "TNet",
    "encode_cloud",
    "forward_classify",
    "__version__",
]
