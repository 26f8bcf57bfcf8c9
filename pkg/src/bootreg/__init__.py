"""Self-supervised point cloud registration bootstrapped from color correspondences."""

from .geometry import PointCloud, RigidTransform, voxel_downsample
from .errors import BootregError

__version__ = "0.1.0"

__all__ = ["PointCloud", "RigidTransform", "voxel_downsample", "BootregError", "__version__"]
