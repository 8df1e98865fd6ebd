"""Multi-view 2D-3D feature fusion for point cloud semantic segmentation."""

__version__ = "0.1.0"
