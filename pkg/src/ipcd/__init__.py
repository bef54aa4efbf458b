"""Intrinsic decomposition of colored point clouds into albedo and shade."""

from ipcd.pcio import IntrinsicTriplet, PointCloud, load_ply, save_ply

__all__ = ["IntrinsicTriplet", "PointCloud", "load_ply", "save_ply"]
__version__ = "0.1.0"
