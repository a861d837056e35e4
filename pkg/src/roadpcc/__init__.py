"""Compression toolkit for roadside LiDAR point clouds.

Three codecs share one container format (:mod:`roadpcc.io`): an octree
occupancy coder (:mod:`roadpcc.octree`), a range-image coder
(:mod:`roadpcc.rangeimage`) and a voxel-grid coder (:mod:`roadpcc.voxel`).
:mod:`roadpcc.metrics` and :mod:`roadpcc.bench` measure them,
:mod:`roadpcc.stream` ships frames over a socket and :mod:`roadpcc.scenegen`
simulates a pole-mounted sensor to feed them.
"""

from roadpcc.core import Aabb, Point3, PointCloud, SensorModel, bounding_box, default_sensor
from roadpcc.io import CodecId, CompressedFrame

__version__ = "0.1.0"

__all__ = [
    "Aabb",
    "CodecId",
    "CompressedFrame",
    "Point3",
    "PointCloud",
    "SensorModel",
    "bounding_box",
    "default_sensor",
]
