"""Keypoint-based 3D object detection on LiDAR bird's-eye-view images."""

from .bev import BevGrid, BevImage, encode_bev, pixel_to_world, world_to_pixel
from .lidar_io import Calibration, ObjectLabel, PointCloud, SceneSpec, augment, synth_scene
from .model import BevDetector, ModelConfig, param_count

__version__ = "0.1.0"
