"""Desk-scale continuous-fusion BEV object detector."""

from .config import ExperimentConfig, load_config, save_config
from .geometry import BevGrid, CalibratedCamera, PointCloud
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["BevGrid", "CalibratedCamera", "ExperimentConfig", "PointCloud",
           "Tensor", "load_config", "save_config", "__version__"]
