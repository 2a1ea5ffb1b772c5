"""Markerless shape tracking for a two-segment constant-curvature soft robot.

Modules:

- ``kinematics``: PCC forward and inverse kinematics, pressure to length model
- ``refmodel``: reference model construction and serialization
- ``matching``: visibility, score matrix, optimal assignment, descriptor update
- ``reconstruct``: partition transforms, global backbone fit, per-frame pipeline
- ``sim``: synthetic RGB-D observations with ground truth
- ``control``: closed-loop shape and tip control on the simulated plant
- ``experiments`` / ``cli``: scenario files and the ``aft`` command
"""
from .kinematics import Bounds, RobotConfig, SegmentConfig, inverse_kinematics, tip_position
from .reconstruct import PipelineParams, compute_metrics, process_frame
from .refmodel import ReferenceModel, build_reference_model, load_model, save_model

__all__ = ["Bounds", "RobotConfig", "SegmentConfig", "inverse_kinematics", "tip_position",
           "PipelineParams", "compute_metrics", "process_frame", "ReferenceModel",
           "build_reference_model", "load_model", "save_model"]

__version__ = "0.1.0"
