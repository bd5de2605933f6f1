"""Shift-equivariance evaluation for object detectors.

Computes best/worst achievable COCO AP when each image may be independently
translated by a few pixels, plus shift test-time augmentation and a
synthetic detector for controlled experiments.
"""

__version__ = "0.1.0"

from shiftap.geometry import Box, Shift, ShiftGrid, apply_shift, iou, unapply_shift
from shiftap.evaluator import ApResult, EvalCache, EvalConfig, compute_ap, match_image
from shiftap.bounds import (
    BoundsResult,
    GreedyConfig,
    brute_force_bounds,
    compute_bounds,
    delta_ap,
    greedy_bounds,
    sweep_shift_range,
)

__all__ = [
    "ApResult",
    "BoundsResult",
    "Box",
    "EvalCache",
    "EvalConfig",
    "GreedyConfig",
    "Shift",
    "ShiftGrid",
    "apply_shift",
    "brute_force_bounds",
    "compute_ap",
    "compute_bounds",
    "delta_ap",
    "greedy_bounds",
    "iou",
    "match_image",
    "sweep_shift_range",
    "unapply_shift",
]
