"""Keypoint triple and sensing-field <-> frame-pixel geometry.

The tactile frame is a 64x64 image of the 19mm x 16mm sensing field.
A keypoint is (x, y, i): pixel location plus a non-negative intensity.
Planner-space coordinates normalize pixels to [-1, 1] about the frame
center (31.5, 31.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FRAME_SIZE = 64
FIELD_W_MM = 19.0
FIELD_H_MM = 16.0

# half-extent of the pixel coordinate range [0, 63]
PIXEL_HALF = (FRAME_SIZE - 1) / 2.0


@dataclass
class Keypoint:
    x: float
    y: float
    i: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.i], dtype=float)

    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


def field_to_pixel(u_mm: float, v_mm: float) -> tuple[float, float]:
    """Map sensing-field millimeters (origin at field center) to pixel coords."""
    x = (u_mm / FIELD_W_MM + 0.5) * (FRAME_SIZE - 1)
    y = (v_mm / FIELD_H_MM + 0.5) * (FRAME_SIZE - 1)
    return x, y


def pixel_to_field(x_px: float, y_px: float) -> tuple[float, float]:
    u = (x_px / (FRAME_SIZE - 1) - 0.5) * FIELD_W_MM
    v = (y_px / (FRAME_SIZE - 1) - 0.5) * FIELD_H_MM
    return u, v


def pixel_to_unit(p: np.ndarray | float):
    """Pixel coordinate -> [-1, 1] planning coordinate."""
    return np.asarray(p, dtype=float) / PIXEL_HALF - 1.0


def unit_to_pixel(z: np.ndarray | float):
    return (np.asarray(z, dtype=float) + 1.0) * PIXEL_HALF
