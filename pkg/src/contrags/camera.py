"""Pinhole camera: rigid world-to-camera transform plus intrinsics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray     # (3, 3) world-to-camera rotation, row-major
    translation: np.ndarray  # (3,) world-to-camera translation
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) world points into camera coordinates (z forward)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (rotation, translation) looking from eye toward target.

    Camera convention: +x right, +y down, +z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # forward parallel to up: pick any orthogonal right
        upv = np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, upv)
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=0)
    return rot, -rot @ eye


def ring_cameras(num_views: int, center, radius: float, height: float,
                 fx: float, width: int, height_px: int) -> list[Camera]:
    """Cameras evenly spaced on a horizontal ring, all looking at `center`."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for k in range(num_views):
        ang = 2.0 * np.pi * k / num_views
        eye = center + np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        rot, trans = look_at(eye, center)
        cams.append(Camera(rotation=rot, translation=trans, fx=fx, fy=fx,
                           cx=width / 2.0, cy=height_px / 2.0,
                           width=width, height=height_px))
    return cams
