"""Pinhole camera and SE(3) helpers that turn depth + relative pose into a
sampling grid for view synthesis.

Conventions: camera axes are x right, y down, z forward. Pixel centres sit
at integer coordinates. A pose ``T_{t->t'}`` maps 3D points expressed in
camera ``t`` into camera ``t'``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

D_MIN = 0.1
D_MAX = 100.0
# 1/(a*sigma + b) spans [D_MIN, D_MAX] for sigma in [0, 1]
DISP_B = 1.0 / D_MAX
DISP_A = 1.0 / D_MIN - DISP_B
POSE_OUTPUT_SCALE = 0.01
MIN_Z = 1e-3


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def at_scale(self, scale: int) -> "Intrinsics":
        f = 2.0 ** scale
        return Intrinsics(self.fx / f, self.fy / f, self.cx / f, self.cy / f)

    def flipped(self, width: int) -> "Intrinsics":
        """Intrinsics of the horizontally mirrored image."""
        return Intrinsics(self.fx, self.fy, width - 1 - self.cx, self.cy)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])


@dataclass
class Pose:
    """Batch of relative poses: ``axis_angle`` and ``translation`` are (N, 3)."""

    axis_angle: Tensor
    translation: Tensor

    @classmethod
    def from_arrays(cls, axis_angle, translation, dtype=np.float64) -> "Pose":
        aa = np.asarray(axis_angle, dtype=dtype).reshape(-1, 3)
        tr = np.asarray(translation, dtype=dtype).reshape(-1, 3)
        return cls(Tensor(aa), Tensor(tr))

    @classmethod
    def identity(cls, n: int = 1, dtype=np.float64) -> "Pose":
        return cls.from_arrays(np.zeros((n, 3)), np.zeros((n, 3)), dtype)

    def __len__(self) -> int:
        return self.axis_angle.shape[0]


def _skew(v: Tensor) -> Tensor:
    """(N, 3) -> (N, 3, 3) cross-product matrices."""
    zero = v[:, 0] * 0.0
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    rows = [T.stack([zero, -z, y], axis=1),
            T.stack([z, zero, -x], axis=1),
            T.stack([-y, x, zero], axis=1)]
    return T.stack(rows, axis=1)


def rotation_matrix(axis_angle: Tensor) -> Tensor:
    """Rodrigues' formula, differentiable and exact at zero rotation."""
    theta2 = (axis_angle * axis_angle).sum(axis=1)
    theta = T.sqrt(theta2 + 1e-20)
    a = T.sin(theta) / theta
    half = T.sin(theta * 0.5)
    b = half * half * 2.0 / (theta * theta)
    k = _skew(axis_angle)
    eye = np.broadcast_to(np.eye(3, dtype=axis_angle.dtype), (axis_angle.shape[0], 3, 3))
    return eye + k * a.reshape(-1, 1, 1) + (k @ k) * b.reshape(-1, 1, 1)


def pose_to_matrix(pose: Pose) -> Tensor:
    """(N, 4, 4) rigid transforms."""
    rot = rotation_matrix(pose.axis_angle)
    n = len(pose)
    top = T.concat([rot, pose.translation.reshape(n, 3, 1)], axis=2)
    bottom = np.broadcast_to(np.array([[[0.0, 0.0, 0.0, 1.0]]], dtype=rot.dtype), (n, 1, 4))
    return T.concat([top, Tensor(np.ascontiguousarray(bottom))], axis=1)


def invert_transform(m: Tensor) -> Tensor:
    """Inverse of (N, 4, 4) rigid transforms: [R^T, -R^T t]."""
    rot_t = m[:, :3, :3].transpose(0, 2, 1)
    t = m[:, :3, 3:]
    top = T.concat([rot_t, -(rot_t @ t)], axis=2)
    n = m.shape[0]
    bottom = np.broadcast_to(np.array([[[0.0, 0.0, 0.0, 1.0]]], dtype=m.dtype), (n, 1, 4))
    return T.concat([top, Tensor(np.ascontiguousarray(bottom))], axis=1)


def pixel_grid(height: int, width: int, dtype=np.float64) -> np.ndarray:
    """(H, W, 2) array of (x, y) pixel-centre coordinates."""
    ys, xs = np.meshgrid(np.arange(height, dtype=dtype), np.arange(width, dtype=dtype), indexing="ij")
    return np.stack([xs, ys], axis=-1)


def reproject_grid(depth: Tensor, pose: Pose | Tensor, K: Intrinsics,
                   return_mask: bool = False):
    """Source-frame sampling coordinates for every target pixel.

    ``depth`` is (N, 1, H, W) in the target frame; ``pose`` maps target
    camera points into the source camera (a :class:`Pose` or (N, 4, 4)
    matrices). Returns an (N, H, W, 2) grid for :func:`grid_sample` and,
    optionally, a boolean mask of points that land in front of the source
    camera and inside the image.
    """
    if depth.ndim != 4 or depth.shape[1] != 1:
        raise T.DimensionError(f"depth must be (N, 1, H, W), got {depth.shape}")
    n, _, h, w = depth.shape
    dtype = depth.dtype
    mat = pose_to_matrix(pose) if isinstance(pose, Pose) else pose
    pix = pixel_grid(h, w, dtype).reshape(-1, 2)
    homog = np.concatenate([pix, np.ones((h * w, 1), dtype=dtype)], axis=1).T  # (3, HW)
    rays = (K.inverse_matrix().astype(dtype) @ homog)[None]  # (1, 3, HW)
    cam = depth.reshape(n, 1, h * w) * rays  # (N, 3, HW)
    moved = mat[:, :3, :3] @ cam + mat[:, :3, 3:]
    proj = K.matrix().astype(dtype) @ moved
    z = proj[:, 2:3, :]
    z_safe = T.maximum(z, MIN_Z)
    uv = proj[:, 0:2, :] / z_safe
    grid = uv.reshape(n, 2, h, w).transpose(0, 2, 3, 1)
    if not return_mask:
        return grid
    g = grid.data
    mask = ((z.data[:, 0, :].reshape(n, h, w) > MIN_Z)
            & (g[..., 0] >= 0) & (g[..., 0] <= w - 1)
            & (g[..., 1] >= 0) & (g[..., 1] <= h - 1))
    return grid, mask


def disparity_to_depth(sigma: Tensor) -> tuple[Tensor, Tensor]:
    """Map a sigmoid output to ``(disparity, depth)`` with depth in [0.1, 100]."""
    disp = sigma * DISP_A + DISP_B
    return disp, 1.0 / disp


def warp_frame(source: Tensor, depth: Tensor, pose: Pose | Tensor, K: Intrinsics) -> Tensor:
    """Synthesize the target view from ``source`` using target depth and pose."""
    return T.grid_sample(source, reproject_grid(depth, pose, K))


def matrix_to_axis_angle(rot: np.ndarray) -> np.ndarray:
    """Logarithm map of a single 3x3 rotation (numpy, no gradient)."""
    cos = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-12:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; use the symmetric part
        m = (rot + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(m), 0.0, None))
        i = int(np.argmax(axis))
        axis = m[:, i] / axis[i]
        return axis / np.linalg.norm(axis) * theta
    vec = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    return vec * theta / (2.0 * np.sin(theta))


def axis_angle_to_matrix_np(axis_angle) -> np.ndarray:
    return rotation_matrix(Tensor(np.asarray(axis_angle, dtype=np.float64).reshape(1, 3))).data[0]
