"""
Geometry
Pinhole cameras, rigid transforms, point and covariance projection.

Conventions: poses are world-to-camera (x_cam = R x_world + t), camera axes are
x right / y down / z forward, and pixel (x, y) has its centre at integer coordinates.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from src.errors import GeometryError

logger = logging.getLogger(__name__)

# low-pass floor added to projected 2D covariances (px^2)
COVARIANCE_FLOOR = 0.3
BEHIND_EPS = 1e-9
ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels"""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError(
                f"Principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    def scaled(self, stride: int) -> "Intrinsics":
        """
        Intrinsics of the image downsampled by an integer stride

        Uses the half-pixel-centre mapping x' = (x + 0.5) / s - 0.5, which is what
        area and bilinear resizing produce.
        """
        if stride == 1:
            return self
        return Intrinsics(
            fx=self.fx / stride,
            fy=self.fy / stride,
            cx=(self.cx + 0.5) / stride - 0.5,
            cy=(self.cy + 0.5) / stride - 0.5,
            width=self.width // stride,
            height=self.height // stride,
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform"""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0):
            raise GeometryError("Pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise GeometryError("Pose rotation has determinant != +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates"""
        return -self.rotation.T @ self.translation

    def inverse(self) -> "Pose":
        rot_t = self.rotation.T
        return Pose(rot_t, -rot_t @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) or (3,) points"""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Camera:
    """Intrinsics plus world-to-camera pose"""
    intrinsics: Intrinsics
    pose: Pose

    @property
    def shape(self) -> tuple:
        return self.intrinsics.shape

    def scaled(self, stride: int) -> "Camera":
        return Camera(self.intrinsics.scaled(stride), self.pose)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """
    Rotation matrices from (w, x, y, z) quaternions

    Args:
        q: (4,) or (N, 4) quaternions, normalized on the fly

    Returns:
        (3, 3) or (N, 3, 3) rotation matrices
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = normalize_quaternions(np.atleast_2d(q))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1).reshape(-1, 3, 3)
    return rot[0] if single else rot


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.where(norm > 0, norm, 1.0)


@dataclass(frozen=True, eq=False)
class Covariance3:
    """3D covariance stored as rotation quaternion and per-axis scales"""
    quaternion: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        q = normalize_quaternions(np.asarray(self.quaternion, dtype=np.float64).reshape(4))
        s = np.asarray(self.scales, dtype=np.float64).reshape(3)
        if np.any(s < 0):
            raise GeometryError("Covariance scales must be non-negative")
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "scales", s)

    @property
    def matrix(self) -> np.ndarray:
        rs = quat_to_rotmat(self.quaternion) * self.scales
        return rs @ rs.T


def covariance_matrices(quaternions: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Batched R S S^T R^T for (N, 4) quaternions and (N, 3) scales"""
    rs = quat_to_rotmat(quaternions) * scales[:, None, :]
    return rs @ np.transpose(rs, (0, 2, 1))


def compose_transform(src: Pose, dst: Pose) -> Pose:
    """
    Relative transform from the src camera frame to the dst camera frame

    Args:
        src: World-to-camera pose of the source view
        dst: World-to-camera pose of the destination view

    Returns:
        T = dst o src^-1
    """
    rotation = dst.rotation @ src.rotation.T
    translation = dst.translation - rotation @ src.translation
    return Pose(rotation, translation)


class Projection(NamedTuple):
    u: float
    v: float
    d: float
    in_front: bool


def project_point(K: Intrinsics, P: Pose, x: np.ndarray) -> Projection:
    """
    Project one world point

    Args:
        K: Intrinsics
        P: World-to-camera pose
        x: World point (3,)

    Returns:
        Projection(u, v, d, in_front); u and v are NaN when the point is behind the camera
    """
    uv, depth, valid = project_points(K, P, np.asarray(x, dtype=np.float64)[None, :])
    return Projection(float(uv[0, 0]), float(uv[0, 1]), float(depth[0]), bool(valid[0]))


def project_points(K: Intrinsics, P: Pose, points: np.ndarray):
    """
    Project (N, 3) world points

    Returns:
        uv (N, 2), depth (N,), in-front mask (N,)
    """
    cam = P.apply(points)
    depth = cam[:, 2]
    valid = depth > BEHIND_EPS
    safe = np.where(valid, depth, 1.0)
    uv = np.stack([K.fx * cam[:, 0] / safe + K.cx, K.fy * cam[:, 1] / safe + K.cy], axis=-1)
    uv[~valid] = np.nan
    return uv, depth, valid


def unproject_pixel(K: Intrinsics, P: Pose, u: float, v: float, d: float) -> np.ndarray:
    """
    Lift a pixel at metric depth d into world coordinates

    Args:
        K: Intrinsics
        P: World-to-camera pose
        u, v: Pixel coordinates
        d: Depth along the optical axis (m)

    Returns:
        World point (3,)
    """
    return unproject_pixels(K, P, np.array([u]), np.array([v]), np.array([d]))[0]


def unproject_pixels(K: Intrinsics, P: Pose, u: np.ndarray, v: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Vectorised unproject_pixel; returns (N, 3) world points"""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("Cannot unproject pixels with non-positive depth")
    cam = np.stack([
        (np.asarray(u, dtype=np.float64) - K.cx) / K.fx * d,
        (np.asarray(v, dtype=np.float64) - K.cy) / K.fy * d,
        d,
    ], axis=-1)
    return (cam - P.translation) @ P.rotation


def pixel_grid(height: int, width: int):
    """Row-major pixel centre coordinates (u, v) as flat arrays"""
    v, u = np.mgrid[0:height, 0:width]
    return u.ravel().astype(np.float64), v.ravel().astype(np.float64)


def perspective_jacobian(K: Intrinsics, x_cam: np.ndarray) -> np.ndarray:
    """
    Local affine approximation of the perspective projection

    Args:
        K: Intrinsics
        x_cam: Camera-frame point (3,) or points (N, 3), z > 0

    Returns:
        (2, 3) or (N, 2, 3) Jacobian d(u, v)/d(x, y, z)
    """
    x_cam = np.asarray(x_cam, dtype=np.float64)
    single = x_cam.ndim == 1
    pts = np.atleast_2d(x_cam)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    if np.any(z <= 0):
        raise GeometryError("Perspective Jacobian needs z > 0")
    jac = np.zeros((len(pts), 2, 3))
    jac[:, 0, 0] = K.fx / z
    jac[:, 0, 2] = -K.fx * x / (z * z)
    jac[:, 1, 1] = K.fy / z
    jac[:, 1, 2] = -K.fy * y / (z * z)
    return jac[0] if single else jac


def project_covariance(
    sigma: Union[Covariance3, np.ndarray],
    P: Pose,
    J: np.ndarray,
) -> np.ndarray:
    """
    EWA projection of a 3D covariance: J W Sigma W^T J^T + 0.3 I

    Args:
        sigma: Covariance3 or (3, 3) / (N, 3, 3) covariance
        P: World-to-camera pose (its rotation is W)
        J: (2, 3) or (N, 2, 3) perspective Jacobian

    Returns:
        (2, 2) or (N, 2, 2) symmetric image-plane covariance
    """
    cov = sigma.matrix if isinstance(sigma, Covariance3) else np.asarray(sigma, dtype=np.float64)
    m = np.asarray(J, dtype=np.float64) @ P.rotation
    out = m @ cov @ np.swapaxes(m, -1, -2)
    out = 0.5 * (out + np.swapaxes(out, -1, -2))
    return out + COVARIANCE_FLOOR * np.eye(2)


@dataclass(eq=False)
class CameraFrame:
    """One posed observation: image, camera and optional metric depth"""
    index: int
    image: np.ndarray                   # H x W x 3, RGB in [0, 1]
    camera: Camera
    depth: Optional[np.ndarray] = None  # H x W metres, 0 = invalid
    name: str = ""
    split: str = "input"

    @property
    def shape(self) -> tuple:
        return self.image.shape[:2]
