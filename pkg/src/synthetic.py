"""
Synthetic Scenes
Seeded box rooms with procedurally textured walls, optional floater spheres and
analytic depth, used as ground truth for every end-to-end check.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.errors import DataError
from src.geometry import Camera, CameraFrame, Intrinsics, Pose, pixel_grid

logger = logging.getLogger(__name__)

WORLD_UP = np.array([0.0, 0.0, 1.0])
WALL_MARGIN = 0.05
# value-noise octaves: (cell size in metres, amplitude)
OCTAVES = ((0.6, 0.5), (0.25, 0.3), (0.1, 0.2))
LATTICE = 64
FACE_COLORS = np.array([
    [0.85, 0.55, 0.45],  # -x
    [0.45, 0.70, 0.85],  # +x
    [0.60, 0.80, 0.50],  # -y
    [0.85, 0.80, 0.45],  # +y
    [0.55, 0.50, 0.45],  # floor
    [0.90, 0.90, 0.90],  # ceiling
])


@dataclass
class FloaterSphere:
    """Sphere planted in free space; visible only in `views` when given"""
    center: Tuple[float, float, float]
    radius: float = 0.08
    color: Tuple[float, float, float] = (0.9, 0.1, 0.1)
    views: Optional[List[int]] = None

    def visible_in(self, view: int) -> bool:
        return self.views is None or view in self.views


@dataclass
class Trajectory:
    """Orbit around `target` or straight track from `start` to `end`"""
    kind: str = "orbit"
    num_views: int = 4
    target: Tuple[float, float, float] = (0.0, 0.0, 1.2)
    radius: float = 0.8
    height: float = 1.2
    arc_degrees: float = 40.0
    start_degrees: float = -90.0
    start: Tuple[float, float, float] = (-0.6, -1.0, 1.2)
    end: Tuple[float, float, float] = (0.6, -1.0, 1.2)
    look_direction: Tuple[float, float, float] = (0.0, 1.0, 0.0)


@dataclass
class SyntheticScene:
    """Room, camera path, image format and seed"""
    room_min: Tuple[float, float, float] = (-2.0, -2.0, 0.0)
    room_max: Tuple[float, float, float] = (2.0, 2.0, 2.5)
    trajectory: Trajectory = field(default_factory=Trajectory)
    width: int = 80
    height: int = 64
    focal: float = 64.0
    floaters: List[FloaterSphere] = field(default_factory=list)
    seed: int = 0
    extrapolation_ratio: float = 0.0
    interp_every: int = 0


@dataclass
class SyntheticResult:
    frames: List[CameraFrame]
    floaters: List[dict]

    @property
    def depths(self) -> List[np.ndarray]:
        return [frame.depth for frame in self.frames]


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = WORLD_UP) -> Pose:
    """World-to-camera pose of a camera at `eye` looking at `target` (x right, y down)"""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise DataError("camera looks straight along the up axis")
    right /= norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return Pose(rotation, -rotation @ eye)


def trajectory_poses(trajectory: Trajectory) -> List[Pose]:
    """Camera poses along an orbit or a linear track"""
    n = trajectory.num_views
    if n < 1:
        raise DataError(f"trajectory needs at least one view, got {n}")
    steps = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)

    if trajectory.kind == "orbit":
        target = np.asarray(trajectory.target, dtype=np.float64)
        angles = np.radians(trajectory.start_degrees + trajectory.arc_degrees * steps)
        poses = []
        for angle in angles:
            eye = np.array([
                target[0] + trajectory.radius * np.cos(angle),
                target[1] + trajectory.radius * np.sin(angle),
                trajectory.height,
            ])
            poses.append(look_at(eye, target))
        return poses
    if trajectory.kind == "linear":
        start = np.asarray(trajectory.start, dtype=np.float64)
        end = np.asarray(trajectory.end, dtype=np.float64)
        direction = np.asarray(trajectory.look_direction, dtype=np.float64)
        return [look_at(start + s * (end - start), start + s * (end - start) + direction) for s in steps]
    raise DataError(f"unknown trajectory kind '{trajectory.kind}'")


def intrinsics_for(desc: SyntheticScene) -> Intrinsics:
    return Intrinsics(desc.focal, desc.focal, (desc.width - 1) / 2.0, (desc.height - 1) / 2.0, desc.width, desc.height)


class RoomTexture:
    """Multi-octave value noise per face, seeded"""

    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        self.lattices = rng.random((6, len(OCTAVES), LATTICE, LATTICE))

    def shade(self, face: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """RGB for points with in-face coordinates (a, b) in metres"""
        value = np.zeros(len(face))
        for f in range(6):
            on_face = face == f
            if not on_face.any():
                continue
            for o, (cell, amplitude) in enumerate(OCTAVES):
                coords = np.stack([b[on_face] / cell, a[on_face] / cell])
                value[on_face] += amplitude * ndimage.map_coordinates(
                    self.lattices[f, o], coords, order=1, mode="grid-wrap"
                )
        return FACE_COLORS[face] * (0.35 + 0.65 * value)[:, None]


def _box_hit(origin: np.ndarray, directions: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Exit distance of rays starting inside the box, plus face id and hit points"""
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(directions > 0, hi, lo)
        t_axis = (bound - origin) / directions
    t_axis = np.where(np.abs(directions) > 1e-12, t_axis, np.inf)
    axis = np.argmin(t_axis, axis=1)
    t = t_axis[np.arange(len(t_axis)), axis]
    positive = directions[np.arange(len(axis)), axis] > 0
    face = 2 * axis + positive.astype(np.int64)
    return t, face, origin + t[:, None] * directions


def _sphere_hit(origin: np.ndarray, directions: np.ndarray, sphere: FloaterSphere) -> np.ndarray:
    """Nearest positive ray parameter of a sphere hit, inf when missed"""
    center = np.asarray(sphere.center, dtype=np.float64)
    oc = origin - center
    a = np.sum(directions * directions, axis=1)
    b = 2.0 * directions @ oc
    c = oc @ oc - sphere.radius ** 2
    disc = b * b - 4.0 * a * c
    t = np.full(len(a), np.inf)
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = (-b - root) / (2.0 * a)
    t[hit & (near > 0)] = near[hit & (near > 0)]
    return t


def render_view(desc: SyntheticScene, texture: RoomTexture, camera: Camera, view: int):
    """Ray-cast one view; returns (image, depth)"""
    lo = np.asarray(desc.room_min, dtype=np.float64)
    hi = np.asarray(desc.room_max, dtype=np.float64)
    eye = camera.pose.center
    if np.any(eye <= lo + WALL_MARGIN) or np.any(eye >= hi - WALL_MARGIN):
        raise DataError(f"camera at {np.round(eye, 3).tolist()} is inside or outside a wall", view)

    K = camera.intrinsics
    u, v = pixel_grid(K.height, K.width)
    # camera-frame direction with unit z, so ray parameter t is the z-depth
    rays_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    directions = rays_cam @ camera.pose.rotation

    t, face, points = _box_hit(eye, directions, lo, hi)
    in_plane = np.where(
        (face // 2 == 0)[:, None], points[:, [1, 2]],
        np.where((face // 2 == 1)[:, None], points[:, [0, 2]], points[:, [0, 1]]),
    )
    colors = texture.shade(face, in_plane[:, 0], in_plane[:, 1])

    for sphere in desc.floaters:
        if not sphere.visible_in(view):
            continue
        t_sphere = _sphere_hit(eye, directions, sphere)
        closer = t_sphere < t
        t = np.where(closer, t_sphere, t)
        colors[closer] = sphere.color

    shape = (K.height, K.width)
    return np.clip(colors, 0.0, 1.0).reshape(shape + (3,)), t.reshape(shape)


def assign_splits(n: int, extrapolation_ratio: float = 0.0, interp_every: int = 0) -> List[str]:
    """Tail views become 'extrap', every k-th remaining view 'interp', the rest 'input'"""
    n_extrap = int(np.floor(n * extrapolation_ratio))
    splits = ["input"] * n
    for i in range(n - n_extrap, n):
        splits[i] = "extrap"
    if interp_every > 1:
        for i in range(interp_every - 1, n - n_extrap, interp_every):
            splits[i] = "interp"
    if "input" not in splits:
        raise DataError("split assignment left no input views")
    return splits


def generate_synthetic(desc: SyntheticScene) -> SyntheticResult:
    """
    Build frames with images, analytic depth and the floater registry

    Args:
        desc: Scene description

    Returns:
        SyntheticResult; identical for identical descriptions
    """
    texture = RoomTexture(desc.seed)
    intrinsics = intrinsics_for(desc)
    poses = trajectory_poses(desc.trajectory)
    splits = assign_splits(len(poses), desc.extrapolation_ratio, desc.interp_every)

    frames = []
    for view, pose in enumerate(poses):
        camera = Camera(intrinsics, pose)
        image, depth = render_view(desc, texture, camera, view)
        frames.append(CameraFrame(
            index=view,
            image=image,
            camera=camera,
            depth=depth,
            name=f"frame_{view:04d}",
            split=splits[view],
        ))

    registry = [asdict(sphere) for sphere in desc.floaters]
    logger.info(f"Generated {len(frames)} synthetic views with {len(registry)} floaters (seed {desc.seed})")
    return SyntheticResult(frames, registry)


def axis_point(desc: SyntheticScene, view: int, offset: float) -> np.ndarray:
    """
    World point on the optical axis of a view, `offset` metres in front of the wall it sees

    Used to plant floaters at a known distance from the surface.
    """
    pose = trajectory_poses(desc.trajectory)[view]
    eye = pose.center
    direction = pose.rotation[2][None, :]
    lo = np.asarray(desc.room_min, dtype=np.float64)
    hi = np.asarray(desc.room_max, dtype=np.float64)
    t, _, _ = _box_hit(eye, direction, lo, hi)
    if t[0] <= offset:
        raise DataError(f"wall is only {t[0]:.3f} m away, cannot plant {offset} m in front of it", view)
    return eye + (t[0] - offset) * pose.rotation[2]


def plant_floaters(
    desc: SyntheticScene,
    views: Sequence[int],
    offset: float = 0.5,
    radius: float = 0.08,
    visible_views: Optional[List[int]] = None,
) -> SyntheticScene:
    """Copy of desc with one floater on the optical axis of each listed view"""
    floaters = list(desc.floaters)
    for view in views:
        center = axis_point(desc, view, offset)
        floaters.append(FloaterSphere(tuple(center.tolist()), radius, views=visible_views))
    return SyntheticScene(**{**desc.__dict__, "floaters": floaters})
