"""
Scene I/O
Manifest loading and writing, image/depth files and Gaussian PLY interop
"""

import json
import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import cv2
import numpy as np
from plyfile import PlyData, PlyElement
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.special import expit, logit

from src.errors import DataError, DepthUnitError, MissingFileError, PoseError
from src.gaussian_map import ALPHA_RANGE, GaussianPrimitives
from src.geometry import Camera, CameraFrame, Intrinsics, Pose
from src.utils import ensure_directory, save_json

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "1"
DEPTH_UNITS = {"mm": 1e-3, "m": 1.0}
POSE_TOL = 1e-6
SH_C0 = 0.28209479177387814
PLY_FIELDS = (
    ["x", "y", "z", "opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + [f"f_dc_{i}" for i in range(3)]
)


class IntrinsicsSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


class FrameSpec(BaseModel):
    """One manifest frame; paths are relative to the manifest file"""
    model_config = ConfigDict(extra="forbid")

    image: str
    depth: Optional[str] = None
    pose: List[List[float]]  # 4x4 camera-to-world, row-major
    intrinsics: IntrinsicsSpec
    name: Optional[str] = None
    split: Literal["input", "interp", "extrap"] = "input"


class SceneManifest(BaseModel):
    """Versioned JSON scene description"""
    model_config = ConfigDict(extra="forbid")

    version: str = MANIFEST_VERSION
    depth_unit: str = "m"
    near: Optional[float] = Field(None, gt=0)
    far: Optional[float] = Field(None, gt=0)
    frames: List[FrameSpec] = Field(..., min_length=1)


def read_manifest(path: str) -> SceneManifest:
    """
    Parse and validate a manifest file

    Args:
        path: Path to the JSON manifest

    Returns:
        SceneManifest
    """
    file_path = Path(path)
    if not file_path.exists():
        raise MissingFileError(str(file_path))
    try:
        with open(file_path, "r") as f:
            return SceneManifest.model_validate(json.load(f))
    except json.JSONDecodeError as e:
        raise DataError(f"Manifest {path} is not valid JSON: {e}") from e
    except ValidationError as e:
        raise DataError(f"Manifest {path} does not match the schema: {e}") from e


def camera_to_world_pose(matrix, frame_index: Optional[int] = None) -> Pose:
    """
    World-to-camera pose from a 4x4 camera-to-world matrix

    Rotations within 1e-6 of orthonormal are re-orthonormalized.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (4, 4) or not np.isfinite(m).all():
        raise PoseError(f"pose must be a finite 4x4 matrix, got shape {m.shape}", frame_index)
    if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=POSE_TOL):
        raise PoseError(f"pose bottom row must be [0, 0, 0, 1], got {m[3].tolist()}", frame_index)

    rotation = m[:3, :3]
    if not np.allclose(rotation.T @ rotation, np.eye(3), atol=POSE_TOL) or np.linalg.det(rotation) <= 0:
        raise PoseError("pose rotation is not a proper rotation", frame_index)
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    return Pose(rotation, m[:3, 3]).inverse()


def read_image(path: Path, frame_index: Optional[int] = None) -> np.ndarray:
    """Read an image as H x W x 3 RGB float64 in [0, 1]"""
    if not path.exists():
        raise MissingFileError(str(path), frame_index)
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DataError(f"cannot decode image '{path}'", frame_index)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    elif image.shape[2] == 4:
        image = cv2.cvtColor(image, cv2.COLOR_BGRA2RGB)
    else:
        image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.float64) / np.iinfo(image.dtype).max
    return image.astype(np.float64)


def write_image(path: str, image: np.ndarray):
    """Write an RGB [0, 1] image as 8-bit PNG"""
    ensure_directory(str(Path(path).parent))
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(data, cv2.COLOR_RGB2BGR)):
        raise DataError(f"cannot write image '{path}'")


def read_depth(path: Path, unit: str = "m", frame_index: Optional[int] = None) -> np.ndarray:
    """
    Read a depth map (16-bit PNG or PFM) and convert it to metres

    Args:
        path: Depth file
        unit: Unit of the stored values, 'mm' or 'm'
        frame_index: For error messages

    Returns:
        H x W depth in metres, 0 = invalid
    """
    if unit not in DEPTH_UNITS:
        raise DepthUnitError(f"unknown depth unit '{unit}', expected one of {sorted(DEPTH_UNITS)}", frame_index)
    if not path.exists():
        raise MissingFileError(str(path), frame_index)
    depth = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if depth is None:
        raise DataError(f"cannot decode depth '{path}'", frame_index)
    if depth.ndim == 3:
        depth = depth[:, :, 0]
    depth = depth.astype(np.float64) * DEPTH_UNITS[unit]
    depth[~np.isfinite(depth) | (depth < 0)] = 0.0
    return depth


def write_depth(path: str, depth: np.ndarray):
    """Write metric depth: .png as 16-bit millimetres, .pfm as float32 metres"""
    file_path = Path(path)
    ensure_directory(str(file_path.parent))
    suffix = file_path.suffix.lower()
    if suffix == ".png":
        data = np.clip(np.round(depth * 1000.0), 0, np.iinfo(np.uint16).max).astype(np.uint16)
    elif suffix == ".pfm":
        data = np.asarray(depth, dtype=np.float32)
    else:
        raise DataError(f"unsupported depth format '{suffix}' for {path}")
    if not cv2.imwrite(str(file_path), data):
        raise DataError(f"cannot write depth '{path}'")


def load_scene(path: str) -> List[CameraFrame]:
    """
    Load every frame of a manifest

    Args:
        path: Manifest path

    Returns:
        Frames in manifest order with depths in metres and world-to-camera poses
    """
    manifest = read_manifest(path)
    root = Path(path).parent
    if manifest.depth_unit not in DEPTH_UNITS:
        first = next((i for i, f in enumerate(manifest.frames) if f.depth), None)
        raise DepthUnitError(
            f"unknown depth unit '{manifest.depth_unit}', expected one of {sorted(DEPTH_UNITS)}", first
        )

    frames = []
    for index, spec in enumerate(manifest.frames):
        image = read_image(root / spec.image, index)
        k = spec.intrinsics
        if image.shape[:2] != (k.height, k.width):
            raise DataError(
                f"image is {image.shape[1]}x{image.shape[0]} but intrinsics say {k.width}x{k.height}", index
            )
        try:
            intrinsics = Intrinsics(k.fx, k.fy, k.cx, k.cy, k.width, k.height)
        except ValueError as e:
            raise DataError(str(e), index) from e
        pose = camera_to_world_pose(spec.pose, index)
        depth = read_depth(root / spec.depth, manifest.depth_unit, index) if spec.depth else None
        if depth is not None and depth.shape != image.shape[:2]:
            raise DataError(f"depth {depth.shape} does not match image {image.shape[:2]}", index)

        frames.append(CameraFrame(
            index=index,
            image=image,
            camera=Camera(intrinsics, pose),
            depth=depth,
            name=spec.name or Path(spec.image).stem,
            split=spec.split,
        ))

    logger.info(f"Loaded {len(frames)} frames from {path}")
    return frames


def write_scene(
    frames: List[CameraFrame],
    output_dir: str,
    depth_format: str = "pfm",
    near: Optional[float] = None,
    far: Optional[float] = None,
) -> Path:
    """
    Write frames as PNG images, depth files and a manifest

    Args:
        frames: Frames to write
        output_dir: Target directory
        depth_format: 'pfm' (metres) or 'png' (16-bit millimetres)
        near, far: Optional depth range hints

    Returns:
        Path of the written manifest.json
    """
    if depth_format not in ("pfm", "png"):
        raise DataError(f"unsupported depth format '{depth_format}'")
    root = ensure_directory(output_dir)
    specs = []
    for frame in frames:
        stem = frame.name or f"frame_{frame.index:04d}"
        image_name = f"images/{stem}.png"
        write_image(str(root / image_name), frame.image)
        depth_name = None
        if frame.depth is not None:
            depth_name = f"depths/{stem}.{depth_format}"
            write_depth(str(root / depth_name), frame.depth)

        k = frame.camera.intrinsics
        specs.append(FrameSpec(
            image=image_name,
            depth=depth_name,
            pose=frame.camera.pose.inverse().matrix.tolist(),
            intrinsics=IntrinsicsSpec(fx=k.fx, fy=k.fy, cx=k.cx, cy=k.cy, width=k.width, height=k.height),
            name=stem,
            split=frame.split,
        ))

    manifest = SceneManifest(
        depth_unit="mm" if depth_format == "png" else "m",
        near=near,
        far=far,
        frames=specs,
    )
    path = root / "manifest.json"
    save_json(manifest.model_dump(exclude_none=True), str(path))
    logger.info(f"Wrote {len(frames)} frames to {path}")
    return path


def export_ply(prims: GaussianPrimitives, path: str):
    """
    Binary little-endian PLY in the common splat-viewer layout

    Opacity is stored as a logit, scales as logs and colour as a degree-0 SH coefficient.
    """
    vertices = np.empty(prims.size, dtype=[(name, "<f4") for name in PLY_FIELDS])
    vertices["x"], vertices["y"], vertices["z"] = prims.means.T
    vertices["opacity"] = logit(np.clip(prims.opacities, *ALPHA_RANGE))
    for i in range(3):
        vertices[f"scale_{i}"] = np.log(prims.scales[:, i])
        vertices[f"f_dc_{i}"] = (prims.colors[:, i] - 0.5) / SH_C0
    for i in range(4):
        vertices[f"rot_{i}"] = prims.quaternions[:, i]

    element = PlyElement.describe(vertices, "vertex")
    try:
        ensure_directory(str(Path(path).parent))
        PlyData([element], text=False, byte_order="<").write(str(path))
    except OSError as e:
        raise DataError(f"cannot write PLY '{path}': {e}") from e
    logger.info(f"Exported {prims.size} Gaussians to {path}")


def import_ply(path: str) -> GaussianPrimitives:
    """Read a PLY written by export_ply (or any viewer file with the same fields)"""
    if not Path(path).exists():
        raise MissingFileError(str(path))
    try:
        vertex = PlyData.read(str(path))["vertex"]
    except (KeyError, ValueError, OSError) as e:
        raise DataError(f"cannot read PLY '{path}': {e}") from e

    names = vertex.data.dtype.names or ()
    missing = [name for name in PLY_FIELDS if name not in names]
    if missing:
        raise DataError(f"PLY '{path}' lacks fields {missing}")

    def column(name: str) -> np.ndarray:
        return np.asarray(vertex[name], dtype=np.float64)

    return GaussianPrimitives(
        means=np.stack([column("x"), column("y"), column("z")], axis=-1).reshape(-1, 3),
        quaternions=np.stack([column(f"rot_{i}") for i in range(4)], axis=-1).reshape(-1, 4),
        scales=np.exp(np.stack([column(f"scale_{i}") for i in range(3)], axis=-1)).reshape(-1, 3),
        opacities=expit(column("opacity")),
        colors=(np.stack([column(f"f_dc_{i}") for i in range(3)], axis=-1) * SH_C0 + 0.5).reshape(-1, 3),
    )


def frame_lookup(frames: List[CameraFrame], names: Optional[List[str]]) -> Tuple[List[CameraFrame], List[str]]:
    """
    Select frames by name or index string

    Returns:
        Selected frames and the list of unknown identifiers
    """
    if not names:
        return list(frames), []
    by_key = {}
    for frame in frames:
        by_key[frame.name] = frame
        by_key[str(frame.index)] = frame
    selected = [by_key[n] for n in names if n in by_key]
    unknown = [n for n in names if n not in by_key]
    return selected, unknown
