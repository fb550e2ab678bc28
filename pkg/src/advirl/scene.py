"""Pinhole cameras, multi-view rigs, ray generation and pose files.

Camera space follows the computer-vision convention: +x right, +y down,
+z forward.  ``cam_to_world`` maps camera-space points into world space.
Transforms files use the NeRF/OpenGL convention (+y up, -z forward) and
are converted on read and write.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

PathLike = Union[str, Path]

DEFAULT_TARGET = (0.5, 0.5, 0.5)

# flips y and z between the OpenGL camera frame and ours; it is its own inverse
_GL_FLIP = np.diag([1.0, -1.0, -1.0, 1.0])


class SceneError(ValueError):
    pass


class TransformsError(SceneError):
    """Base class for pose-file failures."""


class MissingFieldError(TransformsError):
    pass


class SingularPoseError(TransformsError):
    pass


class InconsistentResolutionError(TransformsError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray

    def __post_init__(self):
        m = np.array(self.cam_to_world, dtype=np.float64, copy=True)
        if m.shape != (4, 4):
            raise SceneError(f"cam_to_world must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise SceneError("cam_to_world must be finite")
        rot = m[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6, rtol=0.0):
            raise SceneError("cam_to_world rotation block is not orthonormal")
        if int(self.width) < 1 or int(self.height) < 1:
            raise SceneError(f"invalid resolution {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SceneError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )
        m.setflags(write=False)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "cam_to_world", m)

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:3, 3].copy()

    @property
    def forward(self) -> np.ndarray:
        return self.cam_to_world[:3, 2].copy()

    @property
    def resolution(self) -> Tuple[int, int]:
        return (self.width, self.height)

    def _key(self):
        return (self.width, self.height, self.fx, self.fy, self.cx, self.cy,
                self.cam_to_world.tobytes())

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())


@dataclass(frozen=True)
class CameraRig:
    cameras: Tuple[Camera, ...]

    def __post_init__(self):
        cams = tuple(self.cameras)
        if not cams:
            raise SceneError("a rig needs at least one camera")
        res = {c.resolution for c in cams}
        if len(res) != 1:
            raise SceneError(f"rig cameras disagree on resolution: {sorted(res)}")
        object.__setattr__(self, "cameras", cams)

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.cameras[0].resolution

    def subset(self, indices: Sequence[int]) -> "CameraRig":
        return CameraRig(tuple(self.cameras[i] for i in indices))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


def look_at(position, target, world_up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``position`` facing ``target``."""
    pos = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    norm = np.linalg.norm(fwd)
    if norm == 0:
        raise SceneError("camera position coincides with its target")
    fwd = fwd / norm
    up = np.asarray(world_up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        # looking straight along the up axis
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = down
    m[:3, 2] = fwd
    m[:3, 3] = pos
    return m


def _as_resolution(resolution) -> Tuple[int, int]:
    if isinstance(resolution, (int, np.integer)):
        return int(resolution), int(resolution)
    w, h = resolution
    return int(w), int(h)


def orbit_rig(n_views: int, radius: float, elevation: float = 0.0,
              target: Sequence[float] = DEFAULT_TARGET, resolution=64,
              focal: float = 64.0) -> CameraRig:
    """Cameras evenly spaced in azimuth on a circle around ``target``.

    Camera ``k`` sits at azimuth ``2*pi*k/n_views``; camera 0 lies on the +x
    side of the target.  Elevation is measured from the xy-plane.
    """
    if int(n_views) < 1:
        raise SceneError(f"n_views must be >= 1, got {n_views}")
    if not radius > 0:
        raise SceneError(f"orbit radius must be positive, got {radius}")
    w, h = _as_resolution(resolution)
    tgt = np.asarray(target, dtype=np.float64)
    cams = []
    for k in range(int(n_views)):
        az = 2.0 * math.pi * k / n_views
        offset = radius * np.array([
            math.cos(elevation) * math.cos(az),
            math.cos(elevation) * math.sin(az),
            math.sin(elevation),
        ])
        cams.append(Camera(w, h, focal, focal, w / 2.0, h / 2.0, look_at(tgt + offset, tgt)))
    return CameraRig(tuple(cams))


def generate_ray(cam: Camera, px: float, py: float) -> Ray:
    if not (0 <= px < cam.width and 0 <= py < cam.height):
        raise SceneError(f"pixel ({px}, {py}) outside {cam.width}x{cam.height} image")
    d_cam = np.array([(px + 0.5 - cam.cx) / cam.fx, (py + 0.5 - cam.cy) / cam.fy, 1.0])
    d = cam.cam_to_world[:3, :3] @ d_cam
    return Ray(cam.position, d / np.linalg.norm(d))


def camera_rays(cam: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for every pixel, each shaped (height*width, 3), row-major."""
    ys, xs = np.meshgrid(np.arange(cam.height, dtype=np.float64),
                         np.arange(cam.width, dtype=np.float64), indexing="ij")
    d_cam = np.stack([
        (xs + 0.5 - cam.cx) / cam.fx,
        (ys + 0.5 - cam.cy) / cam.fy,
        np.ones_like(xs),
    ], axis=-1).reshape(-1, 3)
    d = d_cam @ cam.cam_to_world[:3, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.cam_to_world[:3, 3], d.shape).copy()
    return origins, d


# -- transforms files -------------------------------------------------------


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise MissingFieldError(f"{where}: missing field {key!r}")
    return obj[key]


def parse_transforms(path: PathLike) -> CameraRig:
    """Read a NeRF-style ``transforms.json`` into a rig, one camera per frame."""
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except OSError as exc:
        raise TransformsError(f"cannot read {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise TransformsError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise TransformsError(f"{p}: top level must be an object")
    w = _require(doc, "w", str(p))
    h = _require(doc, "h", str(p))
    fl_x = _require(doc, "fl_x", str(p))
    fl_y = doc.get("fl_y", fl_x)
    cx = doc.get("cx", w / 2.0)
    cy = doc.get("cy", h / 2.0)
    frames = _require(doc, "frames", str(p))
    if not frames:
        raise MissingFieldError(f"{p}: 'frames' is empty")
    cams = []
    for i, fr in enumerate(frames):
        where = f"{p} frame {i}"
        _require(fr, "file_path", where)
        mat = np.asarray(_require(fr, "transform_matrix", where), dtype=np.float64)
        if mat.shape != (4, 4):
            raise TransformsError(f"{where}: transform_matrix must be 4x4, got {mat.shape}")
        if abs(np.linalg.det(mat)) < 1e-12:
            raise SingularPoseError(f"{where}: transform_matrix is not invertible")
        fw, fh = fr.get("w", w), fr.get("h", h)
        if (fw, fh) != (w, h):
            raise InconsistentResolutionError(
                f"{where}: resolution {fw}x{fh} differs from {w}x{h}"
            )
        try:
            cams.append(Camera(w, h, fl_x, fl_y, cx, cy, mat @ _GL_FLIP))
        except SceneError as exc:
            raise TransformsError(f"{where}: {exc}") from exc
    return CameraRig(tuple(cams))


def transforms_dict(rig: CameraRig, file_paths: Sequence[str] = None) -> dict:
    c0 = rig[0]
    if file_paths is None:
        file_paths = [f"images/view_{i:03d}.png" for i in range(len(rig))]
    return {
        "w": c0.width,
        "h": c0.height,
        "fl_x": c0.fx,
        "fl_y": c0.fy,
        "cx": c0.cx,
        "cy": c0.cy,
        "frames": [
            {"file_path": fp, "transform_matrix": (cam.cam_to_world @ _GL_FLIP).tolist()}
            for fp, cam in zip(file_paths, rig)
        ],
    }


def write_transforms(rig: CameraRig, path: PathLike, file_paths: Sequence[str] = None) -> None:
    Path(path).write_text(json.dumps(transforms_dict(rig, file_paths), indent=2))


def fixture_scene(kind: str, grid):
    """Deterministic ground-truth fields for tests and demos.

    ``sphere`` is an opaque red sphere of radius 0.3 centred in the unit box;
    ``two_boxes`` holds a red box and a blue box separated along y.
    """
    from .field import fixture_field

    return fixture_field(kind, grid)
