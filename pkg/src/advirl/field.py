"""Dense voxel radiance field: parameters, volume rendering, fitting, snapshots.

The field stores four raw values per voxel (density logit and three color
logits) in a flat float32 vector laid out as ``(R, R, R, 4)`` in C order,
indexed ``[ix, iy, iz, channel]``.  Density is ``softplus(raw)`` and color is
``sigmoid(raw)``, so any real-valued perturbation keeps the field valid.

Rendering marches ``samples_per_ray`` equally spaced midpoints through the
ray's segment inside the bounding box.  Trilinear interpolation weights only
depend on geometry and camera, so they are packed once into a sparse matrix
per (geometry, camera) pair and reused across parameter updates.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .imaging import Image
from .scene import Camera, CameraRig, camera_rays

PathLike = Union[str, Path]

SNAPSHOT_MAGIC = b"AVRL"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIII6d3d")


class FieldError(ValueError):
    pass


class SnapshotError(FieldError):
    """Base class for snapshot read failures."""


class BadMagicError(SnapshotError):
    pass


class TruncatedSnapshotError(SnapshotError):
    pass


class VersionMismatchError(SnapshotError):
    pass


@dataclass(frozen=True)
class FieldGeometry:
    resolution: int = 16
    aabb_min: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    aabb_max: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    samples_per_ray: int = 32
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.aabb_min)
        hi = tuple(float(v) for v in self.aabb_max)
        bg = tuple(float(v) for v in self.background)
        if len(lo) != 3 or len(hi) != 3 or len(bg) != 3:
            raise FieldError("aabb corners and background must have three components")
        if not all(a < b for a, b in zip(lo, hi)):
            raise FieldError(f"aabb_min {lo} must be below aabb_max {hi} componentwise")
        if int(self.resolution) < 2:
            raise FieldError(f"resolution must be >= 2, got {self.resolution}")
        if int(self.samples_per_ray) < 2:
            raise FieldError(f"samples_per_ray must be >= 2, got {self.samples_per_ray}")
        if not all(0.0 <= c <= 1.0 for c in bg):
            raise FieldError(f"background must lie in [0, 1], got {bg}")
        object.__setattr__(self, "aabb_min", lo)
        object.__setattr__(self, "aabb_max", hi)
        object.__setattr__(self, "background", bg)
        object.__setattr__(self, "resolution", int(self.resolution))
        object.__setattr__(self, "samples_per_ray", int(self.samples_per_ray))

    @property
    def voxel_count(self) -> int:
        return self.resolution ** 3

    def voxel_centers(self) -> np.ndarray:
        """World positions of voxel centres, shape (R, R, R, 3)."""
        r = self.resolution
        lo = np.asarray(self.aabb_min)
        size = np.asarray(self.aabb_max) - lo
        idx = (np.arange(r) + 0.5) / r
        gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
        return lo + np.stack([gx, gy, gz], axis=-1) * size


def param_count(geom: FieldGeometry) -> int:
    return 4 * geom.resolution ** 3


def check_params(values, geom: FieldGeometry) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.shape[0] != param_count(geom):
        raise FieldError(
            f"parameter vector has shape {arr.shape}, expected ({param_count(geom)},)"
        )
    if not np.all(np.isfinite(arr)):
        raise FieldError("parameter vector contains non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class RadianceField:
    geometry: FieldGeometry
    params: np.ndarray

    def __post_init__(self):
        p = np.array(check_params(self.params, self.geometry), dtype=np.float32, copy=True)
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    def grid(self) -> np.ndarray:
        r = self.geometry.resolution
        return self.params.reshape(r, r, r, 4)

    def with_params(self, params) -> "RadianceField":
        return RadianceField(self.geometry, params)

    def __eq__(self, other):
        if not isinstance(other, RadianceField):
            return NotImplemented
        return self.geometry == other.geometry and self.params.tobytes() == other.params.tobytes()

    def __hash__(self):
        return hash((self.geometry, self.params.tobytes()))


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# -- interpolation ----------------------------------------------------------


def _trilinear_stencil(geom: FieldGeometry, points: np.ndarray):
    """Flat voxel indices and weights (each shaped (n, 8)) for points inside the box."""
    r = geom.resolution
    lo = np.asarray(geom.aabb_min)
    size = np.asarray(geom.aabb_max) - lo
    u = (points - lo) / size * r - 0.5
    u = np.clip(u, 0.0, r - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), r - 2)
    t = u - i0
    idx = np.empty(points.shape[:-1] + (8,), dtype=np.int64)
    w = np.empty(points.shape[:-1] + (8,), dtype=np.float64)
    k = 0
    for dx in (0, 1):
        wx = t[..., 0] if dx else 1.0 - t[..., 0]
        for dy in (0, 1):
            wy = t[..., 1] if dy else 1.0 - t[..., 1]
            for dz in (0, 1):
                wz = t[..., 2] if dz else 1.0 - t[..., 2]
                idx[..., k] = ((i0[..., 0] + dx) * r + (i0[..., 1] + dy)) * r + (i0[..., 2] + dz)
                w[..., k] = wx * wy * wz
                k += 1
    return idx, w


def _inside(geom: FieldGeometry, points: np.ndarray) -> np.ndarray:
    lo = np.asarray(geom.aabb_min)
    hi = np.asarray(geom.aabb_max)
    return np.all((points >= lo) & (points <= hi), axis=-1)


def sample(field: RadianceField, point) -> Tuple[float, np.ndarray]:
    """Density and color at a world point; outside the box density is 0 and color is background."""
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    geom = field.geometry
    if not _inside(geom, p)[0]:
        return 0.0, np.asarray(geom.background, dtype=np.float64)
    idx, w = _trilinear_stencil(geom, p)
    raw = (w[..., None] * field.params.reshape(-1, 4).astype(np.float64)[idx]).sum(axis=1)[0]
    return float(softplus(raw[0])), expit(raw[1:])


# -- rendering --------------------------------------------------------------


def _ray_box(geom: FieldGeometry, origins: np.ndarray, dirs: np.ndarray):
    lo = np.asarray(geom.aabb_min)
    hi = np.asarray(geom.aabb_max)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    # axis-parallel rays outside the slab never hit
    parallel_miss = (dirs == 0) & ((origins < lo) | (origins > hi))
    t_near = np.maximum(tmin.max(axis=1), 0.0)
    t_far = tmax.min(axis=1)
    hit = (t_far > t_near) & ~parallel_miss.any(axis=1)
    return hit, t_near, t_far


class RenderPlan:
    """Geometry-only precomputation for rendering one camera."""

    def __init__(self, geom: FieldGeometry, cam: Camera):
        self.geometry = geom
        self.width = cam.width
        self.height = cam.height
        origins, dirs = camera_rays(cam)
        hit, t_near, t_far = _ray_box(geom, origins, dirs)
        self.hit = hit
        self.hit_index = np.flatnonzero(hit)
        n = self.hit_index.size
        s = geom.samples_per_ray
        seg = t_far[hit] - t_near[hit]
        self.delta = seg / s
        ts = t_near[hit][:, None] + (np.arange(s) + 0.5)[None, :] * self.delta[:, None]
        pts = origins[hit][:, None, :] + ts[..., None] * dirs[hit][:, None, :]
        idx, w = _trilinear_stencil(geom, pts.reshape(-1, 3))
        rows = np.repeat(np.arange(n * s), 8)
        self.interp = sp.csr_matrix(
            (w.ravel(), (rows, idx.ravel())), shape=(n * s, geom.voxel_count)
        )
        self.interp_t = self.interp.T.tocsr()

    @property
    def n_rays(self) -> int:
        return self.hit_index.size

    def raw_samples(self, params: np.ndarray) -> np.ndarray:
        grid = np.asarray(params, dtype=np.float64).reshape(-1, 4)
        return (self.interp @ grid).reshape(self.n_rays, self.geometry.samples_per_ray, 4)

    def render_array(self, params: np.ndarray, cache: Optional[dict] = None) -> np.ndarray:
        """Pixel colors shaped (height, width, 3); optionally keep intermediates for backprop."""
        bg = np.asarray(self.geometry.background)
        out = np.empty((self.height * self.width, 3))
        out[:] = bg
        if self.n_rays:
            raw = self.raw_samples(params)
            rgb, inter = composite(raw, self.delta, bg)
            out[self.hit_index] = rgb
            if cache is not None:
                cache.update(inter)
                cache["raw"] = raw
        return out.reshape(self.height, self.width, 3)

    def backward(self, grad_pixels: np.ndarray, cache: dict) -> np.ndarray:
        """Gradient w.r.t. the flat parameter vector given dL/dpixel (height, width, 3)."""
        g = grad_pixels.reshape(-1, 3)[self.hit_index]
        graw = composite_backward(g, cache, self.delta, np.asarray(self.geometry.background))
        return (self.interp_t @ graw.reshape(-1, 4)).ravel()


def composite(raw: np.ndarray, delta: np.ndarray, background) -> Tuple[np.ndarray, dict]:
    """Emission-absorption compositing of raw samples shaped (rays, samples, 4)."""
    sigma = softplus(raw[..., 0])
    color = expit(raw[..., 1:])
    tau = sigma * delta[:, None]
    cum = np.cumsum(tau, axis=1)
    # t_next[i] = T_{i+1}; the weight T_i * (1 - exp(-tau_i)) is T_i - T_{i+1}
    t_next = np.exp(-cum)
    trans = np.empty_like(t_next)
    trans[:, 0] = 1.0
    trans[:, 1:] = t_next[:, :-1]
    weights = trans - t_next
    t_final = t_next[:, -1]
    rgb = np.matmul(weights[:, None, :], color)[:, 0, :] + t_final[:, None] * np.asarray(background)
    inter = {"color": color, "weights": weights, "t_next": t_next, "t_final": t_final}
    return rgb, inter


def composite_weights(raw: np.ndarray, delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample weights T_i * alpha_i and the final transmittance."""
    _, inter = composite(raw, delta, (0.0, 0.0, 0.0))
    return inter["weights"], inter["t_final"]


def composite_backward(g: np.ndarray, inter: dict, delta: np.ndarray, background) -> np.ndarray:
    color, weights, t_next, t_final = (inter[k] for k in ("color", "weights", "t_next", "t_final"))
    raw = inter["raw"]
    grad = np.empty(raw.shape)
    # color logits
    grad[..., 1:] = weights[..., None] * g[:, None, :] * color * (1.0 - color)
    # d pixel / d tau_k = T_{k+1} c_k - (sum_{i>k} w_i c_i + T_final * bg)
    contrib = weights[..., None] * color
    after = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    after += t_final[:, None, None] * np.asarray(background)
    dtau = np.einsum("rsc,rc->rs", t_next[..., None] * color - after, g)
    grad[..., 0] = dtau * delta[:, None] * expit(raw[..., 0])
    return grad


@functools.lru_cache(maxsize=64)
def render_plan(geom: FieldGeometry, cam: Camera) -> RenderPlan:
    return RenderPlan(geom, cam)


def render(field: RadianceField, cam: Camera) -> Image:
    arr = render_plan(field.geometry, cam).render_array(field.params)
    return Image(np.clip(arr, 0.0, 1.0))


def render_rig(field: RadianceField, rig: CameraRig) -> List[Image]:
    return [render(field, cam) for cam in rig]


class RigRenderer:
    """Renders every camera of a rig against one shared set of cached plans."""

    def __init__(self, geom: FieldGeometry, rig: CameraRig):
        self.geometry = geom
        self.rig = rig
        self.plans = [RenderPlan(geom, cam) for cam in rig]

    def render_arrays(self, params) -> List[np.ndarray]:
        grid = np.asarray(params, dtype=np.float64)
        return [plan.render_array(grid) for plan in self.plans]

    def render(self, params) -> List[Image]:
        return [Image(np.clip(a, 0.0, 1.0)) for a in self.render_arrays(params)]


def apply_delta(p_old, action, bound: float) -> np.ndarray:
    """New parameters ``p_old + clip(action, -bound, bound)`` as float32."""
    p = np.asarray(p_old)
    a = np.asarray(action, dtype=np.float64)
    if a.shape != p.shape:
        raise FieldError(f"action shape {a.shape} does not match parameters {p.shape}")
    if bound < 0:
        raise FieldError(f"bound must be nonnegative, got {bound}")
    step = np.clip(a, -bound, bound)
    return (p.astype(np.float64) + step).astype(np.float32)


# -- fitting ----------------------------------------------------------------


def photometric_loss(geom: FieldGeometry, params: np.ndarray, images: Sequence[Image],
                     rig: CameraRig, with_grad: bool = True):
    """Mean squared error (unit scale) over all views, pixels and channels, with its gradient."""
    plans = [render_plan(geom, cam) for cam in rig]
    n = sum(img.pixels.size for img in images)
    loss = 0.0
    grad = np.zeros(param_count(geom)) if with_grad else None
    for plan, img in zip(plans, images):
        cache = {} if with_grad else None
        pred = plan.render_array(params, cache)
        diff = pred - img.pixels
        loss += float(np.sum(diff * diff))
        if with_grad and plan.n_rays:
            grad += plan.backward(2.0 * diff / n, cache)
    return loss / n, grad


def init_params(geom: FieldGeometry, seed: int = 0, density: float = -2.0,
                scale: float = 0.01) -> np.ndarray:
    rng = np.random.default_rng(seed)
    p = rng.normal(0.0, scale, size=(geom.voxel_count, 4))
    p[:, 0] += density
    return p.ravel()


def fit(geom: FieldGeometry, images: Sequence[Image], rig: CameraRig, steps: int = 300,
        learning_rate: float = 1000.0, seed: int = 0, init: Optional[np.ndarray] = None,
        loss_history: Optional[list] = None) -> RadianceField:
    """Fit a field to posed images by plain gradient descent on the photometric error."""
    if len(images) != len(rig):
        raise FieldError(f"{len(images)} images but {len(rig)} cameras")
    for i, img in enumerate(images):
        if (img.width, img.height) != rig.resolution:
            raise FieldError(
                f"image {i} is {img.width}x{img.height}, rig renders {rig.resolution}"
            )
    if steps < 0:
        raise FieldError("steps must be nonnegative")
    params = np.array(init if init is not None else init_params(geom, seed), dtype=np.float64)
    check_params(params, geom)
    for _ in range(steps):
        loss, grad = photometric_loss(geom, params, images, rig)
        if loss_history is not None:
            loss_history.append(loss)
        params -= learning_rate * grad
    if loss_history is not None and steps:
        loss_history.append(photometric_loss(geom, params, images, rig, with_grad=False)[0])
    return RadianceField(geom, params)


# -- fixtures ---------------------------------------------------------------

SPHERE_CENTER = (0.5, 0.5, 0.5)
SPHERE_RADIUS = 0.3
SOLID_LOGIT = 50.0
EMPTY_LOGIT = -20.0
RED_LOGITS = (2.0, -2.0, -2.0)
BLUE_LOGITS = (-2.0, -2.0, 2.0)
BOXES = (
    ((0.3, 0.1, 0.3), (0.7, 0.4, 0.7), RED_LOGITS),
    ((0.3, 0.6, 0.3), (0.7, 0.9, 0.7), BLUE_LOGITS),
)


def fixture_field(kind: str, geom: FieldGeometry, color_logits=RED_LOGITS) -> RadianceField:
    centers = geom.voxel_centers()
    grid = np.zeros(centers.shape[:-1] + (4,))
    if kind == "sphere":
        d = np.linalg.norm(centers - np.asarray(SPHERE_CENTER), axis=-1)
        inside = d < SPHERE_RADIUS
        grid[..., 0] = np.where(inside, SOLID_LOGIT, EMPTY_LOGIT)
        grid[..., 1:] = color_logits
    elif kind == "two_boxes":
        grid[..., 0] = EMPTY_LOGIT
        for lo, hi, logits in BOXES:
            inside = np.all((centers >= lo) & (centers <= hi), axis=-1)
            grid[inside, 0] = SOLID_LOGIT
            grid[inside, 1:] = logits
    else:
        raise FieldError(f"unknown fixture kind {kind!r} (expected 'sphere' or 'two_boxes')")
    return RadianceField(geom, grid.ravel())


# -- snapshots --------------------------------------------------------------


def save_snapshot(field: RadianceField, path: PathLike) -> None:
    g = field.geometry
    header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, g.resolution, g.samples_per_ray,
                          *g.aabb_min, *g.aabb_max, *g.background)
    Path(path).write_bytes(header + field.params.astype("<f4").tobytes())


def load_snapshot(path: PathLike) -> RadianceField:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != SNAPSHOT_MAGIC:
        raise BadMagicError(f"{path}: not a field snapshot (bad magic {data[:4]!r})")
    if len(data) < _HEADER.size:
        raise TruncatedSnapshotError(f"{path}: header truncated ({len(data)} bytes)")
    fields = _HEADER.unpack_from(data)
    version, r, spp = fields[1:4]
    if version != SNAPSHOT_VERSION:
        raise VersionMismatchError(
            f"{path}: snapshot version {version}, this build reads {SNAPSHOT_VERSION}"
        )
    geom = FieldGeometry(resolution=r, samples_per_ray=spp, aabb_min=fields[4:7],
                         aabb_max=fields[7:10], background=fields[10:13])
    expected = 4 * param_count(geom)
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedSnapshotError(
            f"{path}: expected {expected} parameter bytes, found {len(payload)}"
        )
    params = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return RadianceField(geom, params)
