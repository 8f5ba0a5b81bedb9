"""Pinhole camera rig and a flat-colour ray-cast renderer.

Frames: world (x, y, z up), ego (x forward, y left, z up, origin at the footprint
centre on the ground) and camera (x right, y down, z forward). Pixel (row i,
column j) covers [j, j+1) x [i, i+1) in image coordinates, so its centre is at
(j + 0.5, i + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .world import CAR_LENGTH, WorldState, make_layout

IMAGE_SIZE = 128
FOV_DEG = 100.0
MOUNT_HEIGHT = 1.6
PITCH_DEG = 25.0
FAR = 60.0
VEHICLE_HEIGHT = 1.5
PED_HEIGHT = 1.7

PALETTE = {
    "ground": (72, 72, 72),
    "marking": (235, 235, 235),
    "vehicle": (40, 90, 200),
    "pedestrian": (220, 40, 40),
}


def _colour(name):
    return np.array(PALETTE[name], dtype=np.float64) / 255.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width, height, fov_deg):
        f = (width / 2) / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)


@dataclass(frozen=True)
class CameraExtrinsics:
    """Ego -> camera: ``p_cam = rotation @ p_ego + translation``."""

    rotation: np.ndarray = field(repr=False)
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be a proper orthonormal 3x3 matrix")

    @classmethod
    def from_mount(cls, x, y, z, yaw, pitch_down):
        """Camera at (x, y, z) in the ego frame looking along ``yaw``, tilted down."""
        cp, sp = math.cos(pitch_down), math.sin(pitch_down)
        fwd = np.array([cp * math.cos(yaw), cp * math.sin(yaw), -sp])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(rot, -rot @ np.array([x, y, z], dtype=np.float64))

    def centre(self):
        """Camera position in the ego frame."""
        return -self.rotation.T @ self.translation

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class Camera:
    name: str
    intr: CameraIntrinsics
    extr: CameraExtrinsics


@dataclass(frozen=True)
class CameraFrame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) camera-frame z, 0 = no hit
    camera_id: str


def default_rig(size=IMAGE_SIZE, fov_deg=FOV_DEG):
    intr = CameraIntrinsics.from_fov(size, size, fov_deg)
    pitch = math.radians(PITCH_DEG)
    half = CAR_LENGTH / 2
    mounts = (
        ("front", half, 0.0, 0.0),
        ("rear", -half, 0.0, math.pi),
        ("left", 0.0, 0.95, math.pi / 2),
        ("right", 0.0, -0.95, -math.pi / 2),
    )
    return tuple(Camera(n, intr, CameraExtrinsics.from_mount(x, y, MOUNT_HEIGHT, yaw, pitch))
                 for n, x, y, yaw in mounts)


def _ego_to_world(points, ego_pose):
    if ego_pose is None:
        return points
    c, s = math.cos(ego_pose.psi), math.sin(ego_pose.psi)
    out = points.copy()
    out[..., 0] = ego_pose.x + c * points[..., 0] - s * points[..., 1]
    out[..., 1] = ego_pose.y + s * points[..., 0] + c * points[..., 1]
    return out


def _world_to_ego(points, ego_pose):
    if ego_pose is None:
        return points
    c, s = math.cos(ego_pose.psi), math.sin(ego_pose.psi)
    dx, dy = points[..., 0] - ego_pose.x, points[..., 1] - ego_pose.y
    out = points.copy()
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    return out


def project_points(points, intr: CameraIntrinsics, extr: CameraExtrinsics, ego_pose=None):
    """Vectorised projection of (N, 3) points; returns (uv (N, 2), depth (N,)).

    ``ego_pose=None`` means the points are already in the ego frame. Entries with
    depth <= 0 are behind the camera and their uv is NaN.
    """
    p = _world_to_ego(np.atleast_2d(np.asarray(points, dtype=np.float64)), ego_pose)
    cam = p @ extr.rotation.T + extr.translation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([intr.fx * cam[:, 0] / z + intr.cx, intr.fy * cam[:, 1] / z + intr.cy], axis=1)
    uv[z <= 0] = np.nan
    return uv, z


def project(point, intr, extr, ego_pose=None):
    """(u, v, depth) of one point, or None when it lies behind the camera."""
    uv, z = project_points(point, intr, extr, ego_pose)
    if z[0] <= 0:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def unproject_points(u, v, depth, intr, extr, ego_pose=None):
    """Inverse of :func:`project_points` for pixel coordinates with known depth."""
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    if np.any(depth <= 0):
        raise ValueError("unproject needs strictly positive depth")
    cam = np.stack([(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth], axis=-1)
    ego = (cam - extr.translation) @ extr.rotation
    return _ego_to_world(ego, ego_pose)


def unproject(u, v, depth, intr, extr, ego_pose=None):
    return unproject_points(u, v, depth, intr, extr, ego_pose).reshape(3)


def pixel_rays(intr: CameraIntrinsics):
    """Camera-frame directions (H, W, 3) with unit z through every pixel centre."""
    j, i = np.meshgrid(np.arange(intr.width) + 0.5, np.arange(intr.height) + 0.5)
    return np.stack([(j - intr.cx) / intr.fx, (i - intr.cy) / intr.fy, np.ones_like(j)], axis=-1)


# -- rendering -----------------------------------------------------------------
MARK_RES = 0.02


@lru_cache(maxsize=None)
def _marking_raster(kind):
    """Boolean occupancy of painted lines at MARK_RES, cached per layout."""
    layout = make_layout(kind)
    x0, y0, x1, y1 = layout.bounds
    nx, ny = int(round((x1 - x0) / MARK_RES)), int(round((y1 - y0) / MARK_RES))
    gx = x0 + (np.arange(nx) + 0.5) * MARK_RES
    gy = y0 + (np.arange(ny) + 0.5) * MARK_RES
    raster = np.zeros((nx, ny), dtype=bool)
    for box in layout.markings:
        c = box.corners()
        ix = slice(max(int((c[:, 0].min() - x0) / MARK_RES), 0), min(int((c[:, 0].max() - x0) / MARK_RES) + 2, nx))
        iy = slice(max(int((c[:, 1].min() - y0) / MARK_RES), 0), min(int((c[:, 1].max() - y0) / MARK_RES) + 2, ny))
        px, py = np.meshgrid(gx[ix], gy[iy], indexing="ij")
        inside = box.contains(np.stack([px.ravel(), py.ravel()], axis=1)).reshape(px.shape)
        raster[ix, iy] |= inside
    return raster, (x0, y0)


def _is_marking(kind, x, y):
    raster, (x0, y0) = _marking_raster(kind)
    ix = np.floor((x - x0) / MARK_RES).astype(np.int64)
    iy = np.floor((y - y0) / MARK_RES).astype(np.int64)
    ok = (ix >= 0) & (ix < raster.shape[0]) & (iy >= 0) & (iy < raster.shape[1])
    out = np.zeros(x.shape, dtype=bool)
    out[ok] = raster[ix[ok], iy[ok]]
    return out


def _ray_box(origin, dirs, box, height):
    """Entry distance of rays into an upright oriented box standing on the ground (inf = miss)."""
    c, s = math.cos(box.psi), math.sin(box.psi)
    ox, oy = origin[0] - box.cx, origin[1] - box.cy
    lo = np.array([-box.length / 2, -box.width / 2, 0.0])
    hi = np.array([box.length / 2, box.width / 2, height])
    o = np.array([c * ox + s * oy, -s * ox + c * oy, origin[2]])
    d = np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    # parallel rays: inside the slab means unbounded, outside means miss
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    enter = tmin.max(axis=1)
    leave = tmax.min(axis=1)
    hit = (enter <= leave) & (enter > 0)
    return np.where(hit, enter, np.inf)


def _scene_boxes(world: WorldState, centre, reach):
    boxes = [(b, VEHICLE_HEIGHT, "vehicle") for b in world.static_vehicles]
    boxes += [(p.box(), PED_HEIGHT, "pedestrian") for p in world.pedestrians if p.present]
    return [b for b in boxes if math.hypot(b[0].cx - centre[0], b[0].cy - centre[1]) < reach]


def _box_window(box, height, world_to_cam, intr):
    """Pixel window (i0, i1, j0, j1) that can contain the box, or None if it is behind the camera."""
    base = box.corners()
    pts = np.concatenate([np.c_[base, np.zeros(4)], np.c_[base, np.full(4, height)]])
    cam = pts @ world_to_cam[:3, :3].T + world_to_cam[:3, 3]
    z = cam[:, 2]
    if np.all(z <= 1e-6):
        return None
    if np.any(z <= 1e-6):
        return 0, intr.height, 0, intr.width
    u = intr.fx * cam[:, 0] / z + intr.cx
    v = intr.fy * cam[:, 1] / z + intr.cy
    j0, j1 = max(int(math.floor(u.min())) - 1, 0), min(int(math.ceil(u.max())) + 1, intr.width)
    i0, i1 = max(int(math.floor(v.min())) - 1, 0), min(int(math.ceil(v.max())) + 1, intr.height)
    if j0 >= j1 or i0 >= i1:
        return None
    return i0, i1, j0, j1


def render_camera(world: WorldState, cam: Camera) -> CameraFrame:
    intr, extr = cam.intr, cam.extr
    h, w = intr.height, intr.width
    pose = world.ego.pose
    c, s = math.cos(pose.psi), math.sin(pose.psi)
    to_world = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    dirs = pixel_rays(intr) @ (to_world @ extr.rotation.T).T  # world frame, scaled so t = camera depth
    origin = to_world @ extr.centre() + np.array([pose.x, pose.y, 0.0])
    world_to_cam = np.eye(4)
    world_to_cam[:3, :3] = extr.rotation @ to_world.T
    world_to_cam[:3, 3] = -world_to_cam[:3, :3] @ origin

    label = np.zeros((h, w), dtype=np.int64)  # 0 ground, 1 marking, 2 vehicle, 3 pedestrian
    with np.errstate(divide="ignore"):
        depth = np.where(dirs[..., 2] < 0, -origin[2] / dirs[..., 2], np.inf)
    for box, height, kind in _scene_boxes(world, origin, FAR + CAR_LENGTH):
        win = _box_window(box, height, world_to_cam, intr)
        if win is None:
            continue
        i0, i1, j0, j1 = win
        sub = dirs[i0:i1, j0:j1].reshape(-1, 3)
        t = _ray_box(origin, sub, box, height).reshape(i1 - i0, j1 - j0)
        d_view, l_view = depth[i0:i1, j0:j1], label[i0:i1, j0:j1]
        nearer = t < d_view
        d_view[nearer] = t[nearer]
        l_view[nearer] = 2 if kind == "vehicle" else 3
    depth[depth > FAR] = np.inf
    ground = np.isfinite(depth) & (label == 0)
    gx = origin[0] + depth[ground] * dirs[ground][:, 0]
    gy = origin[1] + depth[ground] * dirs[ground][:, 1]
    label[ground] = np.where(_is_marking(world.layout.kind, gx, gy), 1, 0)

    colours = np.stack([_colour(k) for k in ("ground", "marking", "vehicle", "pedestrian")])
    depth = np.where(np.isfinite(depth), np.round(depth * 1000.0) / 1000.0, 0.0)
    return CameraFrame(colours[label], depth, cam.name)


def render(world: WorldState, rig) -> list:
    rig = list(rig)
    if not rig:
        raise ValueError("render needs at least one camera")
    return [render_camera(world, cam) for cam in rig]


def to_uint8(image):
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """Binary P6 pixmap from an (H, W, 3) float [0, 1] or uint8 array."""
    img = image if image.dtype == np.uint8 else to_uint8(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    body = data[pos + 1:pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
