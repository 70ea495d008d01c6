"""Camera projection and axis-aligned box geometry."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DegenerateBoxError, UnsupportedRotationError

MIN_DEPTH = 1e-6


def _wrap_angle(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class CameraProjection:
    """3x4 matrix taking homogeneous sensor-frame points to homogeneous pixels."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValueError(f"projection must be 3x4, got {m.shape}")
        if not np.all(np.isfinite(m)) or np.linalg.det(m[:, :3]) <= 0:
            raise ValueError("projection left 3x3 block must be finite with positive determinant")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def from_list(cls, values):
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 4))

    def to_list(self):
        return [float(x) for x in self.m.reshape(-1)]

    def __eq__(self, other):
        return isinstance(other, CameraProjection) and np.array_equal(self.m, other.m)

    def __hash__(self):
        return hash(self.m.tobytes())


def pinhole(focal, cu, cv, rotation=None, translation=(0.0, 0.0, 0.0)):
    """K [R | t] with K = [[f,0,cu],[0,f,cv],[0,0,1]]."""
    K = np.array([[focal, 0.0, cu], [0.0, focal, cv], [0.0, 0.0, 1.0]])
    R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    Rt = np.hstack([R, np.asarray(translation, dtype=np.float64).reshape(3, 1)])
    return CameraProjection(K @ Rt)


# LiDAR frame (x forward, y left, z up) -> camera frame (x right, y down, z forward)
LIDAR_TO_CAMERA = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple
    yaw: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        size = tuple(float(s) for s in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("Box3D needs 3-element center and size")
        if min(size) <= 0:
            raise ValueError(f"Box3D size must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", _wrap_angle(float(self.yaw)))
        object.__setattr__(self, "class_id", int(self.class_id))

    @property
    def minimum(self):
        return np.array(self.center) - np.array(self.size) / 2

    @property
    def maximum(self):
        return np.array(self.center) + np.array(self.size) / 2

    def corners(self):
        """The 8 corners as an [8, 3] array."""
        l, w, h = self.size
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        local = signs * np.array([l, w, h]) / 2
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return local @ rot.T + np.array(self.center)

    def contains(self, pts):
        """Closed containment test for [n, 3] points; requires yaw = 0."""
        _require_axis_aligned(self)
        pts = np.atleast_2d(pts)
        return np.all((pts >= self.minimum) & (pts <= self.maximum), axis=1)

    def to_dict(self):
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw,
                "class_id": self.class_id}

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["size"], d.get("yaw", 0.0), d.get("class_id", 0))


@dataclass(frozen=True)
class Box2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    class_id: int = 0

    def __post_init__(self):
        for f in ("u_min", "v_min", "u_max", "v_max"):
            object.__setattr__(self, f, float(getattr(self, f)))
        object.__setattr__(self, "class_id", int(self.class_id))
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise DegenerateBoxError(f"empty 2D box {self.as_array().tolist()}")

    @property
    def area(self):
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)

    def as_array(self):
        return np.array([self.u_min, self.v_min, self.u_max, self.v_max])

    def dilate(self, px):
        return Box2D(self.u_min - px, self.v_min - px, self.u_max + px, self.v_max + px, self.class_id)

    def contains(self, u, v):
        u, v = np.asarray(u), np.asarray(v)
        return (u >= self.u_min) & (u <= self.u_max) & (v >= self.v_min) & (v <= self.v_max)

    def to_dict(self):
        return {"box": self.as_array().tolist(), "class_id": self.class_id}

    @classmethod
    def from_dict(cls, d):
        return cls(*d["box"], class_id=d.get("class_id", 0))


def project_points(proj, pts):
    """Vectorised projection of [n, 3] points; returns (u, v, depth) arrays.

    No behind-camera check; callers mask on ``depth``.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    hom = pts @ proj.m[:, :3].T + proj.m[:, 3]
    depth = hom[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = hom[:, 0] / depth
        v = hom[:, 1] / depth
    return u, v, depth


def project_point(proj, p):
    u, v, d = project_points(proj, [p])
    if d[0] <= MIN_DEPTH:
        raise BehindCameraError(f"point {tuple(p)} has depth {d[0]:.3g}")
    return float(u[0]), float(v[0]), float(d[0])


def project_box3d(proj, box, image_size):
    """Axis-aligned hull of the in-front corners, clipped to [0,W] x [0,H].

    ``image_size`` is (H, W).
    """
    H, W = image_size
    u, v, d = project_points(proj, box.corners())
    front = d > MIN_DEPTH
    if not front.any():
        raise BehindCameraError("all box corners are behind the camera")
    u, v = u[front], v[front]
    u0, u1 = max(u.min(), 0.0), min(u.max(), float(W))
    v0, v1 = max(v.min(), 0.0), min(v.max(), float(H))
    if not (u0 < u1 and v0 < v1):
        raise DegenerateBoxError("projected box is empty after clipping")
    return Box2D(u0, v0, u1, v1, box.class_id)


def _require_axis_aligned(*boxes):
    for b in boxes:
        if isinstance(b, Box3D) and b.yaw != 0.0:
            raise UnsupportedRotationError(f"axis-aligned geometry needs yaw = 0, got {b.yaw}")


def _overlap(amin, amax, bmin, bmax):
    return np.clip(np.minimum(amax, bmax) - np.maximum(amin, bmin), 0.0, None)


def iou_axis_aligned(a, b):
    """IoU of two Box2D or two yaw-free Box3D."""
    if isinstance(a, Box2D) and isinstance(b, Box2D):
        aa, bb = a.as_array(), b.as_array()
        inter = np.prod(_overlap(aa[:2], aa[2:], bb[:2], bb[2:]))
        union = a.area + b.area - inter
    elif isinstance(a, Box3D) and isinstance(b, Box3D):
        _require_axis_aligned(a, b)
        inter = np.prod(_overlap(a.minimum, a.maximum, b.minimum, b.maximum))
        union = np.prod(a.size) + np.prod(b.size) - inter
    else:
        raise TypeError("iou needs two Box2D or two Box3D")
    return float(inter / union) if union > 0 else 0.0


def iou_bev(a, b):
    """IoU of the xy footprints of two yaw-free Box3D."""
    _require_axis_aligned(a, b)
    inter = np.prod(_overlap(a.minimum[:2], a.maximum[:2], b.minimum[:2], b.maximum[:2]))
    union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter
    return float(inter / union) if union > 0 else 0.0
