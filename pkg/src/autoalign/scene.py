"""
Deterministic paired LiDAR + camera scene synthesis.

Scenes place yaw-free cuboids of two classes on a ground plane.  The large
class ("car") returns many LiDAR points; the small class ("pedestrian")
suffers heavy dropout.  Ped-sized clutter clusters appear in the point cloud
only, so the camera is the one sensor that tells them apart from real
pedestrians.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import PlacementError, SceneParseError
from .geometry import (
    LIDAR_TO_CAMERA, Box2D, Box3D, CameraProjection, iou_bev, pinhole, project_box3d,
    project_points,
)

PRNG_NAME = "numpy.random.Generator(PCG64)"


@dataclass
class ObjectClass:
    name: str
    size_low: tuple
    size_high: tuple
    color: tuple
    dropout: float
    intensity: float


def _default_classes():
    return [
        ObjectClass("car", (3.6, 1.6, 1.4), (4.6, 2.0, 1.7), (0.15, 0.3, 0.85), 0.1, 0.7),
        ObjectClass("pedestrian", (0.9, 0.9, 1.6), (1.2, 1.2, 1.9), (0.9, 0.25, 0.1), 0.75, 0.35),
    ]


@dataclass
class SceneConfig:
    image_size: tuple = (128, 192)
    focal: float = 96.0
    horizon_frac: float = 0.4
    lidar_range: tuple = ((0.0, 32.0), (-16.0, 16.0), (-2.0, 2.0))
    ground_z: float = -1.6
    object_count: tuple = (1, 4)
    class_priors: tuple = (0.5, 0.5)
    classes: list = field(default_factory=_default_classes)
    clutter_count: tuple = (0, 3)
    ground_points: int = 500
    point_budget: int = 6000
    surface_density: float = 40.0
    min_points: int = 4
    spawn_x: tuple = (6.0, 30.0)
    max_retries: int = 200
    texture_amplitude: float = 0.15

    def __post_init__(self):
        self.image_size = tuple(int(x) for x in self.image_size)
        self.lidar_range = tuple(tuple(float(v) for v in r) for r in self.lidar_range)
        self.object_count = tuple(int(x) for x in self.object_count)
        self.clutter_count = tuple(int(x) for x in self.clutter_count)
        self.class_priors = tuple(float(p) for p in self.class_priors)
        self.spawn_x = tuple(float(x) for x in self.spawn_x)
        self.classes = [c if isinstance(c, ObjectClass) else ObjectClass(**c) for c in self.classes]
        for c in self.classes:
            c.size_low, c.size_high, c.color = tuple(c.size_low), tuple(c.size_high), tuple(c.color)
        self.validate()

    def validate(self):
        if min(self.image_size) <= 0 or self.focal <= 0 or self.point_budget <= 0:
            raise ValueError("image size, focal length and point budget must be positive")
        if any(hi <= lo for lo, hi in self.lidar_range):
            raise ValueError("lidar_range needs max > min on every axis")
        if len(self.class_priors) != len(self.classes) or abs(sum(self.class_priors) - 1) > 1e-9:
            raise ValueError("class priors must match the class list and sum to 1")
        if not 0 <= self.object_count[0] <= self.object_count[1]:
            raise ValueError("object_count must be an ordered non-negative range")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def projection(self):
        H, W = self.image_size
        return pinhole(self.focal, W / 2.0, H * self.horizon_frac, rotation=LIDAR_TO_CAMERA)

    @property
    def num_classes(self):
        return len(self.classes)


@dataclass(eq=False)
class Scene:
    points: np.ndarray          # [N, 4] float32: x, y, z, intensity
    image: np.ndarray           # [3, H, W] float64 in [0, 1], multiples of 1/255
    gt_boxes3d: list
    gt_boxes2d: list
    projection: CameraProjection
    seed: int
    config: SceneConfig
    prng: str = PRNG_NAME
    labels: np.ndarray = None   # per point: object index, -1 ground, -2 clutter (not persisted)

    @property
    def image_size(self):
        return self.image.shape[1:]

    def equals(self, other):
        return (np.array_equal(self.points, other.points) and np.array_equal(self.image, other.image)
                and self.gt_boxes3d == other.gt_boxes3d and self.gt_boxes2d == other.gt_boxes2d
                and self.projection == other.projection and self.seed == other.seed
                and self.config.to_dict() == other.config.to_dict())


# ---------------------------------------------------------------------------
# generation


def _visible_faces(box):
    """(origin corner, edge a, edge b) for faces facing the sensor at the origin."""
    lo, hi = box.minimum, box.maximum
    size = hi - lo
    faces = []
    for axis in range(3):
        for side, normal_sign in ((lo, -1.0), (hi, 1.0)):
            face_center = (lo + hi) / 2
            face_center[axis] = side[axis]
            if normal_sign * face_center[axis] >= 0:
                continue
            a_ax, b_ax = [i for i in range(3) if i != axis]
            corner = lo.copy()
            corner[axis] = side[axis]
            ea, eb = np.zeros(3), np.zeros(3)
            ea[a_ax], eb[b_ax] = size[a_ax], size[b_ax]
            faces.append((corner, ea, eb))
    return faces


def _surface_points(rng, box, cls, cfg, min_points):
    dist = max(float(np.linalg.norm(box.center[:2])), 1.0)
    chunks = []
    for corner, ea, eb in _visible_faces(box):
        area = float(np.linalg.norm(ea) * np.linalg.norm(eb))
        n = rng.poisson(cfg.surface_density * area * (10.0 / dist) ** 2)
        st = rng.random((n, 2))
        chunks.append(corner + st[:, :1] * ea + st[:, 1:] * eb)
    pts = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    keep = rng.random(len(pts)) >= cls.dropout
    kept = pts[keep]
    if len(kept) < min_points:
        corner, ea, eb = _visible_faces(box)[0]
        st = rng.random((min_points - len(kept), 2))
        kept = np.concatenate([kept, corner + st[:, :1] * ea + st[:, 1:] * eb])
    kept = kept + rng.normal(0.0, 0.02, kept.shape)
    kept = np.clip(kept, box.minimum, box.maximum)
    inten = np.clip(cls.intensity + rng.normal(0.0, 0.05, (len(kept), 1)), 0.0, 1.0)
    return np.hstack([kept, inten])


def _fully_visible(proj, box, cfg):
    H, W = cfg.image_size
    u, v, d = project_points(proj, box.corners())
    (x0, x1), (y0, y1), (z0, z1) = cfg.lidar_range
    lo, hi = box.minimum, box.maximum
    inside_range = lo[0] >= x0 and hi[0] <= x1 and lo[1] >= y0 and hi[1] <= y1 and hi[2] <= z1
    return (inside_range and np.all(d > 1.0) and np.all(u >= 1) and np.all(u <= W - 1)
            and np.all(v >= 1) and np.all(v <= H - 1))


def _place(rng, cfg, proj, cls_id, taken):
    cls = cfg.classes[cls_id]
    for _ in range(cfg.max_retries):
        size = rng.uniform(cls.size_low, cls.size_high)
        x = rng.uniform(*cfg.spawn_x)
        half_fov = cfg.image_size[1] / 2.0 / cfg.focal
        y = rng.uniform(-0.9 * half_fov * x, 0.9 * half_fov * x)
        box = Box3D((x, y, cfg.ground_z + size[2] / 2), size, 0.0, cls_id)
        if not _fully_visible(proj, box, cfg):
            continue
        padded = Box3D(box.center, np.array(box.size) + 1.0)
        if any(iou_bev(padded, t) > 0 for t in taken):
            continue
        return box
    raise PlacementError(f"could not place a {cls.name} without overlap after {cfg.max_retries} tries")


def _hull(pts):
    pts = sorted(map(tuple, pts))

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and ((out[-1][0] - out[-2][0]) * (p[1] - out[-2][1])
                                     - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])) <= 0:
                out.pop()
            out.append(p)
        return out

    lower, upper = half(pts), half(reversed(pts))
    return np.array(lower[:-1] + upper[:-1])


def _fill_polygon_mask(poly, H, W):
    """Pixel-centre inside test against a counter-clockwise convex polygon."""
    uu, vv = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    mask = np.ones((H, W), dtype=bool)
    for i in range(len(poly)):
        (x0, y0), (x1, y1) = poly[i], poly[(i + 1) % len(poly)]
        mask &= (x1 - x0) * (vv - y0) - (y1 - y0) * (uu - x0) >= 0
    return mask


def _column_code(W):
    """Fixed (3, W) colour offset that differs for every image column.

    Red and blue trace one full circle across the width, so the pair identifies
    the column; green adds a faster ripple.  The same pattern appears in every
    scene, which lets an image network tell where in the frame it is looking.
    """
    t = 2 * np.pi * (np.arange(W) + 0.5) / W
    return np.stack([np.sin(t), 0.5 * np.sin(3 * t), np.cos(t)])


def _render(rng, cfg, proj, boxes):
    H, W = cfg.image_size
    horizon = H * cfg.horizon_frac
    rows = (np.arange(H) + 0.5)[:, None]
    sky = np.array([0.55, 0.7, 0.9])[:, None, None] + 0.15 * (rows / horizon)[None]
    ground_t = np.clip((rows - horizon) / (H - horizon), 0, 1)[None]
    ground = np.array([0.42, 0.4, 0.36])[:, None, None] - 0.12 * ground_t
    img = np.where(rows[None] < horizon, sky, ground) * np.ones((3, H, W))
    img += cfg.texture_amplitude * _column_code(W)[:, None, :]
    img += rng.normal(0.0, 0.04, (3, H, W))
    order = sorted(range(len(boxes)), key=lambda i: -np.linalg.norm(boxes[i].center))
    for i in order:
        box = boxes[i]
        u, v, _ = project_points(proj, box.corners())
        mask = _fill_polygon_mask(_hull(np.stack([u, v], 1)), H, W)
        color = np.array(cfg.classes[box.class_id].color) * rng.uniform(0.8, 1.2)
        shade = color[:, None] + rng.normal(0.0, 0.03, (3, int(mask.sum())))
        img[:, mask] = shade
    q = np.clip(np.round(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8)
    return q.astype(np.float64) / 255.0


def generate_scene(seed, cfg=None):
    """Build one scene as a pure function of (seed, cfg)."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    proj = cfg.projection()
    n_obj = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    boxes = []
    for _ in range(n_obj):
        cls_id = int(rng.choice(len(cfg.classes), p=cfg.class_priors))
        boxes.append(_place(rng, cfg, proj, cls_id, boxes))
    clutter = []
    small = min(range(cfg.num_classes), key=lambda c: np.prod(cfg.classes[c].size_high))
    for _ in range(int(rng.integers(cfg.clutter_count[0], cfg.clutter_count[1] + 1))):
        try:
            clutter.append(_place(rng, cfg, proj, small, boxes + clutter))
        except PlacementError:
            break

    chunks, labels = [], []
    for i, b in enumerate(boxes):
        pts = _surface_points(rng, b, cfg.classes[b.class_id], cfg, cfg.min_points)
        chunks.append(pts)
        labels.append(np.full(len(pts), i))
    for b in clutter:
        pts = _surface_points(rng, b, cfg.classes[small], cfg, cfg.min_points)
        chunks.append(pts)
        labels.append(np.full(len(pts), -2))
    budget = max(cfg.point_budget - sum(len(c) for c in chunks), 0)
    n_ground = min(cfg.ground_points, budget)
    (x0, x1), (y0, y1), _ = cfg.lidar_range
    gxy = np.column_stack([rng.uniform(max(x0, 2.0), x1, n_ground), rng.uniform(y0, y1, n_ground)])
    gz = cfg.ground_z + np.abs(rng.normal(0.0, 0.03, (n_ground, 1)))
    gi = np.clip(0.1 + rng.normal(0.0, 0.03, (n_ground, 1)), 0, 1)
    chunks.append(np.hstack([gxy, gz, gi]))
    labels.append(np.full(n_ground, -1))

    image = _render(rng, cfg, proj, boxes)
    points = np.concatenate(chunks).astype(np.float32)
    boxes2d = [project_box3d(proj, b, cfg.image_size) for b in boxes]
    return Scene(points, image, boxes, boxes2d, proj, int(seed), cfg, labels=np.concatenate(labels))


def scene_seed(dataset_seed, index):
    return int(np.random.SeedSequence([int(dataset_seed), int(index)]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# persistence


def _write_ppm(path, image):
    c, H, W = image.shape
    q = np.round(image * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode())
        fh.write(q.tobytes())


def _read_ppm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise SceneParseError("image.ppm", "expected binary P6 with maxval 255")
    W, H = int(parts[1]), int(parts[2])
    body = parts[4]
    if len(body) != H * W * 3:
        raise SceneParseError("image.ppm", f"expected {H * W * 3} pixel bytes, found {len(body)}")
    q = np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3).transpose(2, 0, 1)
    return q.astype(np.float64) / 255.0


def save_scene(scene, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "seed": scene.seed,
        "prng": scene.prng,
        "config_hash": scene.config.config_hash(),
        "config": scene.config.to_dict(),
        "image_size": list(scene.image_size),
        "projection": scene.projection.to_list(),
        "boxes3d": [b.to_dict() for b in scene.gt_boxes3d],
        "boxes2d": [b.to_dict() for b in scene.gt_boxes2d],
        "num_points": int(len(scene.points)),
    }
    (d / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    (d / "points.f32").write_bytes(np.ascontiguousarray(scene.points, dtype="<f4").tobytes())
    _write_ppm(d / "image.ppm", scene.image)


def _field(meta, key):
    if key not in meta:
        raise SceneParseError(key, "missing")
    return meta[key]


def load_scene(directory):
    d = Path(directory)
    try:
        meta = json.loads((d / "scene.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneParseError("scene.json", str(exc)) from None
    try:
        cfg = SceneConfig.from_dict(_field(meta, "config"))
    except (TypeError, ValueError) as exc:
        raise SceneParseError("config", str(exc)) from None
    try:
        proj = CameraProjection.from_list(_field(meta, "projection"))
    except (TypeError, ValueError) as exc:
        raise SceneParseError("projection", str(exc)) from None
    try:
        boxes3d = [Box3D.from_dict(b) for b in _field(meta, "boxes3d")]
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneParseError("boxes3d", str(exc)) from None
    try:
        boxes2d = [Box2D.from_dict(b) for b in _field(meta, "boxes2d")]
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneParseError("boxes2d", str(exc)) from None
    n = int(_field(meta, "num_points"))
    raw = (d / "points.f32").read_bytes() if (d / "points.f32").exists() else b""
    if len(raw) != n * 16:
        raise SceneParseError("points.f32", f"expected {n * 16} bytes for {n} points, found {len(raw)}")
    points = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(n, 4)
    image = _read_ppm(d / "image.ppm")
    if list(image.shape[1:]) != list(_field(meta, "image_size")):
        raise SceneParseError("image_size", f"{meta['image_size']} disagrees with image.ppm {image.shape[1:]}")
    return Scene(points, image, boxes3d, boxes2d, proj, int(_field(meta, "seed")), cfg,
                 prng=meta.get("prng", PRNG_NAME))


# ---------------------------------------------------------------------------
# datasets


def generate_dataset(out_dir, num_scenes, seed, cfg=None, eval_fraction=0.25):
    """Write ``num_scenes`` scene directories plus ``manifest.json``."""
    cfg = cfg or SceneConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(num_scenes):
        name = f"scene_{i:05d}"
        save_scene(generate_scene(scene_seed(seed, i), cfg), out / name)
        names.append(name)
    n_eval = int(round(num_scenes * eval_fraction)) if num_scenes > 1 else 0
    manifest = {
        "seed": int(seed),
        "prng": PRNG_NAME,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "scenes": names,
        "splits": {"train": names[: num_scenes - n_eval], "eval": names[num_scenes - n_eval:]},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


class Dataset:
    """Lazy, cached view over a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            self.manifest = json.loads((self.root / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SceneParseError("manifest.json", str(exc)) from None
        self._cache = {}

    @property
    def config(self):
        return SceneConfig.from_dict(self.manifest["config"])

    def split(self, name):
        return list(self.manifest["splits"][name])

    def scene(self, name):
        if name not in self._cache:
            self._cache[name] = load_scene(self.root / name)
        return self._cache[name]

    def __len__(self):
        return len(self.manifest["scenes"])


def tree_digest(root):
    """sha256 over relative paths and file bytes, for determinism checks."""
    h = hashlib.sha256()
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fn in sorted(filenames):
            p = Path(dirpath) / fn
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
