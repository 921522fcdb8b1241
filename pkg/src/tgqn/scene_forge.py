"""Procedural toy rooms and a flat-shaded numpy raycaster.

Room coordinates: the room is the cube ``[-h, h]^3`` with ``y`` pointing up,
floor at ``y = -h``. Cameras look along
``(cos(pitch) cos(yaw), sin(pitch), cos(pitch) sin(yaw))``.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("sphere", "box")

DEFAULT_PALETTE = (
    (0.90, 0.20, 0.20),
    (0.20, 0.75, 0.25),
    (0.20, 0.35, 0.90),
    (0.95, 0.85, 0.20),
    (0.85, 0.30, 0.85),
    (0.20, 0.85, 0.85),
    (0.95, 0.55, 0.15),
    (0.85, 0.85, 0.85),
)

MAGIC = b"TGQN"
FORMAT_VERSION = 1
POSE_DIM = 5


class SceneError(ValueError):
    """Invalid generator configuration or scene."""


class PlacementError(SceneError):
    """Objects could not be placed without touching a wall."""


@dataclass(frozen=True)
class GeneratorConfig:
    room_half_extent: float = 3.0
    max_objects: int = 3
    min_scale: float = 0.25
    max_scale: float = 0.6
    palette: tuple = DEFAULT_PALETTE
    max_retries: int = 100
    ring_radius: float = 2.4
    ring_height: float = -1.0
    ring_pitch: float = -0.5
    free_pitch_range: tuple = (-math.pi / 6, math.pi / 6)
    # free cameras keep this distance from every wall
    free_margin: float = 0.2
    fov_deg: float = 60.0
    ambient: float = 0.3
    lighting: bool = True

    def validate(self):
        if self.room_half_extent <= 0:
            raise SceneError("room_half_extent must be positive")
        if not self.palette:
            raise SceneError("palette must be nonempty")
        if self.max_objects < 1:
            raise SceneError("max_objects must be >= 1")
        if not 0 < self.min_scale <= self.max_scale:
            raise SceneError("need 0 < min_scale <= max_scale")
        if not 0 < self.ring_radius < self.room_half_extent:
            raise SceneError("ring_radius must lie inside the room")
        if not 0 <= self.free_margin < self.room_half_extent:
            raise SceneError("free_margin must be smaller than the room")


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    center: tuple
    scale: float
    color: tuple


@dataclass(frozen=True)
class SceneSpec:
    room_half_extent: float
    wall_color: tuple
    floor_color: tuple
    objects: tuple
    light_position: tuple
    seed: int = 0


@dataclass(frozen=True)
class PoseSpec:
    position: tuple
    yaw: float
    pitch: float

    def as_array(self) -> np.ndarray:
        return np.array([*self.position, self.yaw, self.pitch], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "PoseSpec":
        a = [float(v) for v in a]
        return cls(position=(a[0], a[1], a[2]), yaw=a[3], pitch=a[4])


@dataclass
class Episode:
    scene: SceneSpec
    frames: list = field(default_factory=list)
    poses: list = field(default_factory=list)


def wrap_angle(a: float) -> float:
    """Map an angle to ``[-pi, pi)``."""
    w = (a + math.pi) % (2 * math.pi) - math.pi
    # float rounding can land exactly on +pi
    return -math.pi if w >= math.pi else w


def _object_touches_wall(obj: ObjectSpec, h: float) -> bool:
    return any(abs(c) + obj.scale >= h for c in obj.center)


def _footprint(obj: ObjectSpec) -> float:
    # radius of the horizontal bounding circle
    return obj.scale * (math.sqrt(2) if obj.shape == "box" else 1.0)


def _objects_overlap(a: ObjectSpec, b: ObjectSpec) -> bool:
    d = math.hypot(a.center[0] - b.center[0], a.center[2] - b.center[2])
    return d < _footprint(a) + _footprint(b)


def check_scene(scene: SceneSpec, cfg: GeneratorConfig | None = None) -> list[str]:
    """Return a list of violated scene invariants (empty when valid)."""
    problems = []
    h = scene.room_half_extent
    if h <= 0:
        problems.append("room_half_extent must be positive")
    if cfg is not None and not 1 <= len(scene.objects) <= cfg.max_objects:
        problems.append(f"object count {len(scene.objects)} out of range")
    for i, obj in enumerate(scene.objects):
        if obj.shape not in SHAPES:
            problems.append(f"object {i}: unknown shape {obj.shape!r}")
        if any(abs(c) >= h for c in obj.center):
            problems.append(f"object {i}: center outside room")
        if _object_touches_wall(obj, h):
            problems.append(f"object {i}: intersects a wall")
        if cfg is not None and not cfg.min_scale <= obj.scale <= cfg.max_scale:
            problems.append(f"object {i}: scale {obj.scale} out of range")
    if any(abs(c) >= h for c in scene.light_position):
        problems.append("light outside room")
    return problems


def _color(rng: np.random.Generator, palette) -> tuple:
    return tuple(float(c) for c in palette[rng.integers(len(palette))])


def sample_scene(rng_seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> SceneSpec:
    cfg.validate()
    rng = np.random.default_rng(rng_seed)
    h = cfg.room_half_extent
    # walls are kept dull so that objects stand out
    wall = tuple(float(v) for v in rng.uniform(0.3, 0.7, size=3))
    floor = tuple(float(v) for v in rng.uniform(0.2, 0.6, size=3))
    n_objects = int(rng.integers(1, cfg.max_objects + 1))
    objects: list[ObjectSpec] = []
    for i in range(n_objects):
        for _ in range(cfg.max_retries):
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            scale = float(rng.uniform(cfg.min_scale, cfg.max_scale))
            # objects rest just above the floor
            lim = h - scale
            x, z = (float(v) for v in rng.uniform(-lim, lim, size=2))
            y = -h + scale * 1.001
            cand = ObjectSpec(shape, (x, y, z), scale, _color(rng, cfg.palette))
            if _object_touches_wall(cand, h):
                continue
            # keep the ring camera outside every object
            if math.hypot(x, z) + _footprint(cand) >= cfg.ring_radius - 0.1:
                continue
            if any(_objects_overlap(cand, o) for o in objects):
                continue
            objects.append(cand)
            break
        else:
            raise PlacementError(
                f"could not place object {i} after {cfg.max_retries} retries "
                f"(room_half_extent={h}, scale range=[{cfg.min_scale}, {cfg.max_scale}])"
            )
    light = (
        float(rng.uniform(-0.5 * h, 0.5 * h)),
        float(rng.uniform(0.5 * h, 0.8 * h)),
        float(rng.uniform(-0.5 * h, 0.5 * h)),
    )
    return SceneSpec(h, wall, floor, tuple(objects), light, int(rng_seed))


def sample_pose(
    rng_seed: int,
    scene: SceneSpec,
    camera_mode: str = "ring",
    cfg: GeneratorConfig = GeneratorConfig(),
) -> PoseSpec:
    if scene.room_half_extent <= 0:
        raise SceneError("invalid scene")
    rng = np.random.default_rng(rng_seed)
    h = scene.room_half_extent
    if camera_mode == "ring":
        if cfg.ring_radius >= h:
            raise SceneError("ring radius does not fit in the room")
        theta = float(rng.uniform(-math.pi, math.pi))
        x, z = cfg.ring_radius * math.cos(theta), cfg.ring_radius * math.sin(theta)
        yaw = wrap_angle(math.atan2(-z, -x))
        return PoseSpec((x, cfg.ring_height, z), yaw, cfg.ring_pitch)
    if camera_mode == "free":
        lim = h - cfg.free_margin
        pos = tuple(float(v) for v in rng.uniform(-lim, lim, size=3))
        yaw = wrap_angle(float(rng.uniform(-math.pi, math.pi)))
        lo, hi = cfg.free_pitch_range
        return PoseSpec(pos, yaw, float(rng.uniform(lo, hi)))
    raise SceneError(f"unknown camera_mode {camera_mode!r}")


# --------------------------------------------------------------------------
# ray casting


def camera_rays(pose: PoseSpec, image_size: int, fov_deg: float = 60.0):
    """Unit ray directions ``[H, W, 3]`` through pixel centers."""
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    cp, sp = math.cos(pose.pitch), math.sin(pose.pitch)
    forward = np.array([cp * cy, sp, cp * sy])
    right = np.array([-sy, 0.0, cy])
    up = np.cross(right, forward)
    half = math.tan(math.radians(fov_deg) / 2)
    s = (np.arange(image_size) + 0.5) / image_size * 2 - 1
    u = s[None, :] * half  # columns go right
    v = -s[:, None] * half  # rows go down
    d = forward + u[..., None] * right + v[..., None] * up
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def intersect_sphere(origins, dirs, center, radius):
    """Nearest positive hit distance for unit ``dirs``; ``inf`` on a miss."""
    oc = origins - np.asarray(center, dtype=np.float64)
    b = np.einsum("...i,...i", oc, dirs)
    c = np.einsum("...i,...i", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    return np.where(hit & (t > 1e-9), t, np.inf)


def intersect_box(origins, dirs, center, half_extent):
    """Slab test against an axis-aligned cube; ``inf`` on a miss."""
    lo = np.asarray(center, dtype=np.float64) - half_extent
    hi = np.asarray(center, dtype=np.float64) + half_extent
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    ta = np.nan_to_num(ta, nan=-np.inf)
    tb = np.nan_to_num(tb, nan=np.inf)
    tmin = np.minimum(ta, tb).max(axis=-1)
    tmax = np.maximum(ta, tb).min(axis=-1)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where((tmax >= tmin) & (t > 1e-9), t, np.inf)


def _box_normal(points, center):
    rel = points - np.asarray(center)
    axis = np.abs(rel).argmax(axis=-1)
    n = np.zeros_like(points)
    np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(rel, axis[..., None], -1)), -1)
    return n


def raycast(scene: SceneSpec, origin, dirs):
    """Cast rays from one origin.

    Returns ``(t, hit_id, normal)`` where ``hit_id`` is the object index or
    ``-1`` for walls/ceiling and ``-2`` for the floor.
    """
    origin = np.asarray(origin, dtype=np.float64)
    origins = np.broadcast_to(origin, dirs.shape)
    h = scene.room_half_extent
    # interior of the room: exit distance along each axis
    with np.errstate(divide="ignore"):
        t_axis = np.where(dirs > 0, (h - origins) / dirs, np.where(dirs < 0, (-h - origins) / dirs, np.inf))
    axis = t_axis.argmin(axis=-1)
    t = np.take_along_axis(t_axis, axis[..., None], -1)[..., 0]
    normal = np.zeros_like(dirs)
    np.put_along_axis(normal, axis[..., None], -np.sign(np.take_along_axis(dirs, axis[..., None], -1)), -1)
    hit_id = np.where((axis == 1) & (dirs[..., 1] < 0), -2, -1)

    for i, obj in enumerate(scene.objects):
        if obj.shape == "sphere":
            t_obj = intersect_sphere(origins, dirs, obj.center, obj.scale)
        else:
            t_obj = intersect_box(origins, dirs, obj.center, obj.scale)
        closer = t_obj < t
        if not closer.any():
            continue
        t = np.where(closer, t_obj, t)
        hit_id = np.where(closer, i, hit_id)
        p = origins + t_obj[..., None] * dirs
        if obj.shape == "sphere":
            n_obj = (p - np.asarray(obj.center)) / obj.scale
        else:
            n_obj = _box_normal(p, obj.center)
        normal = np.where(closer[..., None], n_obj, normal)
    return t, hit_id, normal


def render_view(
    scene: SceneSpec,
    pose: PoseSpec,
    image_size: int = 32,
    cfg: GeneratorConfig = GeneratorConfig(),
) -> np.ndarray:
    """Render a ``[H, W, 3]`` float64 frame with values in ``[0, 1]``."""
    dirs = camera_rays(pose, image_size, cfg.fov_deg)
    origin = np.asarray(pose.position, dtype=np.float64)
    t, hit_id, normal = raycast(scene, origin, dirs)

    albedo = np.empty(dirs.shape)
    albedo[...] = scene.wall_color
    albedo[hit_id == -2] = scene.floor_color
    for i, obj in enumerate(scene.objects):
        albedo[hit_id == i] = obj.color

    if not cfg.lighting:
        return np.clip(albedo, 0.0, 1.0)
    p = origin + t[..., None] * dirs
    to_light = np.asarray(scene.light_position) - p
    to_light /= np.linalg.norm(to_light, axis=-1, keepdims=True)
    lambert = np.clip(np.einsum("...i,...i", normal, to_light), 0.0, None)
    shade = cfg.ambient + (1 - cfg.ambient) * lambert
    return np.clip(albedo * shade[..., None], 0.0, 1.0)


def make_episode(
    seed: int,
    views_per_scene: int = 10,
    camera_mode: str = "ring",
    image_size: int = 32,
    cfg: GeneratorConfig = GeneratorConfig(),
) -> Episode:
    ss = np.random.SeedSequence(seed)
    scene_seed, *view_seeds = (int(s.generate_state(1)[0]) for s in ss.spawn(views_per_scene + 1))
    scene = sample_scene(scene_seed, cfg)
    ep = Episode(scene)
    for vs in view_seeds:
        pose = sample_pose(vs, scene, camera_mode, cfg)
        ep.poses.append(pose)
        ep.frames.append(render_view(scene, pose, image_size, cfg))
    return ep


# --------------------------------------------------------------------------
# shard files


@dataclass
class Shard:
    header: dict
    poses: np.ndarray  # float32 [S, V, 5]
    images: np.ndarray  # uint8 [S, V, H, W, 3]

    @property
    def num_scenes(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]


def quantize(frame: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.asarray(frame)).astype(np.uint8)


def _format_header(header: dict) -> bytes:
    return "".join(f"{k}={header[k]}\n" for k in sorted(header)).encode("utf-8")


def _parse_header(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    for key in ("image_size", "views_per_scene", "num_scenes", "seed"):
        if key in out:
            out[key] = int(out[key])
    return out


def write_shard(path, poses: np.ndarray, images: np.ndarray, *, camera_mode: str, seed: int) -> Path:
    path = Path(path)
    poses = np.asarray(poses, dtype="<f4")
    images = np.asarray(images, dtype=np.uint8)
    n, v, hh, ww, ch = images.shape
    if hh != ww or ch != 3 or poses.shape != (n, v, POSE_DIM):
        raise SceneError(f"inconsistent shard arrays: poses {poses.shape}, images {images.shape}")
    header = _format_header(
        dict(image_size=hh, views_per_scene=v, num_scenes=n, camera_mode=camera_mode, seed=seed)
    )
    buf = io.BytesIO()
    buf.write(MAGIC + bytes([FORMAT_VERSION]))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for i in range(n):
        buf.write(poses[i].tobytes())
        buf.write(images[i].tobytes())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(buf.getvalue())
    except OSError as e:
        raise OSError(f"failed to write shard {path}: {e}") from e
    return path


def read_shard(path) -> Shard:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"failed to read shard {path}: {e}") from e
    if data[:4] != MAGIC:
        raise SceneError(f"{path}: not a shard file (bad magic)")
    if data[4] != FORMAT_VERSION:
        raise SceneError(f"{path}: unsupported shard version {data[4]}")
    (hlen,) = struct.unpack_from("<I", data, 5)
    header = _parse_header(data[9 : 9 + hlen].decode("utf-8"))
    n, v, s = header["num_scenes"], header["views_per_scene"], header["image_size"]
    pose_bytes = v * POSE_DIM * 4
    img_bytes = v * s * s * 3
    offset = 9 + hlen
    if len(data) != offset + n * (pose_bytes + img_bytes):
        raise SceneError(f"{path}: truncated or oversized shard ({len(data)} bytes)")
    poses = np.empty((n, v, POSE_DIM), dtype="<f4")
    images = np.empty((n, v, s, s, 3), dtype=np.uint8)
    for i in range(n):
        poses[i] = np.frombuffer(data, "<f4", v * POSE_DIM, offset).reshape(v, POSE_DIM)
        offset += pose_bytes
        images[i] = np.frombuffer(data, np.uint8, img_bytes, offset).reshape(v, s, s, 3)
        offset += img_bytes
    return Shard(header, poses, images)


def generate_dataset(
    num_scenes: int,
    views_per_scene: int,
    camera_mode: str,
    seed: int,
    out_path,
    image_size: int = 32,
    cfg: GeneratorConfig = GeneratorConfig(),
) -> Path:
    scene_seeds = np.random.SeedSequence(seed).generate_state(num_scenes, dtype=np.uint64)
    poses = np.empty((num_scenes, views_per_scene, POSE_DIM), dtype=np.float32)
    images = np.empty((num_scenes, views_per_scene, image_size, image_size, 3), dtype=np.uint8)
    for i, s in enumerate(scene_seeds):
        ep = make_episode(int(s), views_per_scene, camera_mode, image_size, cfg)
        poses[i] = np.stack([p.as_array() for p in ep.poses])
        images[i] = np.stack([quantize(f) for f in ep.frames])
    return write_shard(out_path, poses, images, camera_mode=camera_mode, seed=seed)
