"""Procedural ray-cast scenes with exact depth, pose, intrinsics and labels.

Each triplet is an independent static scene (ground, sky wall, boxes,
spheres) seen from three camera poses on a short constant-velocity path.
Colours are functions of the 3D hit point, so re-projecting a frame with the
true depth and pose reproduces its neighbour up to resampling error.

On-disk layout (all little-endian, no compression)::

    index.csv              one row per frame, three rows per triplet
    frames/<id>_<k>.ppm    binary PPM (P6), 8-bit RGB
    labels/<id>_<k>.pgm    binary PGM (P5), 8-bit class ids
    depth/<id>_<k>.dmap    "DMAP <H> <W>\\n" + float32 row-major
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, matrix_to_axis_angle

GROUND, SKY, BOX, BALL = 0, 1, 2, 3
CLASS_NAMES = ("ground", "sky", "box", "ball")
DEPTH_RANGE = (0.5, 80.0)
OFFSETS = (-1, 0, 1)
INDEX_FIELDS = ["triplet", "offset", "split", "image", "label", "depth",
                "fx", "fy", "cx", "cy", "rx", "ry", "rz", "tx", "ty", "tz"]


class DataFormatError(ValueError):
    """A dataset file is malformed."""


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    width: int = 128
    height: int = 96
    num_classes: int = 4
    boxes: tuple = (4, 7)
    balls: tuple = (3, 5)
    texture_frequency: float = 1.5
    speed: tuple = (1.0, 1.6)
    max_rotation: float = 0.02
    camera_height: float = 1.5
    sky_distance: float = 60.0
    focal_ratio: float = 0.78
    supersample: int = 3
    static: bool = False

    def intrinsics(self) -> Intrinsics:
        f = self.focal_ratio * self.width
        return Intrinsics(f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0)


@dataclass
class Triplet:
    frames: np.ndarray  # (3, 3, H, W) uint8 for offsets -1, 0, +1
    labels: np.ndarray  # (3, H, W) uint8
    depths: np.ndarray  # (3, H, W) float32
    poses: np.ndarray  # (3, 6) axis-angle + translation, centre camera -> frame k
    intrinsics: Intrinsics
    split: str = "train"

    @property
    def center(self) -> np.ndarray:
        return self.frames[1]


@dataclass
class Dataset:
    triplets: list[Triplet] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.triplets)

    def split(self, name: str) -> list[Triplet]:
        return [t for t in self.triplets if t.split == name]

    def arrays(self, name: str):
        """Stacked centre frames (N, 3, H, W) float64 and labels (N, H, W)."""
        items = self.split(name)
        if not items:
            return np.zeros((0, 3, 1, 1)), np.zeros((0, 1, 1), dtype=np.uint8)
        x = np.stack([t.center for t in items]).astype(np.float64)
        y = np.stack([t.labels[1] for t in items])
        return x, y


# -- rotations ---------------------------------------------------------------

def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _euler(yaw, pitch, roll):
    return _rot_y(yaw) @ _rot_x(pitch) @ _rot_z(roll)


# -- scene content -----------------------------------------------------------

@dataclass
class _Box:
    center: np.ndarray
    half: np.ndarray
    yaw: float
    color: np.ndarray
    phase: float


@dataclass
class _Ball:
    center: np.ndarray
    radius: float
    color: np.ndarray
    phase: float


@dataclass
class _Scene:
    boxes: list
    balls: list
    ground_phase: np.ndarray
    sky_phase: np.ndarray
    sky_distance: float
    freq: float


_BOX_COLORS = np.array([[0.80, 0.25, 0.20], [0.85, 0.55, 0.15], [0.75, 0.70, 0.20], [0.65, 0.30, 0.45]])
_BALL_COLORS = np.array([[0.20, 0.65, 0.30], [0.15, 0.45, 0.75], [0.45, 0.70, 0.65], [0.30, 0.55, 0.20]])
_LIGHT = np.array([0.35, -1.0, -0.45]) / np.linalg.norm([0.35, -1.0, -0.45])


def _make_scene(spec: SceneSpec, rng: np.random.Generator) -> _Scene:
    boxes = []
    for _ in range(rng.integers(spec.boxes[0], spec.boxes[1] + 1)):
        half = np.array([rng.uniform(0.4, 1.5), rng.uniform(0.5, 1.6), rng.uniform(0.4, 1.5)])
        side = rng.choice([-1.0, 1.0])
        x = side * rng.uniform(2.2, 7.0) if rng.random() < 0.8 else rng.uniform(-1.5, 1.5)
        z = rng.uniform(7.0, 40.0) if abs(x) > 2.0 else rng.uniform(16.0, 40.0)
        boxes.append(_Box(np.array([x, -half[1], z]), half, rng.uniform(-0.6, 0.6),
                          _BOX_COLORS[rng.integers(len(_BOX_COLORS))] * rng.uniform(0.85, 1.1),
                          rng.uniform(0, 2 * np.pi)))
    balls = []
    for _ in range(rng.integers(spec.balls[0], spec.balls[1] + 1)):
        r = rng.uniform(0.35, 1.1)
        x = rng.choice([-1.0, 1.0]) * rng.uniform(1.6, 5.5)
        balls.append(_Ball(np.array([x, -r, rng.uniform(6.0, 30.0)]), r,
                           _BALL_COLORS[rng.integers(len(_BALL_COLORS))] * rng.uniform(0.85, 1.1),
                           rng.uniform(0, 2 * np.pi)))
    return _Scene(boxes, balls, rng.uniform(0, 2 * np.pi, 4), rng.uniform(0, 2 * np.pi, 2),
                  spec.sky_distance, spec.texture_frequency)


def _ground_color(p, scene):
    f = scene.freq
    ph = scene.ground_phase
    x, z = p[:, 0], p[:, 2]
    tex = (0.22 * np.sin(2.3 * f * x + ph[0]) * np.sin(1.9 * f * z + ph[1])
           + 0.12 * np.sin(0.7 * f * (x + 2 * z) + ph[2])
           + 0.12 * np.sin(4.1 * f * (x - 0.5 * z) + ph[3]))
    base = np.array([0.46, 0.43, 0.40])
    return np.clip(base[None] * (1.0 + tex[:, None]) * 0.85, 0, 1)


def _sky_color(p, scene):
    elev = np.clip(-p[:, 1] / 30.0, 0, 1)
    cloud = 0.08 * np.sin(0.21 * p[:, 0] + scene.sky_phase[0]) * np.sin(0.33 * p[:, 1] + scene.sky_phase[1])
    low = np.array([0.75, 0.84, 0.93])
    high = np.array([0.40, 0.58, 0.88])
    col = low[None] * (1 - elev[:, None]) + high[None] * elev[:, None]
    return np.clip(col + cloud[:, None], 0, 1)


def _shade(normals):
    return 0.55 + 0.45 * np.clip(normals @ -_LIGHT, 0, None)


def _intersect(origin, dirs, scene):
    """Nearest hit per ray: returns t (camera z-depth), label, colour."""
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    label = np.full(n, SKY, dtype=np.uint8)
    color = np.zeros((n, 3))
    eps = 1e-6

    # sky wall z = sky_distance
    with np.errstate(divide="ignore", invalid="ignore"):
        t_sky = np.where(dirs[:, 2] > eps, (scene.sky_distance - origin[2]) / dirs[:, 2], np.inf)
    best_t = t_sky.copy()
    hit_kind = np.full(n, -1)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 1] > eps, (0.0 - origin[1]) / dirs[:, 1], np.inf)
    m = (t_ground > eps) & (t_ground < best_t)
    best_t = np.where(m, t_ground, best_t)
    hit_kind[m] = -2
    normals = np.zeros((n, 3))
    obj_color = np.zeros((n, 3))
    obj_phase = np.zeros(n)
    obj_local = np.zeros((n, 3))

    for box in scene.boxes:
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])  # local -> world
        o_l = rot.T @ (origin - box.center)
        d_l = dirs @ rot  # rows: rot.T @ d
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d_l
            t1 = (-box.half - o_l) * inv
            t2 = (box.half - o_l) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tnear = np.maximum(np.maximum(tmin[:, 0], tmin[:, 1]), tmin[:, 2])
        tfar = np.minimum(np.minimum(tmax[:, 0], tmax[:, 1]), tmax[:, 2])
        hit = (tnear <= tfar) & (tnear > eps) & (tnear < best_t)
        idx = np.flatnonzero(hit)
        if idx.size == 0:
            continue
        axis = np.argmax(tmin[idx], axis=1)
        best_t[idx] = tnear[idx]
        hit_kind[idx] = BOX
        nl = np.zeros((idx.size, 3))
        nl[np.arange(idx.size), axis] = -np.sign(d_l[idx, axis])
        normals[idx] = nl @ rot.T
        obj_color[idx] = box.color
        obj_phase[idx] = box.phase
        obj_local[idx] = o_l[None] + tnear[idx, None] * d_l[idx]

    for ball in scene.balls:
        oc = origin - ball.center
        a = (dirs * dirs).sum(1)
        b = 2 * dirs @ oc
        cc = oc @ oc - ball.radius ** 2
        disc = b * b - 4 * a * cc
        with np.errstate(invalid="ignore"):
            t = (-b - np.sqrt(disc)) / (2 * a)
        idx = np.flatnonzero((disc > 0) & (t > eps) & (t < best_t))
        if idx.size == 0:
            continue
        best_t[idx] = t[idx]
        hit_kind[idx] = BALL
        local = origin[None] - ball.center + t[idx, None] * dirs[idx]
        normals[idx] = local / ball.radius
        obj_color[idx] = ball.color
        obj_phase[idx] = ball.phase
        obj_local[idx] = local

    pts = origin[None] + best_t[:, None] * dirs
    sky = hit_kind == -1
    ground = hit_kind == -2
    box = hit_kind == BOX
    ball = hit_kind == BALL
    label[ground] = GROUND
    label[box] = BOX
    label[ball] = BALL
    if sky.any():
        color[sky] = _sky_color(pts[sky], scene)
    if ground.any():
        color[ground] = _ground_color(pts[ground], scene) * _shade(np.array([[0.0, -1.0, 0.0]]))[0]
    f = scene.freq
    if box.any():
        q = obj_local[box]
        stripes = 0.7 + 0.3 * np.sin(3.0 * f * (q[:, 0] + q[:, 1] + q[:, 2]) + obj_phase[box])
        color[box] = obj_color[box] * stripes[:, None] * _shade(normals[box])[:, None]
    if ball.any():
        q = obj_local[ball]
        spots = 0.75 + 0.25 * np.sin(5.0 * f * q[:, 0] + obj_phase[ball]) * np.sin(5.0 * f * q[:, 1])
        color[ball] = obj_color[ball] * spots[:, None] * _shade(normals[ball])[:, None]
    return best_t, label, np.clip(color, 0, 1)


def render_view(scene: _Scene, rot: np.ndarray, center: np.ndarray, spec: SceneSpec):
    """Render one camera (camera->world rotation ``rot``, position ``center``)."""
    h, w = spec.height, spec.width
    K = spec.intrinsics()
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    def rays(du, dv):
        d = np.stack([(xs.ravel() + du - K.cx) / K.fx, (ys.ravel() + dv - K.cy) / K.fy,
                      np.ones(h * w)], axis=1)
        return d @ rot.T

    t, label, _ = _intersect(center, rays(0.0, 0.0), scene)
    ss = spec.supersample
    offsets = (np.arange(ss) + 0.5) / ss - 0.5
    acc = np.zeros((h * w, 3))
    for dv in offsets:
        for du in offsets:
            acc += _intersect(center, rays(du, dv), scene)[2]
    color = acc / (ss * ss)
    image = np.round(color * 255.0).astype(np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return image, label.reshape(h, w), t.reshape(h, w).astype(np.float32)


def _relative_pose(rot_t, c_t, rot_o, c_o) -> np.ndarray:
    """Axis-angle + translation mapping camera-t points into the other camera."""
    r = rot_o.T @ rot_t
    tr = rot_o.T @ (c_t - c_o)
    return np.concatenate([matrix_to_axis_angle(r), tr])


def render_triplet(spec: SceneSpec, seed_seq, max_tries: int = 20) -> Triplet:
    """Render one triplet; camera paths that leave the depth range are re-drawn."""
    rng = np.random.default_rng(seed_seq)
    scene = _make_scene(spec, rng)
    for _ in range(max_tries):
        yaw = rng.uniform(-0.12, 0.12)
        rot_c = _euler(yaw, rng.uniform(-0.16, -0.10), rng.uniform(-0.02, 0.02))
        c_c = np.array([rng.uniform(-0.8, 0.8), -spec.camera_height + rng.uniform(-0.1, 0.1),
                        rng.uniform(-1.0, 1.0)])
        if spec.static:
            step_rot = np.eye(3)
            velocity = np.zeros(3)
        else:
            mr = spec.max_rotation
            step_rot = _euler(rng.uniform(-mr, mr), rng.uniform(-mr, mr) / 2, rng.uniform(-mr, mr) / 2)
            forward = rot_c @ np.array([rng.uniform(-0.1, 0.1), 0.0, 1.0])
            velocity = forward / np.linalg.norm(forward) * rng.uniform(*spec.speed)
        rots = [rot_c @ step_rot.T, rot_c, rot_c @ step_rot]
        centers = [c_c - velocity, c_c, c_c + velocity]
        views = [render_view(scene, r, c, spec) for r, c in zip(rots, centers)]
        depths = np.stack([v[2] for v in views])
        if np.isfinite(depths).all() and depths.min() >= DEPTH_RANGE[0] and depths.max() <= DEPTH_RANGE[1]:
            poses = np.stack([_relative_pose(rot_c, c_c, r, c) for r, c in zip(rots, centers)])
            poses[1] = 0.0
            return Triplet(np.stack([v[0] for v in views]), np.stack([v[1] for v in views]),
                           depths, poses, spec.intrinsics())
    raise RuntimeError("could not find a valid camera path for this scene")


def split_counts(n: int, ratios=(0.8, 0.1, 0.1)) -> dict[str, int]:
    """Floor rule: val and test get ``floor(n * ratio)``, train the rest."""
    n_val = int(math.floor(n * ratios[1]))
    n_test = int(math.floor(n * ratios[2]))
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def _render_job(args):
    spec, child = args
    return render_triplet(spec, child)


def generate(spec: SceneSpec, count: int, ratios=(0.8, 0.1, 0.1), jobs: int = 1) -> Dataset:
    """Render ``count`` triplets; output is independent of ``jobs``."""
    children = np.random.SeedSequence(spec.seed).spawn(count)
    work = [(spec, c) for c in children]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            triplets = list(pool.map(_render_job, work))
    else:
        triplets = [_render_job(w) for w in work]
    counts = split_counts(count, ratios)
    names = ["train"] * counts["train"] + ["val"] * counts["val"] + ["test"] * counts["test"]
    for t, name in zip(triplets, names):
        t.split = name
    return Dataset(triplets)


# -- file formats ------------------------------------------------------------

def _write_pnm(path: Path, magic: bytes, array: np.ndarray) -> None:
    h, w = array.shape[-2:]
    payload = array.transpose(1, 2, 0) if array.ndim == 3 else array
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(payload, dtype=np.uint8).tobytes())


def _read_pnm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated header at offset {pos}")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != magic:
        raise DataFormatError(f"{path}: expected {magic.decode()} magic at offset 0, got {tokens[0][:8]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-integer header field before offset {pos}") from exc
    if maxval != 255:
        raise DataFormatError(f"{path}: only 8-bit maxval 255 supported, got {maxval}")
    size = w * h * channels
    data = raw[pos:pos + size]
    if len(data) != size:
        raise DataFormatError(f"{path}: expected {size} payload bytes at offset {pos}, got {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(h, w).copy()
    return arr.reshape(h, w, channels).transpose(2, 0, 1).copy()


def write_ppm(path, image: np.ndarray) -> None:
    _write_pnm(Path(path), b"P6", image)


def read_ppm(path) -> np.ndarray:
    return _read_pnm(Path(path), b"P6", 3)


def write_pgm(path, labels: np.ndarray) -> None:
    _write_pnm(Path(path), b"P5", labels)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(Path(path), b"P5", 1)


def write_dmap(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(b"DMAP %d %d\n" % (h, w))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    parts = raw[:nl].split() if nl > 0 else []
    if len(parts) != 3 or parts[0] != b"DMAP":
        raise DataFormatError(f"{path}: malformed DMAP header at offset 0")
    try:
        h, w = int(parts[1]), int(parts[2])
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-integer DMAP dims at offset 0") from exc
    payload = raw[nl + 1:]
    if len(payload) != 4 * h * w:
        raise DataFormatError(f"{path}: expected {4 * h * w} payload bytes at offset {nl + 1}, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)


def write_dataset(dataset: Dataset, directory) -> Path:
    root = Path(directory)
    for sub in ("frames", "labels", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for i, trip in enumerate(dataset.triplets):
        for k, off in enumerate(OFFSETS):
            stem = f"{i:06d}_{k}"
            img, lab, dep = f"frames/{stem}.ppm", f"labels/{stem}.pgm", f"depth/{stem}.dmap"
            write_ppm(root / img, trip.frames[k])
            write_pgm(root / lab, trip.labels[k])
            write_dmap(root / dep, trip.depths[k])
            K = trip.intrinsics
            rows.append([i, off, trip.split, img, lab, dep, repr(K.fx), repr(K.fy), repr(K.cx), repr(K.cy)]
                        + [repr(float(v)) for v in trip.poses[k]])
    with open(root / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDEX_FIELDS)
        writer.writerows(rows)
    return root


def read_dataset(directory) -> Dataset:
    root = Path(directory)
    index = root / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"dataset index not found: {index}")
    with open(index, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INDEX_FIELDS:
            raise DataFormatError(f"{index}: unexpected columns {reader.fieldnames}")
        rows = list(reader)
    groups: dict[int, dict[int, dict]] = {}
    for line, row in enumerate(rows, start=2):
        try:
            groups.setdefault(int(row["triplet"]), {})[int(row["offset"])] = row
        except ValueError as exc:
            raise DataFormatError(f"{index}: bad triplet/offset on line {line}") from exc
    triplets = []
    for tid in sorted(groups):
        g = groups[tid]
        if sorted(g) != list(OFFSETS):
            raise DataFormatError(f"{index}: triplet {tid} lacks a preceding and succeeding frame")
        ordered = [g[o] for o in OFFSETS]
        r0 = ordered[1]
        K = Intrinsics(float(r0["fx"]), float(r0["fy"]), float(r0["cx"]), float(r0["cy"]))
        triplets.append(Triplet(
            frames=np.stack([read_ppm(root / r["image"]) for r in ordered]),
            labels=np.stack([read_pgm(root / r["label"]) for r in ordered]),
            depths=np.stack([read_dmap(root / r["depth"]) for r in ordered]),
            poses=np.array([[float(r[k]) for k in ("rx", "ry", "rz", "tx", "ty", "tz")] for r in ordered]),
            intrinsics=K, split=r0["split"]))
    return Dataset(triplets)


def with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, seed=seed)
