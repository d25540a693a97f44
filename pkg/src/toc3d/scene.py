"""Synthetic multi-view driving scenes.

Generates constant-velocity object tracks around a moving ego vehicle, a
surround camera rig, projected boxes, CenterNet-style Gaussian heatmaps on
the token lattice, simulated history queries and per-patch scene features
from which image tokens are synthesized.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import make_rng

logger = logging.getLogger(__name__)

SCENE_MAGIC = b"TOC3D-SCENE v1\n"

# (length, width, height) in meters per class id
CLASS_SIZES = {
    0: (4.5, 1.9, 1.6),  # car
    1: (8.0, 2.6, 3.2),  # truck
    2: (0.7, 0.7, 1.8),  # pedestrian
    3: (1.8, 0.7, 1.5),  # cyclist
}
N_CLASSES = len(CLASS_SIZES)


# ---------------------------------------------------------------------------
# rigid transforms


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def make_pose(rotation: np.ndarray, translation) -> np.ndarray:
    pose = np.eye(4)
    pose[:3, :3] = rotation
    pose[:3, 3] = translation
    return pose


def invert_rigid(pose: np.ndarray) -> np.ndarray:
    r = pose[:3, :3]
    return make_pose(r.T, -r.T @ pose[:3, 3])


def is_rigid(m: np.ndarray, tol: float = 1e-8) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4):
        return False
    r = m[:3, :3]
    return (
        np.allclose(r.T @ r, np.eye(3), atol=tol)
        and abs(np.linalg.det(r) - 1.0) <= tol
        and np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=tol)
    )


# ---------------------------------------------------------------------------
# domain types


@dataclass
class SceneObject:
    center: np.ndarray
    size: np.ndarray
    velocity: np.ndarray
    class_id: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.size = np.asarray(self.size, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError(f"object size must be strictly positive, got {self.size}")

    def corners(self) -> np.ndarray:
        """8 x 3 axis-aligned box corners in the object's frame of reference."""
        half = self.size / 2
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return self.center + signs * half

    def transformed(self, pose: np.ndarray) -> "SceneObject":
        r = pose[:3, :3]
        return SceneObject(r @ self.center + pose[:3, 3], self.size, r @ self.velocity, self.class_id)


@dataclass
class CameraRig:
    intrinsics: np.ndarray  # (V, 3, 3)
    extrinsics: np.ndarray  # (V, 4, 4) ego -> camera
    image_size: tuple[int, int]  # (H, W)

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=float).reshape(-1, 3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=float).reshape(-1, 4, 4)
        if len(self.intrinsics) != len(self.extrinsics):
            raise ValueError("intrinsics and extrinsics disagree on the view count")
        for k in self.intrinsics:
            if abs(np.linalg.det(k)) < 1e-12:
                raise ValueError("camera intrinsics must be invertible")
        for e in self.extrinsics:
            if not is_rigid(e):
                raise ValueError("camera extrinsics must be rigid transforms")
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    @property
    def n_views(self) -> int:
        return len(self.intrinsics)

    @classmethod
    def surround(
        cls,
        n_views: int = 6,
        image_size: tuple[int, int] = (64, 160),
        hfov_deg: float = 70.0,
        height: float = 1.6,
    ) -> "CameraRig":
        """Evenly spaced horizontal cameras looking outward from the ego origin."""
        h, w = image_size
        f = (w / 2) / math.tan(math.radians(hfov_deg) / 2)
        k = np.array([[f, 0.0, w / 2], [0.0, f, h / 2], [0.0, 0.0, 1.0]])
        intr, extr = [], []
        for v in range(n_views):
            yaw = 2 * math.pi * v / n_views
            fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
            right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
            down = np.array([0.0, 0.0, -1.0])
            r = np.stack([right, down, fwd])
            extr.append(make_pose(r, -r @ np.array([0.0, 0.0, height])))
            intr.append(k.copy())
        return cls(np.stack(intr), np.stack(extr), image_size)

    def lattice_shape(self, patch: int) -> tuple[int, int]:
        h, w = self.image_size
        if h % patch or w % patch:
            raise ValueError(f"patch {patch} does not divide image size {self.image_size}")
        return h // patch, w // patch

    def n_tokens(self, patch: int) -> int:
        gh, gw = self.lattice_shape(patch)
        return self.n_views * gh * gw

    def to_camera(self, points: np.ndarray, view: int) -> np.ndarray:
        e = self.extrinsics[view]
        return points @ e[:3, :3].T + e[:3, 3]

    def pixel_to_ego(self, u: float, v: float, depth: float, view: int) -> np.ndarray:
        """Back-project a pixel at camera-frame depth ``depth`` into the ego frame."""
        ray = np.linalg.solve(self.intrinsics[view], np.array([u, v, 1.0]))
        p_cam = ray * depth
        return invert_rigid(self.extrinsics[view])[:3, :] @ np.append(p_cam, 1.0)


def lattice_provenance(n_views: int, grid_h: int, grid_w: int) -> np.ndarray:
    """(N, 3) array of (view, row, col), view-major then row-major order."""
    v, r, c = np.meshgrid(np.arange(n_views), np.arange(grid_h), np.arange(grid_w), indexing="ij")
    return np.stack([v.ravel(), r.ravel(), c.ravel()], axis=1)


@dataclass
class Frame:
    index: int
    timestamp: float
    ego_pose: np.ndarray  # world <- ego
    world_objects: list[SceneObject] = field(default_factory=list)

    @property
    def objects(self) -> list[SceneObject]:
        """Objects expressed in this frame's ego coordinates."""
        to_ego = invert_rigid(self.ego_pose)
        return [o.transformed(to_ego) for o in self.world_objects]


@dataclass
class SceneSequence:
    frames: list[Frame]
    dt: float
    v_max: float

    @property
    def horizon(self) -> float:
        return self.dt * (len(self.frames) - 1)


@dataclass
class HistoryQuerySet:
    contents: np.ndarray  # (N, C_q)
    refpoints: np.ndarray  # (N, 4) homogeneous
    velocities: np.ndarray  # (N, 3)
    confidences: np.ndarray  # (N,)
    dt: np.ndarray  # (N,) seconds, per query
    ego_transform: np.ndarray  # (4, 4) history ego -> current ego
    is_foreground: np.ndarray | None = None  # simulator bookkeeping only

    def __post_init__(self):
        self.contents = np.asarray(self.contents, dtype=float)
        self.refpoints = np.asarray(self.refpoints, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        self.confidences = np.asarray(self.confidences, dtype=float).reshape(-1)
        n = len(self.contents)
        self.dt = np.broadcast_to(np.asarray(self.dt, dtype=float), (n,)).copy()
        self.ego_transform = np.asarray(self.ego_transform, dtype=float)
        if self.refpoints.shape != (n, 4) or self.velocities.shape != (n, 3) or self.confidences.shape != (n,):
            raise ValueError("history query fields disagree on the query count")
        if n and not np.allclose(self.refpoints[:, 3], 1.0):
            raise ValueError("refpoints must be homogeneous with last component 1")
        if np.any((self.confidences < 0) | (self.confidences > 1)):
            raise ValueError("confidences must lie in [0, 1]")
        if not is_rigid(self.ego_transform):
            raise ValueError("ego_transform must be a rigid SE(3) matrix")

    def __len__(self) -> int:
        return len(self.contents)

    @property
    def query_dim(self) -> int:
        return self.contents.shape[1]

    def take(self, idx) -> "HistoryQuerySet":
        idx = np.asarray(idx, dtype=int)
        fg = None if self.is_foreground is None else self.is_foreground[idx]
        return HistoryQuerySet(
            self.contents[idx], self.refpoints[idx], self.velocities[idx],
            self.confidences[idx], self.dt[idx], self.ego_transform, fg,
        )


@dataclass
class Projection:
    center_px: np.ndarray  # (u, v)
    extent_px: np.ndarray  # (width, height)
    depth: float
    class_id: int = 0


@dataclass
class HeatmapTarget:
    grid: np.ndarray  # (V, H/p, W/p)

    @property
    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1)


# ---------------------------------------------------------------------------
# generation


def generate_sequence(
    seed: int,
    n_objects: int,
    n_frames: int,
    rig: CameraRig | None = None,
    dt: float = 0.5,
    v_max: float = 10.0,
    radius: tuple[float, float] = (5.0, 35.0),
) -> SceneSequence:
    """Constant-velocity objects around an ego car on a smooth random path."""
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    rng = make_rng(seed)

    objects = []
    for _ in range(n_objects):
        cls_id = int(rng.integers(N_CLASSES))
        size = np.array(CLASS_SIZES[cls_id]) * rng.uniform(0.9, 1.1, size=3)
        r = rng.uniform(*radius)
        ang = rng.uniform(0, 2 * math.pi)
        center = np.array([r * math.cos(ang), r * math.sin(ang), size[2] / 2])
        if rng.random() < 0.4:
            vel = np.zeros(3)
        else:
            cap = v_max if cls_id < 2 else min(v_max, 2.5)
            speed = rng.uniform(0.0, cap)
            head = rng.uniform(0, 2 * math.pi)
            vel = np.array([speed * math.cos(head), speed * math.sin(head), 0.0])
        objects.append(SceneObject(center, size, vel, cls_id))

    speed = rng.uniform(0.0, 8.0)
    yaw = rng.uniform(-math.pi, math.pi)
    yaw_rate = rng.normal(0.0, 0.05)
    pos = np.zeros(3)
    frames = []
    for i in range(n_frames):
        t = i * dt
        world = [SceneObject(o.center + o.velocity * t, o.size, o.velocity, o.class_id) for o in objects]
        frames.append(Frame(i, t, make_pose(yaw_rotation(yaw), pos.copy()), world))
        pos = pos + speed * dt * np.array([math.cos(yaw), math.sin(yaw), 0.0])
        yaw = yaw + yaw_rate * dt
        yaw_rate = 0.9 * yaw_rate + rng.normal(0.0, 0.02)
    return SceneSequence(frames, dt, v_max)


def project_boxes(objects: list[SceneObject], view: int, rig: CameraRig, min_depth: float = 0.1) -> list[Projection]:
    """Pinhole projection of box centers and extents; objects off-image are dropped."""
    if not 0 <= view < rig.n_views:
        raise IndexError(f"view {view} out of range for a {rig.n_views}-view rig")
    h, w = rig.image_size
    k = rig.intrinsics[view]
    out = []
    for obj in objects:
        c = rig.to_camera(obj.center[None], view)[0]
        if c[2] <= min_depth:
            continue
        uvw = k @ c
        u, v = uvw[0] / uvw[2], uvw[1] / uvw[2]
        if not (0 <= u < w and 0 <= v < h):
            continue
        corners = rig.to_camera(obj.corners(), view)
        corners = corners[corners[:, 2] > min_depth]
        pc = corners @ k.T
        pc = pc[:, :2] / pc[:, 2:3]
        extent = pc.max(axis=0) - pc.min(axis=0)
        out.append(Projection(np.array([u, v]), extent, float(c[2]), obj.class_id))
    return out


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """CornerNet radius so that a shifted box keeps IoU >= min_overlap."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1**2 - 4 * a1 * c1)) / 2

    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2**2 - 4 * a2 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def _splat_params(p: Projection, patch: int) -> tuple[int, int, float]:
    row = int(p.center_px[1] // patch)
    col = int(p.center_px[0] // patch)
    r = max(0.0, gaussian_radius(p.extent_px[1] / patch, p.extent_px[0] / patch))
    sigma = (2 * r + 1) / 6
    return row, col, sigma


def render_gaussian_targets(projections: list[list[Projection]], rig: CameraRig, patch: int) -> HeatmapTarget:
    """Per-view Gaussian splats on the token lattice, combined by max."""
    gh, gw = rig.lattice_shape(patch)
    if len(projections) != rig.n_views:
        raise ValueError(f"expected projections for {rig.n_views} views, got {len(projections)}")
    grid = np.zeros((rig.n_views, gh, gw))
    rows = np.arange(gh)[:, None]
    cols = np.arange(gw)[None, :]
    for v, projs in enumerate(projections):
        for p in projs:
            row, col, sigma = _splat_params(p, patch)
            g = np.exp(-((rows - row) ** 2 + (cols - col) ** 2) / (2 * sigma**2))
            g[row, col] = 1.0
            np.maximum(grid[v], g, out=grid[v])
    return HeatmapTarget(grid)


def simulate_history_queries(
    prev: Frame,
    current: Frame,
    n_total: int,
    noise: float,
    seed: int,
    query_dim: int = 256,
    v_noise: float = 0.3,
    extent: float = 40.0,
) -> HistoryQuerySet:
    """Stand-in for last frame's decoder outputs.

    One confident query per object in ``prev`` (refpoint = center + noise, in
    the previous ego frame) and low-confidence background queries elsewhere;
    rows are shuffled so confidence, not position, identifies the foreground.
    """
    objs = prev.objects
    if n_total < len(objs):
        raise ValueError(f"n_total={n_total} is smaller than the {len(objs)} foreground objects")
    rng = make_rng(seed)
    n_fg, n_bg = len(objs), n_total - len(objs)

    ref = np.ones((n_total, 4))
    vel = np.zeros((n_total, 3))
    if n_fg:
        ref[:n_fg, :3] = np.stack([o.center for o in objs]) + rng.normal(0.0, noise, size=(n_fg, 3))
        vel[:n_fg] = np.stack([o.velocity for o in objs]) + rng.normal(0.0, v_noise, size=(n_fg, 3)) * [1, 1, 0]
    ref[n_fg:, 0] = rng.uniform(-extent, extent, n_bg)
    ref[n_fg:, 1] = rng.uniform(-extent, extent, n_bg)
    ref[n_fg:, 2] = rng.uniform(0.0, 3.0, n_bg)
    vel[n_fg:, :2] = rng.normal(0.0, 0.5, size=(n_bg, 2))
    conf = np.concatenate([rng.beta(8, 2, n_fg), rng.beta(2, 8, n_bg)])
    contents = rng.normal(size=(n_total, query_dim))
    contents /= np.linalg.norm(contents, axis=1, keepdims=True)
    fg = np.arange(n_total) < n_fg

    perm = rng.permutation(n_total)
    ego = invert_rigid(current.ego_pose) @ prev.ego_pose
    dt = current.timestamp - prev.timestamp
    return HistoryQuerySet(contents[perm], ref[perm], vel[perm], conf[perm], np.full(n_total, dt), ego, fg[perm])


# ---------------------------------------------------------------------------
# token synthesis


def patch_features(projections: list[list[Projection]], rig: CameraRig, patch: int) -> np.ndarray:
    """Per-patch scene descriptors, (N, d) in lattice order.

    Columns: box coverage, center proximity, inverse depth, class mix
    (one column per class), then lattice position and view identity.
    """
    gh, gw = rig.lattice_shape(patch)
    prov = lattice_provenance(rig.n_views, gh, gw)
    n = len(prov)
    cov = np.zeros(n)
    ctr = np.zeros(n)
    inv_depth = np.zeros(n)
    cls = np.zeros((n, N_CLASSES))
    x0 = prov[:, 2] * patch
    y0 = prov[:, 1] * patch
    cx, cy = x0 + patch / 2, y0 + patch / 2
    for v, projs in enumerate(projections):
        sel = prov[:, 0] == v
        for p in projs:
            bw, bh = max(p.extent_px[0], 1.0), max(p.extent_px[1], 1.0)
            bx0, bx1 = p.center_px[0] - bw / 2, p.center_px[0] + bw / 2
            by0, by1 = p.center_px[1] - bh / 2, p.center_px[1] + bh / 2
            ox = np.clip(np.minimum(x0 + patch, bx1) - np.maximum(x0, bx0), 0, None)
            oy = np.clip(np.minimum(y0 + patch, by1) - np.maximum(y0, by0), 0, None)
            c = np.sqrt(ox * oy / patch**2) * sel
            scale = 0.5 * max(math.sqrt(bw * bh), patch)
            d2 = ((cx - p.center_px[0]) ** 2 + (cy - p.center_px[1]) ** 2) / scale**2
            k = np.exp(-0.5 * d2) * sel
            nearer = c > cov
            inv_depth[nearer] = 1.0 / max(p.depth, 1.0)
            cls[nearer] = 0.0
            cls[nearer, p.class_id] = 1.0
            np.maximum(cov, c, out=cov)
            np.maximum(ctr, k, out=ctr)
    inv_depth *= cov
    cls *= cov[:, None]
    pos = np.stack(
        [
            np.sin(np.pi * (prov[:, 1] + 0.5) / gh),
            np.cos(np.pi * (prov[:, 1] + 0.5) / gh),
            np.sin(np.pi * (prov[:, 2] + 0.5) / gw),
            np.cos(np.pi * (prov[:, 2] + 0.5) / gw),
        ],
        axis=1,
    )
    views = np.eye(rig.n_views)[prov[:, 0]]
    return np.column_stack([cov, ctr, 5.0 * inv_depth, cls, pos, views])


def synthesize_tokens(features: np.ndarray, dim: int, seed: int, noise: float = 0.1) -> np.ndarray:
    """Fixed random projection of patch features plus Gaussian clutter.

    The projection depends only on ``(seed, features.shape[1], dim)``, so all
    frames sharing a seed live in the same token space.
    """
    rng = make_rng(seed)
    proj = rng.normal(0.0, 1.0 / math.sqrt(features.shape[1]), size=(features.shape[1], dim))
    clutter = make_rng(hash_seed(seed, features)).normal(0.0, noise, size=(len(features), dim))
    return features @ proj + clutter


def hash_seed(seed: int, arr: np.ndarray) -> int:
    # deterministic per-frame noise stream derived from the content
    h = np.frombuffer(np.ascontiguousarray(arr, dtype=np.float64).tobytes(), dtype=np.uint64)
    return int((int(seed) * 1_000_003 + int(np.bitwise_xor.reduce(h) if h.size else 0)) % (2**63))


# ---------------------------------------------------------------------------
# records and dataset IO


@dataclass
class SceneRecord:
    """Everything needed to score one current frame."""

    frame: Frame
    queries: HistoryQuerySet
    target: HeatmapTarget
    features: np.ndarray
    projections: list[list[Projection]] = field(default_factory=list)

    def tokens(self, dim: int, seed: int = 0, noise: float = 0.1) -> np.ndarray:
        return synthesize_tokens(self.features, dim, seed, noise)


def make_record(prev: Frame, current: Frame, rig: CameraRig, patch: int, n_queries: int, noise: float, seed: int, query_dim: int = 256) -> SceneRecord:
    objs = current.objects
    projs = [project_boxes(objs, v, rig) for v in range(rig.n_views)]
    target = render_gaussian_targets(projs, rig, patch)
    queries = simulate_history_queries(prev, current, n_queries, noise, seed, query_dim)
    return SceneRecord(current, queries, target, patch_features(projs, rig, patch), projs)


def build_dataset(
    seed: int,
    n_records: int,
    rig: CameraRig,
    patch: int = 16,
    n_objects: int = 12,
    n_queries: int = 256,
    noise: float = 0.5,
    query_dim: int = 256,
    dt: float = 0.5,
    v_max: float = 10.0,
) -> list[SceneRecord]:
    """Independent two-frame sequences; the second frame of each is scored."""
    children = np.random.SeedSequence(seed).spawn(n_records)
    records = []
    for child in children:
        s_seq, s_q = (int(x) for x in child.generate_state(2))
        seq = generate_sequence(s_seq, n_objects, 2, rig, dt=dt, v_max=v_max)
        records.append(make_record(seq.frames[0], seq.frames[1], rig, patch, n_queries, noise, s_q, query_dim))
    return records


def _objects_array(objs: list[SceneObject]) -> np.ndarray:
    if not objs:
        return np.zeros((0, 10))
    return np.stack([np.concatenate([o.center, o.size, o.velocity, [o.class_id]]) for o in objs])


def save_record(record: SceneRecord, path) -> None:
    path = Path(path)
    q = record.queries
    meta = {"index": record.frame.index, "timestamp": record.frame.timestamp}
    buf = io.BytesIO()
    np.savez(
        buf,
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        ego_pose=record.frame.ego_pose,
        objects=_objects_array(record.frame.world_objects),
        q_contents=q.contents,
        q_refpoints=q.refpoints,
        q_velocities=q.velocities,
        q_confidences=q.confidences,
        q_dt=q.dt,
        q_ego=q.ego_transform,
        q_fg=np.zeros(len(q), bool) if q.is_foreground is None else q.is_foreground,
        target=record.target.grid,
        features=record.features,
    )
    try:
        with open(path, "wb") as fh:
            fh.write(SCENE_MAGIC)
            fh.write(buf.getvalue())
    except OSError as exc:
        raise OSError(f"failed to write scene record {path}: {exc}") from exc


def load_record(path, rig: CameraRig | None = None) -> SceneRecord:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(SCENE_MAGIC):
        raise ValueError(f"{path} is not a TOC3D-SCENE v1 record")
    z = np.load(io.BytesIO(raw[len(SCENE_MAGIC):]))
    meta = json.loads(z["meta"].tobytes().decode())
    objs = [SceneObject(r[0:3], r[3:6], r[6:9], int(r[9])) for r in z["objects"]]
    frame = Frame(meta["index"], meta["timestamp"], z["ego_pose"], objs)
    q = HistoryQuerySet(
        z["q_contents"], z["q_refpoints"], z["q_velocities"], z["q_confidences"],
        z["q_dt"], z["q_ego"], z["q_fg"],
    )
    projs = []
    if rig is not None:
        projs = [project_boxes(frame.objects, v, rig) for v in range(rig.n_views)]
    return SceneRecord(frame, q, HeatmapTarget(z["target"]), z["features"], projs)


def dump_dataset(records: list[SceneRecord], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, rec in enumerate(records):
        p = directory / f"frame_{i:05d}.toc3d"
        save_record(rec, p)
        paths.append(p)
    logger.info("wrote %d scene records to %s", len(paths), directory)
    return paths


def load_dataset(directory, rig: CameraRig | None = None) -> list[SceneRecord]:
    paths = sorted(Path(directory).glob("frame_*.toc3d"))
    return [load_record(p, rig) for p in paths]
