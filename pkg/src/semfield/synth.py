"""Synthetic RGB-D scene generator for end-to-end tests and demos.

The scene is a 1 m cube room (an open diorama) holding three axis-aligned
boxes that rest on the floor. The +y axis points down, so the floor is the
y = 1 plane and the boxes span y in [top, 1]. A camera ring circles the room
from outside and above, and a few top-down cameras look into it; rays that
miss every box land on the room's far walls, which are labelled "wall" so
the field learns a background everywhere air would otherwise be blank.

Each view is rendered with a ray/box slab test into a depth image plus a
region-id image, quantized to millimeters, and written out as an RGB-D frame
directory. Per (view, region) detections carry an orthonormal stand-in text
row per label and one image-embedding row per detection (the region's
orthonormal base vector), mirroring what a detector + image encoder would
emit. The result is packed with build_dataset and written as scene.sfd next
to a ground_truth.json describing the true region boxes.

Region boxes deliberately sit on multiples of 0.05 m (the default query
lattice spacing) and 0.05-0.10 m away from the walls: lattice points on a
face then count as inside the region, and the wall/floor supervision nearby
keeps similarity scores outside the boxes below the localization threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (DetectionRecord, EmbeddingTable, Frame, SceneDataset,
                      build_dataset, write_dataset, write_frame_dir)
from .errors import InvalidInputError
from .geometry import CameraIntrinsics, DepthImage, Pose

GROUND_TRUTH_NAME = "ground_truth.json"
DATASET_NAME = "scene.sfd"
FRAMES_DIR = "frames"

ROOM_LO = np.zeros(3)
ROOM_HI = np.ones(3)
WALL_LABEL = "wall"
WALL_COLOR = (120, 120, 120)


@dataclass(frozen=True)
class RegionSpec:
    label: str
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    color: tuple[int, int, int]

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, dtype=np.float64), np.asarray(self.hi, dtype=np.float64)
        if not np.all(lo < hi):
            raise InvalidInputError(f"region {self.label!r} has empty extent")
        if np.any(lo < ROOM_LO) or np.any(hi > ROOM_HI):
            raise InvalidInputError(f"region {self.label!r} leaves the unit room")


DEFAULT_REGIONS = (
    RegionSpec("red crate", (0.10, 0.60, 0.10), (0.35, 1.00, 0.40), (200, 60, 50)),
    RegionSpec("green bin", (0.65, 0.60, 0.10), (0.90, 1.00, 0.40), (40, 170, 90)),
    RegionSpec("blue drum", (0.40, 0.55, 0.60), (0.60, 1.00, 0.90), (60, 90, 210)),
)


@dataclass(frozen=True)
class SynthConfig:
    width: int = 96
    height: int = 72
    focal: float = 72.0
    n_ring: int = 8
    ring_radius: float = 2.2
    ring_heights: tuple[float, ...] = (0.0, -0.6)
    n_top: int = 4
    top_radius: float = 0.9
    top_height: float = -1.6
    look_target: tuple[float, float, float] = (0.5, 0.7, 0.5)
    text_dim: int = 32
    image_dim: int = 32
    seed: int = 0
    min_pixels: int = 20
    confidence_range: tuple[float, float] = (0.7, 0.95)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.focal <= 0:
            raise InvalidInputError("camera dimensions must be positive")
        if self.n_ring + self.n_top <= 0:
            raise InvalidInputError("need at least one view")
        lo, hi = self.confidence_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise InvalidInputError("confidence_range must be ordered within [0, 1]")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.width / 2.0,
                                self.height / 2.0, self.width, self.height)


def look_at(eye: np.ndarray, target: np.ndarray) -> Pose:
    """Camera-to-world pose looking from eye toward target, +y-down convention."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise InvalidInputError("look_at eye and target coincide")
    forward = forward / norm
    world_down = np.array([0.0, 1.0, 0.0])
    right = np.cross(world_down, forward)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        # Looking straight up/down: pick +x as the right vector.
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / rnorm
    true_down = np.cross(forward, right)
    rotation = np.stack([right, true_down, forward], axis=1)
    return Pose(rotation=rotation, translation=eye.copy())


def camera_poses(cfg: SynthConfig) -> list[Pose]:
    target = np.asarray(cfg.look_target, dtype=np.float64)
    poses = []
    for i in range(cfg.n_ring):
        theta = 2.0 * np.pi * i / cfg.n_ring
        eye = np.array([0.5 + cfg.ring_radius * np.cos(theta),
                        cfg.ring_heights[i % len(cfg.ring_heights)],
                        0.5 + cfg.ring_radius * np.sin(theta)])
        poses.append(look_at(eye, target))
    for i in range(cfg.n_top):
        theta = 2.0 * np.pi * (i + 0.5) / cfg.n_top
        eye = np.array([0.5 + cfg.top_radius * np.cos(theta),
                        cfg.top_height,
                        0.5 + cfg.top_radius * np.sin(theta)])
        poses.append(look_at(eye, target))
    return poses


def _slab_hits(origin, d_world, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / d_world
        t2 = (hi - origin) / d_world
    t_near = np.minimum(t1, t2).max(axis=-1)
    t_far = np.maximum(t1, t2).min(axis=-1)
    return t_near, t_far


def render_frame(k: CameraIntrinsics, pose: Pose, regions=DEFAULT_REGIONS):
    """Render one view: (depth meters, region ids, rgb).

    Region ids: 0..len(regions)-1 for boxes, len(regions) for the room shell
    (rays exit through the far walls of the open room), -1 for rays that miss
    the room entirely (depth 0 there).
    """
    us, vs = np.meshgrid(np.arange(k.width), np.arange(k.height))
    d_cam = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy,
                      np.ones_like(us, dtype=np.float64)], axis=-1)
    d_world = d_cam @ pose.rotation.T
    origin = pose.translation

    t_best = np.full((k.height, k.width), np.inf)
    id_best = np.full((k.height, k.width), -1, dtype=np.int16)
    for idx, region in enumerate(regions):
        t_near, t_far = _slab_hits(origin, d_world,
                                   np.asarray(region.lo), np.asarray(region.hi))
        hit = (t_far >= t_near) & (t_near > 1e-9) & (t_near < t_best)
        t_best = np.where(hit, t_near, t_best)
        id_best = np.where(hit, np.int16(idx), id_best)

    # Rays that pass through the room but hit no box land on the far walls.
    t_near, t_far = _slab_hits(origin, d_world, ROOM_LO, ROOM_HI)
    bg = (id_best < 0) & (t_far >= t_near) & (t_far > 1e-9)
    t_best = np.where(bg, t_far, t_best)
    id_best = np.where(bg, np.int16(len(regions)), id_best)

    # Depth is the camera-frame z; the ray parameter equals it because the
    # camera-space direction has unit z.
    depth = np.where(id_best >= 0, t_best, 0.0).astype(np.float32)
    palette = np.array([r.color for r in regions] + [WALL_COLOR, (0, 0, 0)],
                       dtype=np.uint8)
    rgb = palette[np.where(id_best >= 0, id_best, len(regions) + 1)]
    return depth, id_best, rgb


def orthonormal_rows(n_rows: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if n_rows > dim:
        raise InvalidInputError(f"cannot fit {n_rows} orthonormal rows in {dim} dims")
    q, _ = np.linalg.qr(rng.normal(size=(dim, n_rows)))
    return np.ascontiguousarray(q[:, :n_rows].T)


def generate_scene(out_dir, cfg: SynthConfig = SynthConfig(),
                   regions=DEFAULT_REGIONS):
    """Render, detect, pack, and write the synthetic scene.

    Writes <out_dir>/frames/<id>/ RGB-D frame dirs, <out_dir>/scene.sfd, and
    <out_dir>/ground_truth.json. Returns (dataset, ground_truth_dict).
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng([cfg.seed, 0x51C1])
    labels = [r.label for r in regions] + [WALL_LABEL]
    if len(set(labels)) != len(labels):
        raise InvalidInputError("region labels must be distinct")
    text = orthonormal_rows(len(labels), cfg.text_dim, rng).astype(np.float32)
    bases = orthonormal_rows(len(labels), cfg.image_dim, rng).astype(np.float32)

    k = cfg.intrinsics()
    frames, detections, image_rows, row_label_ids = [], [], [], []
    frames_dir = out_dir / FRAMES_DIR
    for i, pose in enumerate(camera_poses(cfg)):
        frame_id = f"{i:06d}"
        depth, ids, rgb = render_frame(k, pose, regions)
        depth_mm = np.round(depth * 1000.0).astype(np.uint16)
        depth_q = DepthImage.from_millimeters(depth_mm)
        write_frame_dir(frames_dir / frame_id, rgb, depth_mm, k, pose)
        frames.append(Frame(frame_id, depth_q, k, pose, rgb=rgb))
        for label_id in range(len(labels)):
            mask = ids == label_id
            if int(mask.sum()) < cfg.min_pixels:
                continue
            confidence = float(rng.uniform(*cfg.confidence_range))
            image_rows.append(bases[label_id])
            row_label_ids.append(label_id)
            detections.append(DetectionRecord(frame_id, labels[label_id], label_id,
                                              confidence, mask,
                                              len(image_rows) - 1))

    tables = EmbeddingTable(labels, text, np.stack(image_rows))
    ds = build_dataset(frames, detections, tables)
    write_dataset(ds, out_dir / DATASET_NAME)

    ground_truth = {
        "labels": labels,
        "background_label": WALL_LABEL,
        "regions": [{"label": r.label,
                     "lo": list(map(float, r.lo)),
                     "hi": list(map(float, r.hi))} for r in regions],
        "image_row_labels": row_label_ids,
        "record_count": len(ds),
        "n_views": cfg.n_ring + cfg.n_top,
        "text_dim": cfg.text_dim,
        "image_dim": cfg.image_dim,
        "seed": cfg.seed,
    }
    with open(out_dir / GROUND_TRUTH_NAME, "w", encoding="utf-8") as fh:
        json.dump(ground_truth, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return ds, ground_truth


def load_ground_truth(scene_dir) -> dict:
    with open(Path(scene_dir) / GROUND_TRUTH_NAME, encoding="utf-8") as fh:
        return json.load(fh)


def region_membership(points: np.ndarray, gt_regions, tol: float = 1e-6) -> np.ndarray:
    """Index of the first region containing each point, -1 for none.

    tol expands each box slightly so points placed exactly on a face by the
    query lattice are not lost to rounding.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.full(len(points), -1, dtype=np.int64)
    for idx, region in enumerate(gt_regions):
        lo = np.asarray(region["lo"], dtype=np.float64) - tol
        hi = np.asarray(region["hi"], dtype=np.float64) + tol
        inside = np.all((points >= lo) & (points <= hi), axis=1)
        out[inside & (out == -1)] = idx
    return out


def sample_region_points(gt_regions, per_region: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random points inside each true region box, with region ids."""
    if per_region <= 0:
        raise InvalidInputError("per_region must be positive")
    rng = np.random.default_rng([seed, 0xE7A1])
    points, ids = [], []
    for idx, region in enumerate(gt_regions):
        lo = np.asarray(region["lo"], dtype=np.float64)
        hi = np.asarray(region["hi"], dtype=np.float64)
        points.append(rng.uniform(lo, hi, size=(per_region, 3)))
        ids.append(np.full(per_region, idx, dtype=np.int64))
    return np.concatenate(points).astype(np.float32), np.concatenate(ids)
