"""Training-set construction from posed RGB-D frames plus detections.

Each detection contributes one record per masked pixel with valid depth:
the pixel back-projected to world coordinates, the detection's label id,
confidence, image-embedding id, and the camera-to-point distance.  The
same physical point seen from several frames yields several records; that
duplication is intentional and carries the multi-view signal.

On-disk formats (all little-endian regardless of host byte order):

.sfd dataset file:
    magic "SFD1" | version u32
    L u32 | M u32 | n u32 | m u32 | record count u64 | AABB 6 x f32
    L label strings (u32 byte length + UTF-8)
    text table L x n f32 | image table M x m f32
    records, 28 bytes each: x f32, y f32, z f32, label_id u32,
    confidence f32, image_emb_id u32, distance f32

.sfe embedding-tables file (the same table block standing alone, so
detection tools can emit tables without building a dataset):
    magic "SFE1" | version u32
    L u32 | M u32 | n u32 | m u32
    L label strings | text table L x n f32 | image table M x m f32

Frame directory (one subdirectory per frame):
    rgb.png    color image (any lossless raster Pillow can read)
    depth.png  16-bit grayscale, integer millimeters, 0 = no measurement
    frame.json {"intrinsics": {fx, fy, cx, cy, width, height},
                "pose": row-major 4x4 camera-to-world matrix}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np
from PIL import Image

from semfield._binio import F32LE, Reader, Writer
from semfield.errors import EmptyDatasetError, FormatError, InvalidInputError
from semfield.geometry import CameraIntrinsics, DepthImage, Point3, Pose

MAGIC = b"SFD1"
TABLES_MAGIC = b"SFE1"
VERSION = 1

# Detections weaker than this waste batch slots on near-zero loss weights.
DEFAULT_MIN_CONFIDENCE = 0.05

# Fraction of the tight AABB extent added on each side of each axis.
AABB_MARGIN = 0.01

RGB_NAME = "rgb.png"
DEPTH_NAME = "depth.png"
META_NAME = "frame.json"

RECORD_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("label_id", "<u4"),
        ("confidence", "<f4"),
        ("image_emb_id", "<u4"),
        ("distance", "<f4"),
    ]
)
assert RECORD_DTYPE.itemsize == 28


@dataclass(frozen=True)
class Frame:
    """One posed RGB-D capture."""

    frame_id: str
    depth: DepthImage
    intrinsics: CameraIntrinsics
    pose: Pose
    rgb: np.ndarray | None = None  # (H, W, 3) uint8, unused by build_dataset

    def __post_init__(self):
        h, w = self.depth.values.shape
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise InvalidInputError(
                f"frame {self.frame_id!r}: depth is {w}x{h} but intrinsics "
                f"say {self.intrinsics.width}x{self.intrinsics.height}"
            )
        if self.rgb is not None and self.rgb.shape[:2] != (h, w):
            raise InvalidInputError(f"frame {self.frame_id!r}: rgb/depth size mismatch")


@dataclass(frozen=True)
class DetectionRecord:
    """One detector hit in one frame."""

    frame_id: str
    label: str
    label_id: int
    confidence: float
    mask: np.ndarray  # (H, W) bool over the frame's pixels
    image_emb_id: int

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise InvalidInputError(f"confidence {self.confidence} outside [0, 1]")
        if self.mask.ndim != 2:
            raise InvalidInputError("detection mask must be 2-D")
        if self.mask.dtype != np.bool_:
            object.__setattr__(self, "mask", self.mask.astype(bool))
        if self.label_id < 0 or self.image_emb_id < 0:
            raise InvalidInputError("embedding ids must be non-negative")


@dataclass
class EmbeddingTable:
    """Label strings with their text rows, plus per-detection image rows."""

    labels: list[str]
    text: np.ndarray  # (L, n) float32
    image: np.ndarray  # (M, m) float32

    def __post_init__(self):
        self.text = np.ascontiguousarray(self.text, dtype=np.float32)
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        if self.text.ndim != 2 or self.image.ndim != 2:
            raise InvalidInputError("embedding tables must be 2-D")
        if len(self.labels) != self.text.shape[0]:
            raise InvalidInputError(
                f"{len(self.labels)} labels but {self.text.shape[0]} text rows"
            )
        for name, table in (("text", self.text), ("image", self.image)):
            if table.size and not np.all(np.isfinite(table)):
                raise InvalidInputError(f"non-finite row in {name} embedding table")

    @property
    def text_dim(self) -> int:
        return self.text.shape[1]

    @property
    def image_dim(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class PointRecord:
    """Single-record view; bulk storage lives in SceneDataset's arrays."""

    position: Point3
    label_id: int
    confidence: float
    image_emb_id: int
    distance: float


@dataclass
class SceneDataset:
    """Parallel record arrays plus the tables they index into."""

    positions: np.ndarray  # (N, 3) float32, world meters
    label_ids: np.ndarray  # (N,) uint32
    confidences: np.ndarray  # (N,) float32
    image_emb_ids: np.ndarray  # (N,) uint32
    distances: np.ndarray  # (N,) float32, camera-to-point meters
    tables: EmbeddingTable
    aabb: np.ndarray  # (2, 3) float32, [min corner; max corner]

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        self.label_ids = np.ascontiguousarray(self.label_ids, dtype=np.uint32)
        self.confidences = np.ascontiguousarray(self.confidences, dtype=np.float32)
        self.image_emb_ids = np.ascontiguousarray(self.image_emb_ids, dtype=np.uint32)
        self.distances = np.ascontiguousarray(self.distances, dtype=np.float32)
        self.aabb = np.ascontiguousarray(self.aabb, dtype=np.float32).reshape(2, 3)
        n = len(self.positions)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise InvalidInputError("positions must be (N, 3)")
        for name in ("label_ids", "confidences", "image_emb_ids", "distances"):
            if len(getattr(self, name)) != n:
                raise InvalidInputError(f"{name} length does not match positions")
        if n:
            if np.any(self.positions < self.aabb[0]) or np.any(self.positions > self.aabb[1]):
                raise InvalidInputError("record position outside dataset bounding box")
            if int(self.label_ids.max()) >= len(self.tables.labels):
                raise InvalidInputError("label id out of range of text table")
            if int(self.image_emb_ids.max()) >= self.tables.image.shape[0]:
                raise InvalidInputError("image embedding id out of range of image table")
            if np.any(self.distances <= 0) or not np.all(np.isfinite(self.distances)):
                raise InvalidInputError("distances must be finite and positive")
            if np.any(self.confidences < 0) or np.any(self.confidences > 1):
                raise InvalidInputError("confidences must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)

    def record(self, i: int) -> PointRecord:
        return PointRecord(
            position=Point3.from_array(self.positions[i]),
            label_id=int(self.label_ids[i]),
            confidence=float(self.confidences[i]),
            image_emb_id=int(self.image_emb_ids[i]),
            distance=float(self.distances[i]),
        )


@dataclass(frozen=True)
class Batch:
    """Records drawn for one optimization step, as parallel arrays."""

    indices: np.ndarray  # (B,) int64 rows into the source dataset
    positions: np.ndarray  # (B, 3) float32
    label_ids: np.ndarray  # (B,) uint32
    confidences: np.ndarray  # (B,) float32
    image_emb_ids: np.ndarray  # (B,) uint32
    distances: np.ndarray  # (B,) float32

    def __len__(self) -> int:
        return len(self.indices)


def _aabb_with_margin(positions: np.ndarray) -> np.ndarray:
    """Tight box around float32 positions, widened by AABB_MARGIN per side.

    Corners are rounded outward to float32 so every stored record stays
    inside the stored box exactly.
    """
    lo = positions.min(axis=0).astype(np.float64)
    hi = positions.max(axis=0).astype(np.float64)
    extent = hi - lo
    lo32 = (lo - AABB_MARGIN * extent).astype(np.float32)
    hi32 = (hi + AABB_MARGIN * extent).astype(np.float32)
    lo32 = np.where(lo32 > positions.min(axis=0), np.nextafter(lo32, np.float32(-np.inf)), lo32)
    hi32 = np.where(hi32 < positions.max(axis=0), np.nextafter(hi32, np.float32(np.inf)), hi32)
    return np.stack([lo32, hi32])


def build_dataset(
    frames: list[Frame],
    detections: list[DetectionRecord],
    tables: EmbeddingTable,
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
) -> SceneDataset:
    """One record per (detection, masked pixel with valid depth).

    Records are ordered by detection (input order), then row-major within
    the mask.  Detections with confidence below ``min_confidence`` are
    dropped entirely.
    """
    by_id: dict[str, Frame] = {}
    for frame in frames:
        if frame.frame_id in by_id:
            raise InvalidInputError(f"duplicate frame id {frame.frame_id!r}")
        by_id[frame.frame_id] = frame

    positions, label_ids, confs, image_ids, dists = [], [], [], [], []
    for det in detections:
        frame = by_id.get(det.frame_id)
        if frame is None:
            raise InvalidInputError(f"detection references unknown frame {det.frame_id!r}")
        if det.mask.shape != frame.depth.values.shape:
            raise InvalidInputError(
                f"frame {det.frame_id!r}: mask {det.mask.shape} does not match "
                f"depth {frame.depth.values.shape}"
            )
        if det.label_id >= len(tables.labels):
            raise InvalidInputError(f"label id {det.label_id} out of range")
        if det.image_emb_id >= tables.image.shape[0]:
            raise InvalidInputError(f"image embedding id {det.image_emb_id} out of range")
        if det.confidence < min_confidence:
            continue

        rows, cols = np.nonzero(det.mask & frame.depth.valid)
        if len(rows) == 0:
            continue
        k = frame.intrinsics
        z = frame.depth.values[rows, cols].astype(np.float64)
        cam = np.stack(
            [(cols - k.cx) / k.fx * z, (rows - k.cy) / k.fy * z, z], axis=1
        )
        world = cam @ frame.pose.rotation.T + frame.pose.translation
        positions.append(world.astype(np.float32))
        dists.append(np.linalg.norm(cam, axis=1).astype(np.float32))
        label_ids.append(np.full(len(rows), det.label_id, dtype=np.uint32))
        confs.append(np.full(len(rows), det.confidence, dtype=np.float32))
        image_ids.append(np.full(len(rows), det.image_emb_id, dtype=np.uint32))

    if not positions:
        raise EmptyDatasetError("no detection produced any valid-depth pixel")
    pos = np.concatenate(positions)
    return SceneDataset(
        positions=pos,
        label_ids=np.concatenate(label_ids),
        confidences=np.concatenate(confs),
        image_emb_ids=np.concatenate(image_ids),
        distances=np.concatenate(dists),
        tables=tables,
        aabb=_aabb_with_margin(pos),
    )


def subset_records(ds: SceneDataset, indices: np.ndarray) -> SceneDataset:
    """New dataset over a row subset; tables and AABB are shared."""
    indices = np.asarray(indices)
    if indices.size == 0:
        raise EmptyDatasetError("record subset is empty")
    return SceneDataset(
        positions=ds.positions[indices],
        label_ids=ds.label_ids[indices],
        confidences=ds.confidences[indices],
        image_emb_ids=ds.image_emb_ids[indices],
        distances=ds.distances[indices],
        tables=ds.tables,
        aabb=ds.aabb,
    )


def holdout_split(ds: SceneDataset, fraction: float, seed: int):
    """Deterministic (train, holdout) split by record.

    The holdout gets ceil(fraction * N) records chosen by a permutation
    seeded with (seed, tag); same inputs always give the same split.
    """
    if not (0.0 < fraction < 1.0):
        raise InvalidInputError(f"holdout fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng([seed, 0x401D])
    perm = rng.permutation(len(ds))
    n_hold = max(1, int(np.ceil(fraction * len(ds))))
    if n_hold >= len(ds):
        raise InvalidInputError("holdout fraction leaves no training records")
    return subset_records(ds, perm[n_hold:]), subset_records(ds, perm[:n_hold])


def sample_batch(ds: SceneDataset, batch_size: int, seed: int, step: int) -> Batch:
    """Uniform with replacement; fully determined by (seed, step)."""
    if batch_size <= 0:
        raise InvalidInputError(f"batch size must be positive, got {batch_size}")
    if len(ds) == 0:
        raise EmptyDatasetError("cannot sample from an empty dataset")
    rng = np.random.default_rng([seed, step])
    idx = rng.integers(0, len(ds), size=batch_size)
    return Batch(
        indices=idx,
        positions=ds.positions[idx],
        label_ids=ds.label_ids[idx],
        confidences=ds.confidences[idx],
        image_emb_ids=ds.image_emb_ids[idx],
        distances=ds.distances[idx],
    )


def write_dataset_to(ds: SceneDataset, fh: BinaryIO) -> None:
    w = Writer(fh)
    w.write(MAGIC)
    w.write_u32(VERSION)
    w.write_struct(
        "<IIII",
        len(ds.tables.labels),
        ds.tables.image.shape[0],
        ds.tables.text_dim,
        ds.tables.image_dim,
    )
    w.write_u64(len(ds))
    w.write_f32_array(ds.aabb.reshape(6))
    for label in ds.tables.labels:
        w.write_string(label)
    w.write_f32_array(ds.tables.text)
    w.write_f32_array(ds.tables.image)
    records = np.empty(len(ds), dtype=RECORD_DTYPE)
    records["x"] = ds.positions[:, 0]
    records["y"] = ds.positions[:, 1]
    records["z"] = ds.positions[:, 2]
    records["label_id"] = ds.label_ids
    records["confidence"] = ds.confidences
    records["image_emb_id"] = ds.image_emb_ids
    records["distance"] = ds.distances
    w.write(records.tobytes())


def write_dataset(ds: SceneDataset, path) -> None:
    with open(path, "wb") as fh:
        write_dataset_to(ds, fh)


def read_dataset_from(fh: BinaryIO) -> SceneDataset:
    r = Reader(fh)
    r.expect_magic(MAGIC)
    version = r.read_u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4)
    n_labels, n_image, text_dim, image_dim = r.read_struct("<IIII", "table dims")
    count = r.read_u64("record count")
    aabb = r.read_f32_array(6, "aabb").reshape(2, 3)
    labels = [r.read_string(f"label {i}") for i in range(n_labels)]
    text = r.read_f32_array(n_labels * text_dim, "text table").reshape(n_labels, text_dim)
    image = r.read_f32_array(n_image * image_dim, "image table").reshape(n_image, image_dim)

    raw = fh.read(RECORD_DTYPE.itemsize * count)
    if len(raw) != RECORD_DTYPE.itemsize * count:
        raise FormatError(
            f"truncated file: dataset ends inside record "
            f"{len(raw) // RECORD_DTYPE.itemsize} of {count}",
            offset=r.offset + len(raw),
        )
    r.offset += len(raw)
    r.expect_eof()
    records = np.frombuffer(raw, dtype=RECORD_DTYPE)
    positions = np.stack(
        [records["x"], records["y"], records["z"]], axis=1
    ).astype(np.float32)
    return SceneDataset(
        positions=positions,
        label_ids=records["label_id"].astype(np.uint32),
        confidences=records["confidence"].astype(np.float32),
        image_emb_ids=records["image_emb_id"].astype(np.uint32),
        distances=records["distance"].astype(np.float32),
        tables=EmbeddingTable(labels=labels, text=text, image=image),
        aabb=aabb,
    )


def read_dataset(path) -> SceneDataset:
    with open(path, "rb") as fh:
        return read_dataset_from(fh)


def write_tables(tables: EmbeddingTable, path) -> None:
    """Write a standalone .sfe embedding-tables file."""
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.write(TABLES_MAGIC)
        w.write_u32(VERSION)
        w.write_struct(
            "<IIII",
            len(tables.labels),
            tables.image.shape[0],
            tables.text_dim,
            tables.image_dim,
        )
        for label in tables.labels:
            w.write_string(label)
        w.write_f32_array(tables.text)
        w.write_f32_array(tables.image)


def read_tables(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        r = Reader(fh)
        r.expect_magic(TABLES_MAGIC)
        version = r.read_u32("version")
        if version != VERSION:
            raise FormatError(f"unsupported tables version {version}", offset=4)
        n_labels, n_image, text_dim, image_dim = r.read_struct("<IIII", "table dims")
        labels = [r.read_string(f"label {i}") for i in range(n_labels)]
        text = r.read_f32_array(n_labels * text_dim, "text table")
        image = r.read_f32_array(n_image * image_dim, "image table")
        r.expect_eof()
        return EmbeddingTable(
            labels=labels,
            text=text.reshape(n_labels, text_dim),
            image=image.reshape(n_image, image_dim),
        )


def write_frame_dir(
    directory,
    rgb: np.ndarray,
    depth_millimeters: np.ndarray,
    intrinsics: CameraIntrinsics,
    pose: Pose,
) -> None:
    """Write one frame in the on-disk layout load_frames reads back."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(
        directory / RGB_NAME
    )
    depth = np.ascontiguousarray(depth_millimeters, dtype="<u2")
    h, w = depth.shape
    Image.frombytes("I;16", (w, h), depth.tobytes()).save(directory / DEPTH_NAME)
    meta = {
        "intrinsics": intrinsics.to_dict(),
        "pose": pose.as_matrix().tolist(),
    }
    with open(directory / META_NAME, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_frame_dir(directory, load_rgb: bool = False) -> Frame:
    directory = Path(directory)
    meta_path = directory / META_NAME
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        intrinsics = CameraIntrinsics.from_dict(meta["intrinsics"])
        pose_matrix = np.array(meta["pose"], dtype=np.float64)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed frame sidecar {meta_path}: {exc}") from exc
    pose = Pose.from_matrix(pose_matrix)

    depth_img = np.asarray(Image.open(directory / DEPTH_NAME))
    if depth_img.ndim != 2:
        raise FormatError(f"{directory / DEPTH_NAME}: depth raster must be single-channel")
    if depth_img.dtype != np.uint16:
        if np.any(depth_img < 0) or np.any(depth_img > 0xFFFF):
            raise FormatError(f"{directory / DEPTH_NAME}: depth values exceed 16-bit range")
        depth_img = depth_img.astype(np.uint16)
    depth = DepthImage.from_millimeters(depth_img)

    rgb = None
    if load_rgb:
        rgb = np.asarray(Image.open(directory / RGB_NAME).convert("RGB"))
    return Frame(
        frame_id=directory.name,
        depth=depth,
        intrinsics=intrinsics,
        pose=pose,
        rgb=rgb,
    )


def load_frames(root, load_rgb: bool = False) -> list[Frame]:
    """All frame subdirectories under root, sorted by directory name."""
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / META_NAME).exists())
    if not dirs:
        raise EmptyDatasetError(f"no frame directories under {root}")
    return [load_frame_dir(d, load_rgb=load_rgb) for d in dirs]
