"""Query modes against a trained field: per-view segmentation, locating a
query embedding in space, and view-localization heatmaps.

All operations are read-only over a frozen model. The candidate set for
location queries is a regular lattice over the scene bounds, not the
training points: queries must be answerable in space the cameras never
observed directly. Scores are raw dot products against the field's
unit-norm outputs, so scaling a query vector scales its scores without
changing any ranking or top-k set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._binio import Reader, Writer
from .dataset import SceneDataset
from .errors import (BudgetError, FormatError, InvalidInputError,
                     StaleCacheError)
from .geometry import (CameraIntrinsics, DepthImage, Point3, Pose,
                       backproject_frame_arrays)
from .network import FieldModel, forward_semantic, forward_visual

DEFAULT_SPACING = 0.05
DEFAULT_POINT_BUDGET = 5_000_000
SENTINEL = -1  # label id for pixels with invalid depth
EXPORT_SENTINEL = 255  # sentinel value in the 8-bit exported raster

QUERY_MAGIC = b"SFQ1"
KIND_SEMANTIC = 0
KIND_VISUAL = 1

_EVAL_CHUNK = 65536


@dataclass(frozen=True)
class QueryEmbedding:
    """A query vector: semantic part, visual part, or both.

    Producers emit unit-norm parts; nothing here renormalizes, so thresholds
    (localize_image) assume unit queries while rankings do not care.
    """

    semantic: np.ndarray | None = None
    visual: np.ndarray | None = None
    source: str = ""

    def __post_init__(self):
        if self.semantic is None and self.visual is None:
            raise InvalidInputError("query needs a semantic or a visual part")
        for name in ("semantic", "visual"):
            part = getattr(self, name)
            if part is None:
                continue
            part = np.ascontiguousarray(part, dtype=np.float32).reshape(-1)
            if part.size == 0 or not np.all(np.isfinite(part)) or not part.any():
                raise InvalidInputError(f"{name} query part must be finite and nonzero")
            object.__setattr__(self, name, part)


@dataclass(frozen=True)
class CandidateGrid:
    """Regular lattice over the scene bounds with cached field values.

    Lattice coordinates are integer multiples of the spacing, extended one
    step outward where a bound is not itself a multiple, so the lattice
    always covers the box and its geometry does not wobble with the
    data-dependent margin baked into stored bounds. Points are ordered
    x-major, z-minor; "lattice index" in tie rules is the row into points.
    """

    points: np.ndarray  # (N, 3) float64
    f_values: np.ndarray  # (N, text_dim) float32, unit rows
    h_values: np.ndarray  # (N, image_dim) float32, unit rows
    spacing: float
    fingerprint: str  # of the model the caches were computed with

    def __post_init__(self):
        if self.spacing <= 0:
            raise InvalidInputError("lattice spacing must be positive")
        n = len(self.points)
        if len(self.f_values) != n or len(self.h_values) != n:
            raise InvalidInputError("cached value arrays do not match lattice size")

    def __len__(self) -> int:
        return len(self.points)


def _snapped_axis(lo: float, hi: float, spacing: float) -> np.ndarray:
    first = math.floor(lo / spacing)
    last = math.ceil(hi / spacing)
    return np.arange(first, last + 1, dtype=np.float64) * spacing


def _chunked_forward(fn, points: np.ndarray, out_dim: int, model: FieldModel) -> np.ndarray:
    out = np.empty((len(points), out_dim), dtype=np.float32)
    for start in range(0, len(points), _EVAL_CHUNK):
        sl = slice(start, start + _EVAL_CHUNK)
        out[sl] = fn(points[sl], model)
    return out


def build_candidate_grid(
    model: FieldModel,
    spacing: float = DEFAULT_SPACING,
    point_budget: int = DEFAULT_POINT_BUDGET,
) -> CandidateGrid:
    """Evaluate f and h once at every lattice point over the model's bounds."""
    if spacing <= 0:
        raise InvalidInputError("lattice spacing must be positive")
    aabb = model.grid.aabb
    axes = [_snapped_axis(aabb[0, i], aabb[1, i], spacing) for i in range(3)]
    count = len(axes[0]) * len(axes[1]) * len(axes[2])
    if count > point_budget:
        coarser = spacing * (count / point_budget) ** (1.0 / 3.0)
        raise BudgetError(
            f"{count} lattice points exceed the budget of {point_budget}; "
            f"use spacing >= {coarser:.4g} m"
        )
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    f = _chunked_forward(forward_semantic, points, model.head_semantic.out_dim, model)
    h = _chunked_forward(forward_visual, points, model.head_visual.out_dim, model)
    return CandidateGrid(points, f, h, float(spacing), model.fingerprint())


def _check_grid(grid: CandidateGrid, model: FieldModel) -> None:
    if grid.fingerprint != model.fingerprint():
        raise StaleCacheError(
            "candidate grid was built against a different model; rebuild it"
        )


def _part_scores(part: np.ndarray, cache: np.ndarray, what: str) -> np.ndarray:
    if part.shape[0] != cache.shape[1]:
        raise InvalidInputError(
            f"{what} query part is {part.shape[0]}-d but the field emits "
            f"{cache.shape[1]}-d"
        )
    return (cache @ part).astype(np.float64)


def query_scores(
    q: QueryEmbedding, grid: CandidateGrid, semantic_weight: float = 0.5
) -> np.ndarray:
    """Per-lattice-point score: e_s.f(P), e_v.h(P), or their weighted mix."""
    if not 0.0 <= semantic_weight <= 1.0:
        raise InvalidInputError("semantic_weight must lie in [0, 1]")
    if q.semantic is not None and q.visual is None:
        return _part_scores(q.semantic, grid.f_values, "semantic")
    if q.visual is not None and q.semantic is None:
        return _part_scores(q.visual, grid.h_values, "visual")
    return semantic_weight * _part_scores(q.semantic, grid.f_values, "semantic") + (
        1.0 - semantic_weight
    ) * _part_scores(q.visual, grid.h_values, "visual")


def locate_query(
    q: QueryEmbedding,
    grid: CandidateGrid,
    model: FieldModel,
    k: int = 1,
    semantic_weight: float = 0.5,
) -> list[tuple[Point3, float]]:
    """The k highest-scoring lattice points; equal scores keep lattice order."""
    _check_grid(grid, model)
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    scores = query_scores(q, grid, semantic_weight)
    order = np.argsort(-scores, kind="stable")[: min(k, len(grid))]
    return [(Point3.from_array(grid.points[i]), float(scores[i])) for i in order]


def localize_image(
    e_v: np.ndarray, grid: CandidateGrid, model: FieldModel, threshold: float = 0.5
) -> list[tuple[Point3, float]]:
    """Every lattice point with e_v . h(P) >= threshold, best first.

    Sorted descending with lattice-order ties, so the result equals the
    prefix of the locate_query ranking whose scores clear the threshold.
    A threshold above the best score yields an empty list.
    """
    _check_grid(grid, model)
    part = np.ascontiguousarray(e_v, dtype=np.float32).reshape(-1)
    sims = _part_scores(part, grid.h_values, "visual")
    keep = np.nonzero(sims >= threshold)[0]
    order = keep[np.argsort(-sims[keep], kind="stable")]
    return [(Point3.from_array(grid.points[i]), float(sims[i])) for i in order]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel label ids plus the winning scores; -1 marks invalid depth."""

    ids: np.ndarray  # (H, W) int16
    scores: np.ndarray  # (H, W) float32, 0 at sentinel pixels
    n_labels: int

    def __post_init__(self):
        if self.n_labels < 1:
            raise InvalidInputError("label map needs at least one label")
        if self.ids.shape != self.scores.shape:
            raise InvalidInputError("ids and scores shapes differ")
        if self.ids.size and (self.ids.min() < SENTINEL or self.ids.max() >= self.n_labels):
            raise InvalidInputError("label id outside [-1, n_labels)")


def segment_view(
    depth: DepthImage,
    pose: Pose,
    k: CameraIntrinsics,
    label_rows: np.ndarray,
    model: FieldModel,
) -> LabelMap:
    """Label every valid pixel by the argmax label row at its world point.

    Ties go to the lowest label index; invalid-depth pixels get the sentinel
    and score 0.
    """
    rows = np.ascontiguousarray(label_rows, dtype=np.float32)
    if rows.size == 0:
        raise InvalidInputError("label set must be non-empty")
    if rows.ndim != 2:
        raise InvalidInputError(f"label rows must be (L, D), got {rows.shape}")
    if rows.shape[1] != model.head_semantic.out_dim:
        raise InvalidInputError(
            f"label rows are {rows.shape[1]}-d but the field emits "
            f"{model.head_semantic.out_dim}-d"
        )
    pixels, points = backproject_frame_arrays(depth, k, pose)
    ids = np.full((k.height, k.width), SENTINEL, dtype=np.int16)
    scores = np.zeros((k.height, k.width), dtype=np.float32)
    if len(points):
        f = _chunked_forward(forward_semantic, points, rows.shape[1], model)
        sims = f @ rows.T
        best = np.argmax(sims, axis=1)  # first max = lowest label index
        ids[pixels[:, 1], pixels[:, 0]] = best.astype(np.int16)
        scores[pixels[:, 1], pixels[:, 0]] = sims[np.arange(len(best)), best]
    return LabelMap(ids, scores, rows.shape[0])


def _palette() -> list[int]:
    # Deterministic distinct-ish colors; 255 (the sentinel) is black.
    flat = []
    for i in range(255):
        flat += [(37 * i + 101) % 256, (71 * i + 53) % 256, (113 * i + 29) % 256]
    return flat + [0, 0, 0]


def save_label_map(label_map: LabelMap, labels: list[str], path) -> None:
    """Write an 8-bit indexed raster plus a '<stem>.json' legend next to it."""
    if label_map.n_labels > EXPORT_SENTINEL:
        raise InvalidInputError("indexed raster export supports at most 255 labels")
    if len(labels) != label_map.n_labels:
        raise InvalidInputError(
            f"{len(labels)} names for {label_map.n_labels} labels"
        )
    path = Path(path)
    raster = np.where(label_map.ids < 0, EXPORT_SENTINEL, label_map.ids).astype(np.uint8)
    img = Image.fromarray(raster, mode="P")
    img.putpalette(_palette())
    img.save(path)
    legend = {
        "labels": {str(i): name for i, name in enumerate(labels)},
        "sentinel": EXPORT_SENTINEL,
    }
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(legend, fh, indent=1, sort_keys=True)
        fh.write("\n")


def noise_flip(ds: SceneDataset, p: float, seed: int = 0) -> SceneDataset:
    """Copy of ds where each detection group's label flips with probability p.

    A group is the set of records sharing an image_emb_id; dataset builders
    issue exactly one id per (frame, object) detection, so this flips per
    detection, not per back-projected point. Flipped groups draw uniformly
    among the other labels. Deterministic in seed; the embedding tables and
    all other record fields are untouched.
    """
    if not 0.0 <= p <= 1.0:
        raise InvalidInputError(f"flip probability must lie in [0, 1], got {p}")
    n_labels = len(ds.tables.labels)
    if p > 0 and n_labels < 2:
        raise InvalidInputError("label flipping needs at least two labels")
    label_ids = ds.label_ids.astype(np.int64)
    if len(ds) and p > 0:
        rng = np.random.default_rng([seed, 0xF11B])
        groups = np.unique(ds.image_emb_ids)
        flip = rng.random(len(groups)) < p
        offsets = rng.integers(1, n_labels, size=len(groups))
        old = np.zeros(int(groups.max()) + 1, dtype=np.int64)
        old[ds.image_emb_ids] = label_ids  # records in a group share a label
        new = np.where(flip, (old[groups] + offsets) % n_labels, old[groups])
        lookup = old.copy()
        lookup[groups] = new
        label_ids = lookup[ds.image_emb_ids]
    return SceneDataset(
        positions=ds.positions.copy(),
        label_ids=label_ids.astype(np.uint32),
        confidences=ds.confidences.copy(),
        image_emb_ids=ds.image_emb_ids.copy(),
        distances=ds.distances.copy(),
        tables=ds.tables,
        aabb=ds.aabb.copy(),
    )


def save_heatmap_csv(results: list[tuple[Point3, float]], path) -> None:
    """Write (point, score) results as x,y,z,score CSV rows."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,y,z,score\n")
        for point, score in results:
            fh.write(f"{point.x!r},{point.y!r},{point.z!r},{score!r}\n")


def save_heatmap_ply(results: list[tuple[Point3, float]], path) -> None:
    """Write results as a binary little-endian PLY, blue (low) to red (high)."""
    n = len(results)
    record = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3), ("score", "<f4")])
    buf = np.empty(n, dtype=record)
    if n:
        scores = np.array([s for _, s in results], dtype=np.float64)
        lo, hi = scores.min(), scores.max()
        t = np.ones(n) if hi - lo < 1e-12 else (scores - lo) / (hi - lo)
        red = np.round(255.0 * t).astype(np.uint8)
        buf["xyz"] = [[p.x, p.y, p.z] for p, _ in results]
        buf["rgb"][:, 0] = red
        buf["rgb"][:, 1] = 0
        buf["rgb"][:, 2] = 255 - red
        buf["score"] = scores
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property float score\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(buf.tobytes())


def write_query_file(path, semantic: np.ndarray | None = None,
                     visual: np.ndarray | None = None) -> None:
    """Write a .sfq query file: one 16-byte-headed section per present part.

    Section layout: magic "SFQ1", dims u32, kind u8 (0 semantic, 1 visual),
    7 reserved zero bytes, then dims little-endian f32 values. The semantic
    section, when present, always comes first.
    """
    q = QueryEmbedding(semantic=semantic, visual=visual)  # validates parts
    with open(path, "wb") as fh:
        w = Writer(fh)
        for kind, part in ((KIND_SEMANTIC, q.semantic), (KIND_VISUAL, q.visual)):
            if part is None:
                continue
            w.write(QUERY_MAGIC)
            w.write_struct("<IB7x", part.shape[0], kind)
            w.write_f32_array(part)


def read_query_file(path) -> QueryEmbedding:
    """Read a .sfq file into a QueryEmbedding; at most one section per kind."""
    parts: dict[int, np.ndarray] = {}
    with open(path, "rb") as fh:
        r = Reader(fh)
        while True:
            head = fh.read(len(QUERY_MAGIC))
            if not head:
                break
            r.offset += len(head)
            if head != QUERY_MAGIC:
                raise FormatError(
                    f"bad magic: expected {QUERY_MAGIC!r}, got {head!r}",
                    offset=r.offset - len(head),
                )
            dims, kind = r.read_struct("<IB7x", "query section header")
            if kind not in (KIND_SEMANTIC, KIND_VISUAL):
                raise FormatError(f"unknown query kind {kind}", offset=r.offset)
            if dims == 0:
                raise FormatError("query section has zero dims", offset=r.offset)
            if kind in parts:
                raise FormatError("duplicate query section kind", offset=r.offset)
            parts[kind] = r.read_f32_array(dims, "query values")
    if not parts:
        raise FormatError(f"{path}: empty query file")
    return QueryEmbedding(
        semantic=parts.get(KIND_SEMANTIC),
        visual=parts.get(KIND_VISUAL),
        source=str(path),
    )
