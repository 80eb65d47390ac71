"""Multi-resolution hash encoding: the trunk mapping world coordinates to
a d-dimensional feature vector by trilinear interpolation of learnable
per-level hash tables, plus its exact backward pass into table rows.

Per level l the grid has ``floor(base_resolution * per_level_scale**l)``
cells per axis over the scene AABB.  A query point is normalized into
[0, 1]^3 by the AABB, scaled to the level resolution, and the 8 cell
corner feature rows (fetched through a wraparound 32-bit spatial hash)
are blended with trilinear weights.  Level outputs are concatenated in
ascending level order.

Hash collisions are deliberately left unresolved; colliding cells share
a row and their gradients average out, matching the reference design of
this encoding family.

Tables default to float32.  float64 is supported end to end (pass
``dtype=np.float64`` at construction) and is what the finite-difference
gradient oracles in the test suite run on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from semfield.errors import InvalidInputError

# Hash primes; the x coordinate is multiplied by 1 so nearby cells map to
# nearby rows at coarse levels where the grid fits the table densely.
_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)

# Corner offsets of a cell, bit k of the corner id selecting axis k.
_OFFSETS = np.array(
    [[(c >> a) & 1 for a in range(3)] for c in range(8)], dtype=np.int64
)

# Guards normalization against degenerate (zero-extent) AABB axes.
_MIN_EXTENT = 1e-12


@dataclass(frozen=True)
class HashGridConfig:
    """Hyperparameters of the encoding.

    levels * features is the trunk output dimension d (144 = 18 x 8 at
    the defaults).
    """

    levels: int = 18
    features: int = 8
    table_log2: int = 20
    base_resolution: int = 16
    per_level_scale: float = 2.0

    def __post_init__(self):
        if self.levels < 1 or self.features < 1:
            raise InvalidInputError("levels and features must be >= 1")
        if not (1 <= self.table_log2 <= 24):
            raise InvalidInputError(f"table_log2 must be in [1, 24], got {self.table_log2}")
        if self.base_resolution < 1:
            raise InvalidInputError("base_resolution must be >= 1")
        if not self.per_level_scale > 1:
            raise InvalidInputError(f"per_level_scale must be > 1, got {self.per_level_scale}")

    @property
    def output_dim(self) -> int:
        return self.levels * self.features

    @property
    def table_size(self) -> int:
        return 1 << self.table_log2

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "features": self.features,
            "table_log2": self.table_log2,
            "base_resolution": self.base_resolution,
            "per_level_scale": self.per_level_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HashGridConfig":
        return cls(
            levels=int(d["levels"]),
            features=int(d["features"]),
            table_log2=int(d["table_log2"]),
            base_resolution=int(d["base_resolution"]),
            per_level_scale=float(d["per_level_scale"]),
        )


def grid_resolution(level: int, cfg: HashGridConfig) -> int:
    """Cells per axis at a level: floor(base * scale**level)."""
    if not (0 <= level < cfg.levels):
        raise InvalidInputError(f"level {level} out of range [0, {cfg.levels})")
    return int(np.floor(cfg.base_resolution * cfg.per_level_scale**level))


def hash_index(cell: tuple[int, int, int], cfg: HashGridConfig) -> int:
    """Table index of an integer cell corner.

    (x*1 XOR y*2654435761 XOR z*805459861) mod table size, with the
    multiplies wrapping to 32 bits.
    """
    x, y, z = (int(c) for c in cell)
    if x < 0 or y < 0 or z < 0:
        raise InvalidInputError(f"cell components must be non-negative, got {cell}")
    cells = np.array([[x, y, z]], dtype=np.int64)
    return int(_hash_cells(cells, cfg)[0])


def _hash_cells(cells: np.ndarray, cfg: HashGridConfig) -> np.ndarray:
    """Vectorized hash of integer cells with shape (..., 3)."""
    # uint64 products truncated to 32 bits == wraparound 32-bit multiplies.
    prods = (cells.astype(np.uint64) * _PRIMES) & np.uint64(0xFFFFFFFF)
    h = prods[..., 0] ^ prods[..., 1] ^ prods[..., 2]
    return (h & np.uint64(cfg.table_size - 1)).astype(np.int64)


@dataclass
class HashGrid:
    """Learnable per-level tables plus the AABB used for normalization."""

    config: HashGridConfig
    tables: list[np.ndarray]
    aabb: np.ndarray  # (2, 3): min corner, max corner

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        if len(self.tables) != self.config.levels:
            raise InvalidInputError(
                f"expected {self.config.levels} tables, got {len(self.tables)}"
            )
        for i, t in enumerate(self.tables):
            if t.shape != (self.config.table_size, self.config.features):
                raise InvalidInputError(f"table {i} has wrong shape {t.shape}")

    @property
    def dtype(self) -> np.dtype:
        return self.tables[0].dtype

    @classmethod
    def initialize(
        cls,
        cfg: HashGridConfig,
        aabb: np.ndarray,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> "HashGrid":
        """Fresh grid with entries uniform in [-1e-4, 1e-4]."""
        tables = [
            rng.uniform(-1e-4, 1e-4, size=(cfg.table_size, cfg.features)).astype(dtype)
            for _ in range(cfg.levels)
        ]
        return cls(config=cfg, tables=tables, aabb=aabb)

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Map world points into [0, 1]^3; outside-AABB points clamp."""
        mn, mx = self.aabb[0], self.aabb[1]
        extent = np.maximum(mx - mn, _MIN_EXTENT)
        return np.clip((points - mn) / extent, 0.0, 1.0)


def _as_batch(points: np.ndarray) -> tuple[np.ndarray, bool]:
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"points must have shape (3,) or (B, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("points contain non-finite values")
    return pts, single


def _corners_and_weights(
    normalized: np.ndarray, resolution: int
) -> tuple[np.ndarray, np.ndarray]:
    """Cell corners (8, B, 3) and trilinear weights (8, B) at one level."""
    x = normalized * resolution
    c0 = np.floor(x).astype(np.int64)
    t = x - c0
    corners = c0[None, :, :] + _OFFSETS[:, None, :]
    w = np.prod(
        np.where(_OFFSETS[:, None, :] == 1, t[None, :, :], 1.0 - t[None, :, :]),
        axis=2,
    )
    return corners, w


def encode(points: np.ndarray, grid: HashGrid) -> np.ndarray:
    """Encode points into (B, d) features; (3,) input yields a d-vector."""
    pts, single = _as_batch(points)
    cfg = grid.config
    pn = grid.normalize(pts)
    out = np.empty((pts.shape[0], cfg.output_dim), dtype=grid.dtype)
    for level in range(cfg.levels):
        res = grid_resolution(level, cfg)
        corners, w = _corners_and_weights(pn, res)
        idx = _hash_cells(corners, cfg)
        feats = grid.tables[level][idx]  # (8, B, F)
        vals = np.einsum("kb,kbf->bf", w, feats)
        out[:, level * cfg.features : (level + 1) * cfg.features] = vals
    return out[0] if single else out


def encode_backward(
    points: np.ndarray,
    upstream: np.ndarray,
    grid: HashGrid,
    accum_dtype=None,
) -> list[np.ndarray]:
    """Gradient of ``sum(upstream * encode(points, grid))`` w.r.t. tables.

    Each of the 8 corner rows per level receives its level's upstream
    slice scaled by the corner's trilinear weight; contributions are
    summed over the batch.  Returns one dense array per level (at most
    levels x 8 rows per point are nonzero).  Accumulation runs in the
    table dtype unless ``accum_dtype`` overrides it.
    """
    pts, single = _as_batch(points)
    cfg = grid.config
    up = np.asarray(upstream, dtype=np.float64)
    if single:
        up = np.atleast_2d(up)
    if up.shape != (pts.shape[0], cfg.output_dim):
        raise InvalidInputError(
            f"upstream shape {up.shape} != ({pts.shape[0]}, {cfg.output_dim})"
        )
    dtype = accum_dtype or grid.dtype
    pn = grid.normalize(pts)
    grads = [np.zeros_like(t, dtype=dtype) for t in grid.tables]
    for level in range(cfg.levels):
        res = grid_resolution(level, cfg)
        corners, w = _corners_and_weights(pn, res)
        idx = _hash_cells(corners, cfg)
        up_slice = up[:, level * cfg.features : (level + 1) * cfg.features]
        contrib = (w[:, :, None] * up_slice[None, :, :]).astype(dtype)
        np.add.at(grads[level], idx.reshape(-1), contrib.reshape(-1, cfg.features))
    return grads
