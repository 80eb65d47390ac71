"""Salient-region extraction for the offline detector backend.

A pixel is salient when its color differs from the border-estimated
background by more than a tolerance; 4-connected components of salient
pixels become blobs.  Components are found with row-run union-find, so
cost is linear in pixels plus one python loop over rows.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError

# name -> representative sRGB value; nearest_color_name is a plain
# euclidean argmin over this table
PALETTE = {
    "red": (200, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 200),
    "yellow": (230, 210, 50),
    "orange": (240, 140, 30),
    "purple": (150, 60, 180),
    "brown": (140, 95, 50),
    "black": (25, 25, 25),
    "gray": (128, 128, 128),
    "white": (240, 240, 240),
}

_PALETTE_NAMES = list(PALETTE)
_PALETTE_RGB = np.array([PALETTE[n] for n in _PALETTE_NAMES], dtype=np.float64)


@dataclass(frozen=True)
class Blob:
    mask: np.ndarray  # (H, W) bool
    bbox: tuple  # (top, left, bottom, right), exclusive bottom/right
    mean_color: np.ndarray  # (3,) float64
    area: int

    @property
    def fill(self) -> float:
        t, l, b, r = self.bbox
        return self.area / float((b - t) * (r - l))


def nearest_color_name(rgb) -> str:
    rgb = np.asarray(rgb, dtype=np.float64).reshape(3)
    return _PALETTE_NAMES[int(np.argmin(((_PALETTE_RGB - rgb) ** 2).sum(axis=1)))]


def shape_of(bbox) -> str:
    t, l, b, r = bbox
    height, width = b - t, r - l
    if height >= 1.33 * width:
        return "tall"
    if width >= 1.33 * height:
        return "wide"
    return "square"


def _background_color(rgb: np.ndarray) -> np.ndarray:
    border = np.concatenate([
        rgb[0].reshape(-1, 3), rgb[-1].reshape(-1, 3),
        rgb[:, 0].reshape(-1, 3), rgb[:, -1].reshape(-1, 3),
    ])
    return np.median(border, axis=0)


class _UnionFind:
    def __init__(self):
        self.parent = []

    def make(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _row_runs(row: np.ndarray):
    """Start/end (exclusive) column pairs of True runs in a 1-D bool row."""
    padded = np.concatenate([[False], row, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(edges[0::2], edges[1::2]))


def find_blobs(rgb: np.ndarray, min_area: int = 64, bg_tolerance: int = 40):
    """Blobs of non-background color, largest first (ties by bbox position)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InputError(f"expected an (H, W, 3) image, got shape {rgb.shape}")
    background = _background_color(rgb.astype(np.float64))
    salient = (np.abs(rgb.astype(np.float64) - background) > bg_tolerance).any(axis=2)

    uf = _UnionFind()
    labels = np.full(rgb.shape[:2], -1, dtype=np.int64)
    previous = []  # (start, end, label) runs of the row above
    for y in range(rgb.shape[0]):
        current = []
        for start, end in _row_runs(salient[y]):
            label = uf.make()
            for p_start, p_end, p_label in previous:
                if p_start < end and start < p_end:  # 4-connectivity overlap
                    uf.union(label, p_label)
            current.append((start, end, label))
            labels[y, start:end] = label
        previous = current

    if not uf.parent:
        return []
    lut = np.array([uf.find(i) for i in range(len(uf.parent))])
    rooted = np.where(labels >= 0, lut[np.clip(labels, 0, None)], -1)

    blobs = []
    for root in np.unique(rooted[rooted >= 0]):
        mask = rooted == root
        area = int(mask.sum())
        if area < min_area:
            continue
        ys, xs = np.nonzero(mask)
        bbox = (int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1)
        blobs.append(Blob(
            mask=mask,
            bbox=bbox,
            mean_color=rgb[mask].astype(np.float64).mean(axis=0),
            area=area,
        ))
    blobs.sort(key=lambda b: (-b.area, b.bbox))
    return blobs
