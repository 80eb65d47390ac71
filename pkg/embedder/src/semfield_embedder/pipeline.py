"""Detection over a capture manifest, in boundary-record form.

detect_frames runs the vision backend over every kept frame (every k-th,
default 5), classifies each salient region against the vocabulary by
cosine in the backend's joint text/image space, and returns detection
records plus the image-embedding table, ordered by frame id then
descending confidence so output is deterministic regardless of how frames
were processed.
"""

from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .backends import text_backend, vision_backend
from .blobs import find_blobs
from .errors import InputError

DEFAULT_EVERY = 5
DEFAULT_MIN_CONFIDENCE = 0.3
DEFAULT_MIN_AREA = 64


@dataclass(frozen=True)
class Detection:
    frame_id: str
    label: str
    label_id: int
    confidence: float
    mask: np.ndarray  # (H, W) bool
    image_emb_id: int


def _load_rgb(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def parse_vocabulary(raw: str) -> list:
    labels = [part.strip() for part in raw.split(",") if part.strip()]
    if not labels:
        raise InputError("vocabulary must name at least one label")
    if len(set(labels)) != len(labels):
        raise InputError("vocabulary has duplicate labels")
    return labels


def detect_frames(
    manifest,
    vocabulary,
    vision=None,
    *,
    every: int = DEFAULT_EVERY,
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
    min_area: int = DEFAULT_MIN_AREA,
):
    """Returns (detections, image_table) with image_emb_id = row index."""
    if not vocabulary:
        raise InputError("vocabulary must name at least one label")
    if every < 1:
        raise InputError(f"frame subsampling must be >= 1, got {every}")
    if not (0.0 <= min_confidence <= 1.0):
        raise InputError(
            f"confidence threshold must be in [0, 1], got {min_confidence}"
        )
    vision = vision or vision_backend()
    label_embs = vision.embed_labels(vocabulary).astype(np.float64)

    raw = []
    for entry in manifest.frames[::every]:
        rgb = _load_rgb(entry.rgb)
        for blob in find_blobs(rgb, min_area=min_area):
            emb = vision.embed_region(rgb, blob.mask)
            scores = label_embs @ emb.astype(np.float64)
            best = int(np.argmax(scores))
            confidence = float(max(0.0, min(1.0, scores[best])) * blob.fill)
            if confidence < min_confidence:
                continue
            raw.append((Detection(
                frame_id=entry.frame_id,
                label=vocabulary[best],
                label_id=best,
                confidence=confidence,
                mask=blob.mask,
                image_emb_id=-1,  # assigned after ordering
            ), emb))

    raw.sort(key=lambda pair: (pair[0].frame_id, -pair[0].confidence))
    detections = [
        replace(det, image_emb_id=i) for i, (det, _) in enumerate(raw)
    ]
    dim = vision.dim
    image_table = (
        np.stack([emb for _, emb in raw])
        if raw else np.zeros((0, dim), dtype=np.float32)
    )
    return detections, image_table


def embed_labels(labels, text=None) -> np.ndarray:
    """Text-embedding table rows, one per label, input order."""
    if not labels:
        raise InputError("label list must be non-empty")
    text = text or text_backend()
    return text.embed(labels)
