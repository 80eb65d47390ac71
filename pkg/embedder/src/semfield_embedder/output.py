"""Boundary-format writers.

This package talks to the field trainer only through files, so the three
formats are implemented here independently and pinned byte-for-byte by
integration tests against the consumer's readers:

    tables (.sfe):  magic "SFE1" | version u32 | n_labels u32 | n_image u32
                    | text_dim u32 | image_dim u32 | labels (u32 len + utf-8)
                    | text rows f32 | image rows f32
    query  (.sfq):  per present part, a 16-byte-headed section:
                    magic "SFQ1" | dims u32 | kind u8 (0 semantic, 1 visual)
                    | 7 zero bytes | dims f32 values; semantic part first
    detections:     JSON lines {"frame","label","label_id","confidence",
                    "image_emb_id","mask"}, mask paths relative to the
                    file, masks as PNGs with nonzero = inside

Everything multi-byte is little-endian.
"""

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError

TABLES_MAGIC = b"SFE1"
QUERY_MAGIC = b"SFQ1"
VERSION = 1
KIND_SEMANTIC = 0
KIND_VISUAL = 1


def _f32_rows(arr, what: str) -> np.ndarray:
    rows = np.ascontiguousarray(arr, dtype=np.float32)
    if rows.ndim != 2:
        raise InputError(f"{what} must be 2-D, got shape {rows.shape}")
    if not np.all(np.isfinite(rows)):
        raise InputError(f"non-finite values in {what}")
    return rows


def write_tables(path, labels, text, image) -> None:
    text = _f32_rows(text, "text table")
    image = _f32_rows(image, "image table")
    if len(labels) != text.shape[0]:
        raise InputError(
            f"{len(labels)} labels for {text.shape[0]} text rows"
        )
    with open(path, "wb") as fh:
        fh.write(TABLES_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack(
            "<IIII", len(labels), image.shape[0], text.shape[1], image.shape[1]
        ))
        for label in labels:
            raw = str(label).encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
        fh.write(text.astype("<f4").tobytes())
        fh.write(image.astype("<f4").tobytes())


def _query_part(part, what: str) -> np.ndarray:
    vec = np.ascontiguousarray(part, dtype=np.float32).reshape(-1)
    if vec.size == 0 or not np.all(np.isfinite(vec)):
        raise InputError(f"{what} query part must be non-empty and finite")
    return vec


def write_query(path, semantic=None, visual=None) -> None:
    if semantic is None and visual is None:
        raise InputError("query needs a semantic part, a visual part, or both")
    with open(path, "wb") as fh:
        for kind, part, what in ((KIND_SEMANTIC, semantic, "semantic"),
                                 (KIND_VISUAL, visual, "visual")):
            if part is None:
                continue
            vec = _query_part(part, what)
            fh.write(QUERY_MAGIC)
            fh.write(struct.pack("<IB7x", vec.size, kind))
            fh.write(vec.astype("<f4").tobytes())


def write_detections(detections, out_dir, masks_dir: str = "masks") -> Path:
    """Write detections.jsonl plus one mask PNG per detection.

    Detections must already be in final order; image_emb_id is expected to
    equal each record's row index so the JSONL lines up with the image
    table written alongside.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / masks_dir).mkdir(exist_ok=True)
    jsonl_path = out_dir / "detections.jsonl"
    per_frame_seq = {}
    with open(jsonl_path, "w", encoding="utf-8", newline="\n") as fh:
        for row_index, det in enumerate(detections):
            if det.image_emb_id != row_index:
                raise InputError(
                    f"detection {row_index} carries image_emb_id "
                    f"{det.image_emb_id}; rows must be written in table order"
                )
            seq = per_frame_seq.get(det.frame_id, 0)
            per_frame_seq[det.frame_id] = seq + 1
            mask_rel = f"{masks_dir}/{det.frame_id}_{seq:03d}.png"
            Image.fromarray(
                np.where(det.mask, 255, 0).astype(np.uint8), mode="L"
            ).save(out_dir / mask_rel)
            fh.write(json.dumps({
                "frame": det.frame_id,
                "label": det.label,
                "label_id": det.label_id,
                "confidence": det.confidence,
                "image_emb_id": det.image_emb_id,
                "mask": mask_rel,
            }) + "\n")
    return jsonl_path
