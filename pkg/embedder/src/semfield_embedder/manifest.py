"""Capture manifest: which frames exist and where their files live.

JSON layout, paths relative to the manifest's own directory:

    {
     "metadata": {"device": "phone", "date": "2026-08-25"},
     "frames": [
      {"id": "000000", "rgb": "rgb/0.png", "depth": "depth/0.png",
       "pose": "pose/0.json"},
      ...
     ]
    }

"id" is optional and defaults to the zero-padded frame index.  The pose
sidecar holds a 4x4 row-major matrix, either as a JSON list of lists or as
16 whitespace-separated numbers.  Loading validates that every referenced
file exists and every pose parses; detection itself only reads the RGB
images, but a manifest with broken depth or pose files would fail later at
dataset preparation, so it is rejected up front.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError


@dataclass(frozen=True)
class FrameEntry:
    frame_id: str
    rgb: Path
    depth: Path
    pose_path: Path
    pose: np.ndarray  # (4, 4) float64


@dataclass(frozen=True)
class CaptureManifest:
    frames: list
    metadata: dict = field(default_factory=dict)


def _parse_pose(path: Path, frame_id: str) -> np.ndarray:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"frame {frame_id}: cannot read pose {path}: {exc}") from exc
    try:
        rows = json.loads(text)
        matrix = np.asarray(rows, dtype=np.float64)
    except (json.JSONDecodeError, ValueError):
        try:
            matrix = np.array([float(v) for v in text.split()], dtype=np.float64)
        except ValueError as exc:
            raise ManifestError(
                f"frame {frame_id}: pose {path} is neither JSON nor numbers"
            ) from exc
    if matrix.size != 16:
        raise ManifestError(
            f"frame {frame_id}: pose {path} has {matrix.size} values, want 16"
        )
    matrix = matrix.reshape(4, 4)
    if not np.all(np.isfinite(matrix)):
        raise ManifestError(f"frame {frame_id}: pose {path} has non-finite values")
    return matrix


def load_manifest(path) -> CaptureManifest:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "frames" not in doc:
        raise ManifestError(f"manifest {path}: missing top-level 'frames' list")
    raw_frames = doc["frames"]
    if not isinstance(raw_frames, list) or not raw_frames:
        raise ManifestError(f"manifest {path}: 'frames' must be a non-empty list")

    base = path.parent
    frames = []
    seen = set()
    for index, row in enumerate(raw_frames):
        missing = {"rgb", "depth", "pose"} - set(row)
        if missing:
            raise ManifestError(
                f"manifest frame {index}: missing keys {sorted(missing)}"
            )
        frame_id = str(row.get("id", f"{index:06d}"))
        if frame_id in seen:
            raise ManifestError(f"duplicate frame id {frame_id!r}")
        seen.add(frame_id)
        paths = {key: base / row[key] for key in ("rgb", "depth", "pose")}
        for key, p in paths.items():
            if not p.is_file():
                raise ManifestError(f"frame {frame_id}: {key} file not found: {p}")
        frames.append(FrameEntry(
            frame_id=frame_id,
            rgb=paths["rgb"],
            depth=paths["depth"],
            pose_path=paths["pose"],
            pose=_parse_pose(paths["pose"], frame_id),
        ))
    metadata = doc.get("metadata", {})
    if not isinstance(metadata, dict):
        raise ManifestError("manifest 'metadata' must be an object")
    return CaptureManifest(frames=frames, metadata=metadata)
