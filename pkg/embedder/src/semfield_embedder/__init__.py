"""Offline embedding and detection frontend for semantic-field captures."""

from .backends import (DEFAULT_TEXT, DEFAULT_VISION, TEXT_BACKENDS,
                       VISION_BACKENDS, text_backend, vision_backend)
from .errors import EmbedderError, InputError, ManifestError, ModelError
from .manifest import CaptureManifest, FrameEntry, load_manifest
from .output import write_detections, write_query, write_tables
from .pipeline import Detection, detect_frames, embed_labels, parse_vocabulary

__all__ = [
    "CaptureManifest",
    "DEFAULT_TEXT",
    "DEFAULT_VISION",
    "Detection",
    "EmbedderError",
    "FrameEntry",
    "InputError",
    "ManifestError",
    "ModelError",
    "TEXT_BACKENDS",
    "VISION_BACKENDS",
    "detect_frames",
    "embed_labels",
    "load_manifest",
    "parse_vocabulary",
    "text_backend",
    "vision_backend",
    "write_detections",
    "write_query",
    "write_tables",
]
