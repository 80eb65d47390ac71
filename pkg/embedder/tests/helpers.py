"""Shared capture fixture: four 64x64 frames with planted objects.

Frame 000000 holds a solid brown tall rectangle (the "chair" prototype)
and a red square ("crate"), 000001 a green square ("bin"), 000002 only
background, 000003 a brown tall L-shape whose bounding-box fill is
exactly 320/512 = 0.625, giving a detection confidence strictly between
the default threshold and 1.
"""

import json

import numpy as np
from PIL import Image

BG = (240, 240, 240)
BROWN = (140, 95, 50)
RED = (200, 40, 40)
GREEN = (40, 170, 60)

CHAIR_AREA = 32 * 16
CRATE_AREA = 12 * 12
BIN_AREA = 16 * 16
L_CHAIR_AREA = 32 * 8 + 8 * 8  # two overlapping rects
L_CHAIR_FILL = L_CHAIR_AREA / float(32 * 16)

VOCAB = "chair,crate,bin"


def frame_images():
    frames = [np.full((64, 64, 3), BG, dtype=np.uint8) for _ in range(4)]
    frames[0][8:40, 10:26] = BROWN  # 32 tall x 16 wide, solid
    frames[0][45:57, 40:52] = RED
    frames[1][20:36, 20:36] = GREEN
    frames[3][8:40, 10:18] = BROWN  # L: full-height stem ...
    frames[3][32:40, 10:26] = BROWN  # ... plus a foot
    return frames


def build_capture(root, metadata=None):
    """Writes rgb/depth/pose files plus manifest.json; returns its path."""
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, rgb in enumerate(frame_images()):
        name = f"{index:06d}"
        frame_dir = root / "frames" / name
        frame_dir.mkdir(parents=True)
        Image.fromarray(rgb).save(frame_dir / "rgb.png")
        depth = np.full((64, 64), 800, dtype=np.uint16)
        Image.fromarray(depth).save(frame_dir / "depth.png")
        pose = np.eye(4)
        if index % 2:  # exercise both pose formats
            (frame_dir / "pose.json").write_text(json.dumps(pose.tolist()))
            pose_rel = f"frames/{name}/pose.json"
        else:
            (frame_dir / "pose.txt").write_text(
                " ".join(str(v) for v in pose.reshape(-1)))
            pose_rel = f"frames/{name}/pose.txt"
        rows.append({
            "id": name,
            "rgb": f"frames/{name}/rgb.png",
            "depth": f"frames/{name}/depth.png",
            "pose": pose_rel,
        })
    doc = {"frames": rows}
    if metadata is not None:
        doc["metadata"] = metadata
    path = root / "manifest.json"
    path.write_text(json.dumps(doc, indent=1))
    return path
