"""Operator command line: detect, embed-labels, embed-query.

Subcommands exit 0 on success; failures print exactly one
"semfield-embed: error: <Kind>: <message>" line to stderr and exit 1.
Given the same inputs and flags, every subcommand writes byte-identical
outputs.  `detect` leaves a meta.json next to its outputs recording the
flags that produced them.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import text_backend, vision_backend
from .errors import EmbedderError, InputError
from .manifest import load_manifest
from .output import write_detections, write_query, write_tables
from .pipeline import (DEFAULT_EVERY, DEFAULT_MIN_AREA, DEFAULT_MIN_CONFIDENCE,
                       detect_frames, embed_labels, parse_vocabulary)


def cmd_detect(args) -> int:
    vocabulary = parse_vocabulary(args.vocab)  # before any backend work
    manifest = load_manifest(args.manifest)
    text = text_backend(args.text_model)
    vision = vision_backend(args.vision_model)
    detections, image_table = detect_frames(
        manifest,
        vocabulary,
        vision,
        every=args.every,
        min_confidence=args.min_confidence,
        min_area=args.min_area,
    )
    out = Path(args.out)
    write_detections(detections, out)
    write_tables(out / "tables.sfe", vocabulary,
                 embed_labels(vocabulary, text), image_table)
    meta = {
        "detections": len(detections),
        "every": args.every,
        "frames_processed": len(manifest.frames[::args.every]),
        "min_area": args.min_area,
        "min_confidence": args.min_confidence,
        "text_model": text.name,
        "vision_model": vision.name,
        "vocabulary": vocabulary,
    }
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"{len(detections)} detections over "
          f"{meta['frames_processed']} frames -> {out}")
    for det in detections:
        print(f"{det.frame_id} {det.label} {det.confidence:.3f}")
    return 0


def cmd_embed_labels(args) -> int:
    labels = parse_vocabulary(args.labels)
    text = text_backend(args.text_model)
    vision = vision_backend(args.vision_model)
    rows = embed_labels(labels, text)
    write_tables(args.out, labels, rows,
                 np.zeros((0, vision.dim), dtype=np.float32))
    print(f"wrote {len(labels)} label rows to {args.out}")
    return 0


def cmd_embed_query(args) -> int:
    if (args.text is None) == (args.image is None):
        raise InputError("give exactly one of --text or --image")
    if args.text is not None:
        text = text_backend(args.text_model)
        vision = vision_backend(args.vision_model)
        semantic = text.embed([args.text])[0]
        visual = vision.embed_texts([args.text])[0]
        write_query(args.out, semantic=semantic, visual=visual)
        print(f"wrote semantic+visual query for {args.text!r} to {args.out}")
    else:
        vision = vision_backend(args.vision_model)
        with Image.open(args.image) as img:
            rgb = np.asarray(img.convert("RGB"))
        write_query(args.out, visual=vision.embed_image(rgb))
        print(f"wrote visual query for {args.image} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semfield-embed",
        description="Turn RGB-D captures into detection and embedding files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect objects over a capture manifest")
    p.add_argument("--manifest", required=True, help="capture manifest JSON")
    p.add_argument("--vocab", required=True,
                   help="comma-separated label vocabulary")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--every", type=int, default=DEFAULT_EVERY,
                   help="keep every k-th frame")
    p.add_argument("--min-confidence", type=float,
                   default=DEFAULT_MIN_CONFIDENCE,
                   help="drop detections scoring below this")
    p.add_argument("--min-area", type=int, default=DEFAULT_MIN_AREA,
                   help="minimum region size in pixels")
    p.add_argument("--text-model", default="hashed-trigram")
    p.add_argument("--vision-model", default="color-prototype")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("embed-labels",
                       help="write a tables file for a label list")
    p.add_argument("--labels", required=True, help="comma-separated labels")
    p.add_argument("--out", required=True, help="output .sfe path")
    p.add_argument("--text-model", default="hashed-trigram")
    p.add_argument("--vision-model", default="color-prototype")
    p.set_defaults(func=cmd_embed_labels)

    p = sub.add_parser("embed-query", help="write a .sfq query embedding")
    p.add_argument("--text", help="text query (semantic + visual parts)")
    p.add_argument("--image", help="image query (visual part only)")
    p.add_argument("--out", required=True, help="output .sfq path")
    p.add_argument("--text-model", default="hashed-trigram")
    p.add_argument("--vision-model", default="color-prototype")
    p.set_defaults(func=cmd_embed_query)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (EmbedderError, OSError) as exc:
        message = " ".join(str(exc).split())
        print(f"semfield-embed: error: {type(exc).__name__}: {message}",
              file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
