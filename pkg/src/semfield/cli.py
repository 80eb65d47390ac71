"""Operator command line: synth, prepare, train, segment, query, eval.

Subcommands exit 0 on success. Operational failures print exactly one
"semfield: error: <Kind>: <message>" line to stderr and exit 1 so wrappers
can parse outcomes without scraping tracebacks. Given the same inputs and
the same persisted run config, every subcommand writes byte-identical
outputs.

The detections file consumed by `prepare` is JSON lines, one detection per
line, with mask paths relative to the file's own directory:

    {"frame": "000000", "label": "chair", "label_id": 0,
     "confidence": 0.83, "image_emb_id": 0, "mask": "masks/0_0.png"}

Mask rasters are any single-channel image Pillow reads; nonzero = inside.
Embedding tables arrive separately as an .sfe file (or are borrowed from an
existing .sfd). The SEMFIELD_THREADS variable caps BLAS threads; the
console entry point applies it before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import (DetectionRecord, EmbeddingTable, SceneDataset,
                      build_dataset, holdout_split, load_frame_dir,
                      load_frames, read_dataset, read_tables, write_dataset)
from .encoding import HashGridConfig
from .errors import InvalidInputError, SemFieldError
from .network import (DEFAULT_HIDDEN, FieldModel, forward_semantic,
                      load_model, save_model)
from .query import (DEFAULT_SPACING, QueryEmbedding, build_candidate_grid,
                    locate_query, localize_image, noise_flip, read_query_file,
                    save_heatmap_csv, save_heatmap_ply, save_label_map,
                    segment_view)
from .synth import SynthConfig, generate_scene
from .training import TrainConfig, train

DEFAULT_THRESHOLD = 0.5
DEFAULT_HOLDOUT = 0.1

_RUN_CONFIG_KEYS = {"train", "grid", "hidden", "spacing", "threshold", "holdout"}


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs beyond its input files, JSON-persistable.

    A saved run config plus the input files reproduces any run byte for
    byte; subcommand flags override individual fields before persisting.
    """

    train: TrainConfig = TrainConfig()
    grid: HashGridConfig = HashGridConfig()
    hidden: int = DEFAULT_HIDDEN
    spacing: float = DEFAULT_SPACING
    threshold: float = DEFAULT_THRESHOLD
    holdout: float = DEFAULT_HOLDOUT

    def to_dict(self) -> dict:
        train = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        train["betas"] = list(train["betas"])
        return {
            "train": train,
            "grid": self.grid.to_dict(),
            "hidden": self.hidden,
            "spacing": self.spacing,
            "threshold": self.threshold,
            "holdout": self.holdout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - _RUN_CONFIG_KEYS
        if unknown:
            raise InvalidInputError(f"unknown run-config keys: {sorted(unknown)}")
        train_d = dict(d.get("train", {}))
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(train_d) - known
        if unknown:
            raise InvalidInputError(f"unknown train keys: {sorted(unknown)}")
        if "betas" in train_d:
            train_d["betas"] = tuple(train_d["betas"])
        grid_d = {**HashGridConfig().to_dict(), **d.get("grid", {})}
        unknown = set(grid_d) - set(HashGridConfig().to_dict())
        if unknown:
            raise InvalidInputError(f"unknown grid keys: {sorted(unknown)}")
        return cls(
            train=TrainConfig(**train_d),
            grid=HashGridConfig.from_dict(grid_d),
            hidden=int(d.get("hidden", DEFAULT_HIDDEN)),
            spacing=float(d.get("spacing", DEFAULT_SPACING)),
            threshold=float(d.get("threshold", DEFAULT_THRESHOLD)),
            holdout=float(d.get("holdout", DEFAULT_HOLDOUT)),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"run config {path}: {exc}") from exc
        return cls.from_dict(d)


def _resolved_run_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "batch_size", None) is not None:
        updates["batch_size"] = args.batch_size
    if getattr(args, "epochs", None) is not None:
        updates["epochs"] = args.epochs
    if getattr(args, "exclusive_denominator", False):
        updates["exclusive_denominator"] = True
    if updates:
        rc = replace(rc, train=replace(rc.train, **updates))
    if getattr(args, "spacing", None) is not None:
        rc = replace(rc, spacing=args.spacing)
    if getattr(args, "threshold", None) is not None:
        rc = replace(rc, threshold=args.threshold)
    return rc


def _load_tables_any(path) -> EmbeddingTable:
    path = Path(path)
    if path.suffix == ".sfd":
        return read_dataset(path).tables
    return read_tables(path)


def _format_aabb(aabb: np.ndarray) -> str:
    lo = ", ".join(f"{v:.4f}" for v in aabb[0])
    hi = ", ".join(f"{v:.4f}" for v in aabb[1])
    return f"[{lo}] .. [{hi}]"


def cmd_synth(args) -> int:
    ds, gt = generate_scene(Path(args.out), SynthConfig(seed=args.seed))
    print(f"wrote {len(ds)} records over {gt['n_views']} frames to {args.out}")
    print(f"labels: {', '.join(gt['labels'])}")
    return 0


def _parse_detections(path, tables: EmbeddingTable) -> list[DetectionRecord]:
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(
                    f"detections line {lineno}: invalid JSON: {exc}"
                ) from exc
            missing = {"frame", "label", "label_id", "confidence",
                       "image_emb_id", "mask"} - set(row)
            if missing:
                raise InvalidInputError(
                    f"detections line {lineno}: missing keys {sorted(missing)}"
                )
            label_id = int(row["label_id"])
            if not 0 <= label_id < len(tables.labels):
                raise InvalidInputError(
                    f"detections line {lineno}: label_id {label_id} outside the "
                    f"{len(tables.labels)}-row text table"
                )
            if tables.labels[label_id] != row["label"]:
                raise InvalidInputError(
                    f"detections line {lineno}: label {row['label']!r} does not "
                    f"match table row {label_id} ({tables.labels[label_id]!r})"
                )
            if not 0 <= int(row["image_emb_id"]) < tables.image.shape[0]:
                raise InvalidInputError(
                    f"detections line {lineno}: image_emb_id {row['image_emb_id']} "
                    f"outside the {tables.image.shape[0]}-row image table"
                )
            mask_path = path.parent / row["mask"]
            try:
                mask = np.asarray(Image.open(mask_path)) > 0
            except OSError as exc:
                raise InvalidInputError(
                    f"detections line {lineno}: cannot read mask {mask_path}: {exc}"
                ) from exc
            try:
                records.append(
                    DetectionRecord(
                        frame_id=str(row["frame"]),
                        label=str(row["label"]),
                        label_id=label_id,
                        confidence=float(row["confidence"]),
                        mask=mask,
                        image_emb_id=int(row["image_emb_id"]),
                    )
                )
            except InvalidInputError as exc:
                raise InvalidInputError(f"detections line {lineno}: {exc}") from exc
    return records


def cmd_prepare(args) -> int:
    tables = _load_tables_any(args.tables)
    frames = load_frames(args.frames)
    detections = _parse_detections(args.detections, tables)
    ds = build_dataset(frames, detections, tables)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} records to {args.out}")
    print(f"labels: {', '.join(tables.labels)}")
    print(f"aabb: {_format_aabb(ds.aabb)}")
    return 0


def cmd_train(args) -> int:
    rc = _resolved_run_config(args)
    ds = read_dataset(args.data)
    model = FieldModel.initialize(
        rc.grid,
        ds.aabb,
        out_semantic=ds.tables.text_dim,
        out_visual=ds.tables.image_dim,
        hidden=rc.hidden,
        seed=rc.train.seed,
    )
    out = Path(args.out)
    checkpoint_dir = None
    if rc.train.checkpoint_interval:
        checkpoint_dir = out.parent / (out.name + ".ckpt")
    model, history = train(ds, rc.train, model, checkpoint_dir=checkpoint_dir)
    save_model(model, out)
    with open(out.with_suffix(".losses.json"), "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in history], fh, indent=1)
        fh.write("\n")
    rc.save(out.with_suffix(".run.json"))
    final = history[-1].total if history else float("nan")
    print(f"trained {len(history)} steps (final loss {final:.4f}); wrote {out}")
    return 0


def cmd_segment(args) -> int:
    model = load_model(args.model)
    frame = load_frame_dir(args.frame, load_rgb=False)
    tables = _load_tables_any(args.tables)
    label_map = segment_view(
        frame.depth, frame.pose, frame.intrinsics, tables.text, model
    )
    save_label_map(label_map, tables.labels, args.out)
    counts = {
        name: int((label_map.ids == i).sum()) for i, name in enumerate(tables.labels)
    }
    counts["(invalid depth)"] = int((label_map.ids == -1).sum())
    for name, count in counts.items():
        if count:
            print(f"{name}: {count} px")
    print(f"wrote {args.out}")
    return 0


def _build_query(args) -> QueryEmbedding:
    if args.embedding:
        return read_query_file(args.embedding)
    if args.label_index is None and args.image_index is None:
        raise InvalidInputError(
            "give --embedding, or --label-index/--image-index with --tables"
        )
    if not args.tables:
        raise InvalidInputError("--label-index/--image-index need --tables")
    tables = _load_tables_any(args.tables)
    semantic = visual = None
    if args.label_index is not None:
        if not 0 <= args.label_index < len(tables.labels):
            raise InvalidInputError(
                f"label index {args.label_index} outside the "
                f"{len(tables.labels)}-label table"
            )
        semantic = tables.text[args.label_index]
    if args.image_index is not None:
        if not 0 <= args.image_index < tables.image.shape[0]:
            raise InvalidInputError(
                f"image index {args.image_index} outside the "
                f"{tables.image.shape[0]}-row image table"
            )
        visual = tables.image[args.image_index]
    return QueryEmbedding(semantic=semantic, visual=visual)


def cmd_query(args) -> int:
    rc = _resolved_run_config(args)
    model = load_model(args.model)
    q = _build_query(args)
    grid = build_candidate_grid(model, spacing=rc.spacing)
    if args.threshold is not None:
        if q.visual is None:
            raise InvalidInputError("--threshold localization needs a visual part")
        results = localize_image(q.visual, grid, model, threshold=rc.threshold)
        print(f"{len(results)} of {len(grid)} lattice points >= {rc.threshold}")
    else:
        results = locate_query(q, grid, model, k=args.k,
                               semantic_weight=args.semantic_weight)
    for point, score in results[:10]:
        print(f"{point.x:.4f} {point.y:.4f} {point.z:.4f} {score:.6f}")
    if len(results) > 10:
        print(f"... {len(results) - 10} more")
    if args.out:
        save_heatmap_csv(results, args.out)
        print(f"wrote {args.out}")
    if args.ply:
        save_heatmap_ply(results, args.ply)
        print(f"wrote {args.ply}")
    return 0


def _holdout_accuracy(model: FieldModel, hold: SceneDataset) -> float:
    f = forward_semantic(hold.positions, model)
    pred = np.argmax(f @ hold.tables.text.T, axis=1)
    return float(np.mean(pred == hold.label_ids))


def cmd_eval(args) -> int:
    rc = _resolved_run_config(args)
    ds = read_dataset(args.data)
    ps = [float(p) for p in args.noise_p.split(",") if p]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if not ps or not seeds:
        raise InvalidInputError("--noise-p and --seeds must be non-empty")
    rows = []
    for p in ps:
        for seed in seeds:
            train_part, hold = holdout_split(ds, rc.holdout, seed)
            noisy = noise_flip(train_part, p, seed)
            cfg = replace(rc.train, seed=seed)
            model = FieldModel.initialize(
                rc.grid,
                ds.aabb,
                out_semantic=ds.tables.text_dim,
                out_visual=ds.tables.image_dim,
                hidden=rc.hidden,
                seed=seed,
            )
            model, _ = train(noisy, cfg, model)
            accuracy = _holdout_accuracy(model, hold)
            rows.append({"p": p, "seed": seed, "accuracy": accuracy})
            print(f"p={p} seed={seed} accuracy={accuracy:.4f}")
    means = {
        str(p): float(np.mean([r["accuracy"] for r in rows if r["p"] == p]))
        for p in ps
    }
    report = {
        "noise_p": ps,
        "seeds": seeds,
        "holdout_fraction": rc.holdout,
        "runs": rows,
        "mean_accuracy": means,
    }
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(out.with_suffix(".csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("p,seed,accuracy\n")
        for r in rows:
            fh.write(f"{r['p']!r},{r['seed']},{r['accuracy']!r}\n")
    for p in ps:
        print(f"p={p} mean accuracy={means[str(p)]:.4f}")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semfield",
        description="Implicit 3D semantic fields: build, train, and query.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic box-room scene")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="build an .sfd dataset from frames + detections")
    p.add_argument("--frames", required=True, help="directory of frame subdirectories")
    p.add_argument("--detections", required=True, help="detections .jsonl file")
    p.add_argument("--tables", required=True, help="embedding tables (.sfe or .sfd)")
    p.add_argument("--out", required=True, help="output .sfd path")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a field on an .sfd dataset")
    p.add_argument("--data", required=True, help="input .sfd dataset")
    p.add_argument("--out", required=True, help="output .sfm model path")
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--exclusive-denominator", action="store_true",
                   help="drop the positive term from contrastive denominators")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="label every valid pixel of a frame")
    p.add_argument("--model", required=True, help=".sfm model")
    p.add_argument("--frame", required=True, help="frame directory")
    p.add_argument("--tables", required=True, help="embedding tables (.sfe or .sfd)")
    p.add_argument("--out", required=True, help="output raster (.png)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("query", help="rank lattice points against a query embedding")
    p.add_argument("--model", required=True, help=".sfm model")
    p.add_argument("--embedding", help="query .sfq file")
    p.add_argument("--tables", help="embedding tables for --label/image-index")
    p.add_argument("--label-index", type=int, help="semantic part = text row N")
    p.add_argument("--image-index", type=int, help="visual part = image row N")
    p.add_argument("-k", type=int, default=5, help="results to return")
    p.add_argument("--spacing", type=float, help="lattice spacing in meters")
    p.add_argument("--semantic-weight", type=float, default=0.5,
                   help="semantic share of the score when both parts exist")
    p.add_argument("--threshold", type=float,
                   help="return every lattice point scoring >= this instead of top-k")
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--out", help="write results as CSV")
    p.add_argument("--ply", help="write results as a colored point cloud")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="label-noise robustness sweep")
    p.add_argument("--data", required=True, help="input .sfd dataset")
    p.add_argument("--out", required=True, help="output metrics JSON (CSV sibling)")
    p.add_argument("--noise-p", default="0,0.2,0.4", help="comma-separated flip rates")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--exclusive-denominator", action="store_true")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SemFieldError, OSError) as exc:
        message = " ".join(str(exc).split())
        print(f"semfield: error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
