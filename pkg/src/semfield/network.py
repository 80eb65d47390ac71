"""Field model: hash-grid trunk composed with per-objective MLP heads.

The semantic head maps trunk features to the text-embedding space and the
visual head to the image-embedding space; both outputs are L2-normalized
so downstream dot products are cosine scores.  The optional instance head
emits raw logits (softmax lives in the loss).  Heads are two weight
layers with a ReLU between them.

Serialization (.sfm, little-endian):
    magic "SFM1" | version u32
    levels u32 | features u32 | table_log2 u32 | base_resolution u32
    per_level_scale f64 | aabb 6 x f64
    hidden u32 | out_semantic u32 | out_visual u32 | out_instance u32 (0 = absent)
    log_tau_s f32 | log_tau_v f32 | seed u64 | step_count u64
    parameter blobs in declaration order (tables by level, then semantic,
    visual, instance heads as w1, b1, w2, b2), each prefixed by a u64
    element count and stored as f32.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from semfield._binio import Reader, Writer
from semfield.encoding import HashGrid, HashGridConfig, encode
from semfield.errors import CapabilityError, FormatError, InvalidInputError, NumericError

MAGIC = b"SFM1"
VERSION = 1

DEFAULT_HIDDEN = 600
DEFAULT_TAU = 0.07


def _check_finite(arr: np.ndarray, layer: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {layer}")
    return arr


@dataclass
class MlpHead:
    """One hidden ReLU layer then a linear output layer."""

    w1: np.ndarray  # (in, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, out)
    b2: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def initialize(
        cls, in_dim: int, hidden: int, out: int, rng: np.random.Generator, dtype=np.float32
    ) -> "MlpHead":
        """Fan-in-scaled uniform weights, zero biases."""
        lim1 = math.sqrt(1.0 / in_dim)
        lim2 = math.sqrt(1.0 / hidden)
        return cls(
            w1=rng.uniform(-lim1, lim1, size=(in_dim, hidden)).astype(dtype),
            b1=np.zeros(hidden, dtype=dtype),
            w2=rng.uniform(-lim2, lim2, size=(hidden, out)).astype(dtype),
            b2=np.zeros(out, dtype=dtype),
        )

    def forward(self, x: np.ndarray, layer_tag: str = "head") -> np.ndarray:
        out, _ = self.forward_cached(x, layer_tag)
        return out

    def forward_cached(self, x: np.ndarray, layer_tag: str = "head"):
        pre = x @ self.w1 + self.b1
        hidden = np.maximum(pre, 0)
        _check_finite(hidden, f"{layer_tag} hidden layer")
        out = hidden @ self.w2 + self.b2
        _check_finite(out, f"{layer_tag} output layer")
        return out, (x, pre, hidden)

    def backward(self, cache, d_out: np.ndarray):
        """Gradients for the cached forward pass.

        Returns (d_x, grads) with grads keyed w1/b1/w2/b2.
        """
        x, pre, hidden = cache
        grads = {
            "w2": hidden.T @ d_out,
            "b2": d_out.sum(axis=0),
        }
        d_hidden = d_out @ self.w2.T
        d_pre = d_hidden * (pre > 0)
        grads["w1"] = x.T @ d_pre
        grads["b1"] = d_pre.sum(axis=0)
        d_x = d_pre @ self.w1.T
        return d_x, grads


def l2_normalize_cached(z: np.ndarray):
    norms = np.linalg.norm(z.astype(np.float64), axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("zero-norm row in output normalization")
    y = (z / norms).astype(z.dtype)
    return y, (y, norms)


def l2_normalize(z: np.ndarray) -> np.ndarray:
    return l2_normalize_cached(z)[0]


def l2_normalize_backward(cache, d_y: np.ndarray) -> np.ndarray:
    """d/dz of y = z / ||z||: project out the radial component, rescale."""
    y, norms = cache
    radial = np.sum(d_y * y, axis=-1, keepdims=True)
    return (d_y - y * radial) / norms


@dataclass
class FieldModel:
    """Trained artifact: trunk tables, heads, learned log-temperatures."""

    grid: HashGrid
    head_semantic: MlpHead
    head_visual: MlpHead
    head_instance: MlpHead | None = None
    log_tau_semantic: np.ndarray = None  # 0-d array, same dtype as weights
    log_tau_visual: np.ndarray = None
    seed: int = 0
    step_count: int = 0

    def __post_init__(self):
        d = self.grid.config.output_dim
        for name, head in (("semantic", self.head_semantic), ("visual", self.head_visual)):
            if head.in_dim != d:
                raise InvalidInputError(f"{name} head input dim {head.in_dim} != trunk dim {d}")
        if self.head_instance is not None and self.head_instance.in_dim != d:
            raise InvalidInputError("instance head input dim does not match trunk")
        if self.log_tau_semantic is None:
            self.log_tau_semantic = np.array(math.log(DEFAULT_TAU), dtype=self.grid.dtype)
        if self.log_tau_visual is None:
            self.log_tau_visual = np.array(math.log(DEFAULT_TAU), dtype=self.grid.dtype)

    @property
    def dtype(self) -> np.dtype:
        return self.grid.dtype

    @property
    def tau_semantic(self) -> float:
        return float(np.exp(self.log_tau_semantic))

    @property
    def tau_visual(self) -> float:
        return float(np.exp(self.log_tau_visual))

    @classmethod
    def initialize(
        cls,
        cfg: HashGridConfig,
        aabb: np.ndarray,
        out_semantic: int,
        out_visual: int,
        hidden: int = DEFAULT_HIDDEN,
        instance_classes: int | None = None,
        seed: int = 0,
        dtype=np.float32,
        tau_init: float = DEFAULT_TAU,
    ) -> "FieldModel":
        """Fresh model; ``instance_classes`` is K (head emits K+1 logits)."""
        rng = np.random.default_rng([seed, 0x5EED])
        grid = HashGrid.initialize(cfg, aabb, rng, dtype=dtype)
        d = cfg.output_dim
        head_s = MlpHead.initialize(d, hidden, out_semantic, rng, dtype)
        head_v = MlpHead.initialize(d, hidden, out_visual, rng, dtype)
        head_i = None
        if instance_classes is not None:
            head_i = MlpHead.initialize(d, hidden, instance_classes + 1, rng, dtype)
        return cls(
            grid=grid,
            head_semantic=head_s,
            head_visual=head_v,
            head_instance=head_i,
            log_tau_semantic=np.array(math.log(tau_init), dtype=dtype),
            log_tau_visual=np.array(math.log(tau_init), dtype=dtype),
            seed=seed,
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """All trainable tensors in declaration order."""
        params: dict[str, np.ndarray] = {}
        for i, t in enumerate(self.grid.tables):
            params[f"table{i}"] = t
        for tag, head in (("semantic", self.head_semantic), ("visual", self.head_visual)):
            params[f"{tag}.w1"] = head.w1
            params[f"{tag}.b1"] = head.b1
            params[f"{tag}.w2"] = head.w2
            params[f"{tag}.b2"] = head.b2
        if self.head_instance is not None:
            params["instance.w1"] = self.head_instance.w1
            params["instance.b1"] = self.head_instance.b1
            params["instance.w2"] = self.head_instance.w2
            params["instance.b2"] = self.head_instance.b2
        params["log_tau_semantic"] = self.log_tau_semantic
        params["log_tau_visual"] = self.log_tau_visual
        return params

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        """In-place update keeping the arrays other code already references."""
        target = self.parameters()[name]
        target[...] = value

    def fingerprint(self) -> str:
        buf = io.BytesIO()
        save_model_to(self, buf)
        return hashlib.sha256(buf.getvalue()).hexdigest()


def trunk_features(points: np.ndarray, model: FieldModel) -> np.ndarray:
    feats = encode(points, model.grid)
    return _check_finite(feats, "hash encoding")


def forward_semantic(points: np.ndarray, model: FieldModel) -> np.ndarray:
    """f(P): unit-norm rows in the text-embedding space."""
    z = model.head_semantic.forward(trunk_features(points, model), "semantic")
    return l2_normalize(z)


def forward_visual(points: np.ndarray, model: FieldModel) -> np.ndarray:
    """h(P): unit-norm rows in the image-embedding space."""
    z = model.head_visual.forward(trunk_features(points, model), "visual")
    return l2_normalize(z)


def forward_instance(points: np.ndarray, model: FieldModel) -> np.ndarray:
    """Raw (K+1)-class logits; softmax is applied by the loss."""
    if model.head_instance is None:
        raise CapabilityError("model has no instance head")
    return model.head_instance.forward(trunk_features(points, model), "instance")


def save_model_to(model: FieldModel, fh: BinaryIO) -> None:
    w = Writer(fh)
    w.write(MAGIC)
    w.write_u32(VERSION)
    cfg = model.grid.config
    w.write_struct("<IIII", cfg.levels, cfg.features, cfg.table_log2, cfg.base_resolution)
    w.write_struct("<d", cfg.per_level_scale)
    w.write_struct("<6d", *model.grid.aabb.reshape(6).tolist())
    out_i = model.head_instance.out_dim if model.head_instance is not None else 0
    w.write_struct(
        "<IIII",
        model.head_semantic.hidden_dim,
        model.head_semantic.out_dim,
        model.head_visual.out_dim,
        out_i,
    )
    w.write_struct("<ff", float(model.log_tau_semantic), float(model.log_tau_visual))
    w.write_struct("<QQ", model.seed, model.step_count)
    for name, param in model.parameters().items():
        if name.startswith("log_tau"):
            continue  # stored in the header
        w.write_u64(param.size)
        w.write_f32_array(param)


def save_model(model: FieldModel, path) -> None:
    with open(path, "wb") as fh:
        save_model_to(model, fh)


def _read_blob(r: Reader, shape: tuple, what: str) -> np.ndarray:
    expected = int(np.prod(shape)) if shape else 1
    count = r.read_u64(f"{what} length")
    if count != expected:
        raise FormatError(
            f"bad length for {what}: expected {expected}, got {count}", offset=r.offset - 8
        )
    return r.read_f32_array(count, what).reshape(shape)


def load_model_from(fh: BinaryIO) -> FieldModel:
    r = Reader(fh)
    r.expect_magic(MAGIC)
    version = r.read_u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported model version {version}", offset=4)
    levels, features, table_log2, base_res = r.read_struct("<IIII", "grid config")
    (scale,) = r.read_struct("<d", "per-level scale")
    aabb = np.array(r.read_struct("<6d", "aabb")).reshape(2, 3)
    cfg = HashGridConfig(
        levels=levels,
        features=features,
        table_log2=table_log2,
        base_resolution=base_res,
        per_level_scale=scale,
    )
    hidden, out_s, out_v, out_i = r.read_struct("<IIII", "head dims")
    log_tau_s, log_tau_v = r.read_struct("<ff", "temperatures")
    seed, step_count = r.read_struct("<QQ", "training metadata")

    tables = [
        _read_blob(r, (cfg.table_size, cfg.features), f"table {i}") for i in range(levels)
    ]
    d = cfg.output_dim

    def read_head(tag: str, out: int) -> MlpHead:
        return MlpHead(
            w1=_read_blob(r, (d, hidden), f"{tag}.w1"),
            b1=_read_blob(r, (hidden,), f"{tag}.b1"),
            w2=_read_blob(r, (hidden, out), f"{tag}.w2"),
            b2=_read_blob(r, (out,), f"{tag}.b2"),
        )

    head_s = read_head("semantic", out_s)
    head_v = read_head("visual", out_v)
    head_i = read_head("instance", out_i) if out_i else None
    r.expect_eof()
    return FieldModel(
        grid=HashGrid(config=cfg, tables=tables, aabb=aabb),
        head_semantic=head_s,
        head_visual=head_v,
        head_instance=head_i,
        log_tau_semantic=np.array(log_tau_s, dtype=np.float32),
        log_tau_visual=np.array(log_tau_v, dtype=np.float32),
        seed=seed,
        step_count=step_count,
    )


def load_model(path) -> FieldModel:
    with open(path, "rb") as fh:
        return load_model_from(fh)
