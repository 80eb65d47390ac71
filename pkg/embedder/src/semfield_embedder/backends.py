"""Embedding backends, pluggable by name.

The offline defaults need no downloaded weights and are fully
deterministic: text is embedded through salted hashed character trigrams,
and the vision backend maps image regions to a color+shape signature
embedded in the same hashed space as its own text encoder, so labels and
regions are directly comparable.  The usual pretrained model names are
registered too but refuse to run until their weights exist locally; select
backends with --text-model / --vision-model.

Hashed-trigram similarity is orthographic, not semantic: words sharing
letter trigrams score above unrelated words, synonyms spelled differently
score near zero.  Good enough for deterministic pipelines and fixtures;
swap in real encoders for open-vocabulary behavior.
"""

from hashlib import blake2b

import numpy as np

from .blobs import find_blobs, nearest_color_name, shape_of
from .errors import InputError, ModelError

TEXT_DIM = 768
VISION_DIM = 512

# object name -> "color shape" signature the offline detector can see
PROTOTYPES = {
    "chair": "brown tall",
    "table": "brown wide",
    "box": "brown square",
    "crate": "red square",
    "bin": "green square",
    "drum": "blue tall",
    "monitor": "black wide",
    "door": "brown tall",
    "cushion": "purple square",
    "cone": "orange tall",
}


def _features(text: str) -> list:
    words = [w for w in "".join(
        c if c.isalnum() else " " for c in text.lower()).split() if w]
    if not words:
        raise InputError(f"no alphanumeric content in {text!r}")
    feats = []
    for word in words:
        feats.append("=" + word)
        padded = f"^{word}$"
        feats.extend(padded[i:i + 3] for i in range(len(padded) - 2))
    return feats


def _hashed_embedding(feats, dim: int, salt: bytes) -> np.ndarray:
    v = np.zeros(dim, dtype=np.float64)
    for feat in feats:
        digest = blake2b(feat.encode("utf-8"), digest_size=9, key=salt).digest()
        index = int.from_bytes(digest[:8], "little") % dim
        v[index] += 1.0 if digest[8] & 1 else -1.0
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ModelError(f"degenerate hashed embedding for {feats!r}")
    return (v / norm).astype(np.float32)


class HashedTrigramText:
    """Sentence-encoder stand-in: 768-d hashed character trigrams."""

    name = "hashed-trigram"
    dim = TEXT_DIM

    def embed(self, texts) -> np.ndarray:
        if not texts:
            raise InputError("nothing to embed: empty text list")
        return np.stack([
            _hashed_embedding(_features(t), self.dim, b"text-v1") for t in texts
        ])


class ColorPrototypeVision:
    """Image/text joint-space stand-in: 512-d hashed space.

    Labels embed via their PROTOTYPES signature when they have one (their
    own spelling otherwise); a region embeds via its observed color+shape
    signature.  A region therefore scores cosine 1.0 against exactly the
    labels whose prototype it matches.
    """

    name = "color-prototype"
    dim = VISION_DIM

    def embed_texts(self, texts) -> np.ndarray:
        if not texts:
            raise InputError("nothing to embed: empty text list")
        return np.stack([
            _hashed_embedding(_features(t), self.dim, b"vision-v1") for t in texts
        ])

    def embed_labels(self, labels) -> np.ndarray:
        return self.embed_texts([
            PROTOTYPES.get(label.strip().lower(), label) for label in labels
        ])

    def region_signature(self, rgb: np.ndarray, mask: np.ndarray) -> str:
        if not mask.any():
            raise InputError("empty region mask")
        ys, xs = np.nonzero(mask)
        bbox = (int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1)
        color = nearest_color_name(rgb[mask].astype(np.float64).mean(axis=0))
        return f"{color} {shape_of(bbox)}"

    def embed_region(self, rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return self.embed_texts([self.region_signature(rgb, mask)])[0]

    def embed_image(self, rgb: np.ndarray) -> np.ndarray:
        """Whole-image query embedding: the dominant salient region, or the
        global mean color on images with no salient blob."""
        blobs = find_blobs(rgb, min_area=1)
        if blobs:
            return self.embed_region(rgb, blobs[0].mask)
        color = nearest_color_name(np.asarray(rgb, np.float64).mean(axis=(0, 1)))
        return self.embed_texts([f"{color} square"])[0]


class _Unavailable:
    """Placeholder for well-known pretrained models with no local weights."""

    def __init__(self, name: str, kind: str):
        self.name = name
        self._kind = kind

    def _refuse(self, *_args, **_kwargs):
        raise ModelError(
            f"{self._kind} backend {self.name!r} needs locally installed "
            f"model weights, which this environment does not provide; the "
            f"offline default is available instead"
        )

    embed = embed_texts = embed_labels = embed_region = embed_image = _refuse


TEXT_BACKENDS = {
    "hashed-trigram": HashedTrigramText,
    "all-mpnet-base-v2": lambda: _Unavailable("all-mpnet-base-v2", "text"),
}

VISION_BACKENDS = {
    "color-prototype": ColorPrototypeVision,
    "clip-vit-b32": lambda: _Unavailable("clip-vit-b32", "vision"),
    "detic-clip-swinb": lambda: _Unavailable("detic-clip-swinb", "vision"),
}

DEFAULT_TEXT = "hashed-trigram"
DEFAULT_VISION = "color-prototype"


def text_backend(name: str = DEFAULT_TEXT):
    try:
        return TEXT_BACKENDS[name]()
    except KeyError:
        raise ModelError(
            f"unknown text backend {name!r}; available: "
            f"{', '.join(sorted(TEXT_BACKENDS))}"
        ) from None


def vision_backend(name: str = DEFAULT_VISION):
    try:
        return VISION_BACKENDS[name]()
    except KeyError:
        raise ModelError(
            f"unknown vision backend {name!r}; available: "
            f"{', '.join(sorted(VISION_BACKENDS))}"
        ) from None
