"""Surrogate encoders: white-box image/text feature extractors with exact
gradients, plus seeded analytic reference encoders so the whole pipeline is
testable without pretrained checkpoints.

The reference image encoder is a fixed random linear map whose weights come
from the package's counter-based PRNG (see :mod:`vlmattack.rng`), so two
instances with the same seed and dimensions are bit-identical on any
platform.  The reference text encoder is a hashing bag-of-tokens: lowercase,
split on whitespace, FNV-1a 64-bit hash of each token into one of
``embed_dim`` buckets, count, L2-normalize.

Adapters for real pretrained encoders (CLIP / BLIP families) implement the
same two interfaces, own their resize/crop/normalize preprocessing, and are
registered by name next to the reference encoders.
"""

from __future__ import annotations

import re
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng
from .errors import EncoderError
from .imagecore import PixelImage

NORM_TOLERANCE = 1e-6
MIN_NORM = 1e-12

# stream label separating encoder-weight draws from other uses of a seed
_WEIGHT_STREAM = 0x57454947


def reference_weight(
    seed: int, embed_dim: int, height: int, width: int
) -> np.ndarray:
    """The (embed_dim, H*W*3) standard-normal weight matrix for a seed.

    This is the exact stream the reference encoders draw from, exposed so
    fixtures can build correlated components without private state.
    """
    key = rng.derive_key(seed, _WEIGHT_STREAM, embed_dim, height, width)
    return rng.normals(key, (embed_dim, height * width * 3))


@dataclass(frozen=True)
class EmbeddingVector:
    """A 1-D feature vector; ``normalized`` asserts unit L2 norm."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise EncoderError(f"embedding must be a nonempty vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise EncoderError("embedding values must all be finite")
        if self.normalized and abs(np.linalg.norm(arr) - 1.0) > NORM_TOLERANCE:
            raise EncoderError(
                f"normalized embedding has norm {np.linalg.norm(arr)!r}"
            )
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def normalize_vector(values: np.ndarray) -> np.ndarray:
    """L2-normalize; vectors with norm < 1e-12 are rejected, never NaN'd."""
    norm = float(np.linalg.norm(values))
    if norm < MIN_NORM:
        raise EncoderError(f"cannot normalize near-zero vector (norm {norm})")
    return np.asarray(values, dtype=np.float64) / norm


class ImageEncoder(ABC):
    """Deterministic image feature extractor with an exact VJP."""

    name: str
    embed_dim: int

    @abstractmethod
    def encode(self, x: PixelImage) -> EmbeddingVector: ...

    @abstractmethod
    def vjp(self, x: PixelImage, cotangent: np.ndarray) -> np.ndarray:
        """Gradient of <encode(x), cotangent> with respect to x's pixels."""


class TextEncoder(ABC):
    """Deterministic text feature extractor; identical strings map to
    identical embeddings."""

    name: str
    embed_dim: int

    @abstractmethod
    def encode(self, text: str) -> EmbeddingVector: ...


class ReferenceLinearImageEncoder(ImageEncoder):
    """Fixed random linear map W of shape (embed_dim, H*W*3).

    ``normalize_output`` selects between raw features W @ flatten(x) and
    their L2-normalized form.  The unnormalized variant has the closed-form
    gradient W^T c, which the optimizer tests exploit.
    """

    def __init__(
        self,
        embed_dim: int,
        height: int,
        width: int,
        seed: int = 0,
        normalize_output: bool = True,
        weight: np.ndarray | None = None,
        name: str | None = None,
        center_rows: bool = False,
    ):
        if embed_dim < 1:
            raise EncoderError(f"embed_dim must be positive, got {embed_dim}")
        n_in = height * width * 3
        if weight is None:
            weight = reference_weight(seed, embed_dim, height, width)
        else:
            weight = np.asarray(weight, dtype=np.float64)
            if weight.shape != (embed_dim, n_in):
                raise EncoderError(
                    f"weight shape {weight.shape} != ({embed_dim}, {n_in})"
                )
        if center_rows:
            # zero-mean rows make features invariant to global brightness
            weight = weight - weight.mean(axis=1, keepdims=True)
        weight = weight.copy()
        weight.setflags(write=False)
        self.weight = weight
        self.embed_dim = embed_dim
        self.height = height
        self.width = width
        self.seed = seed
        self.normalize_output = normalize_output
        self.name = name or f"ref-linear-{embed_dim}"

    def _check_shape(self, x: PixelImage) -> None:
        if (x.height, x.width) != (self.height, self.width):
            raise EncoderError(
                f"{self.name} expects {self.height}x{self.width} images, "
                f"got {x.height}x{x.width}"
            )

    def encode(self, x: PixelImage) -> EmbeddingVector:
        self._check_shape(x)
        feats = self.weight @ x.flatten()
        if self.normalize_output:
            return EmbeddingVector(normalize_vector(feats), normalized=True)
        return EmbeddingVector(feats, normalized=False)

    def vjp(self, x: PixelImage, cotangent: np.ndarray) -> np.ndarray:
        self._check_shape(x)
        c = np.asarray(cotangent, dtype=np.float64)
        if c.shape != (self.embed_dim,):
            raise EncoderError(
                f"cotangent shape {c.shape} != ({self.embed_dim},)"
            )
        if not self.normalize_output:
            grad_flat = self.weight.T @ c
        else:
            # s = (v/|v|)^T c with v = W x:
            # ds/dv = (c - (v_hat . c) v_hat) / |v|
            v = self.weight @ x.flatten()
            norm = float(np.linalg.norm(v))
            if norm < MIN_NORM:
                raise EncoderError("gradient undefined at near-zero feature vector")
            v_hat = v / norm
            grad_flat = self.weight.T @ ((c - np.dot(v_hat, c) * v_hat) / norm)
        return grad_flat.reshape(x.shape)


def blended_linear_encoder(
    embed_dim: int,
    height: int,
    width: int,
    shared_seed: int,
    private_seed: int,
    share: float,
    normalize_output: bool = True,
    name: str | None = None,
    center_rows: bool = False,
) -> ReferenceLinearImageEncoder:
    """Linear encoder whose weight mixes a shared and a private stream:
    W = sqrt(share) * G(shared_seed) + sqrt(1 - share) * G(private_seed).

    Entries stay standard normal, and two encoders built on the same
    shared stream have weight correlation ``sqrt(share_a * share_b)``;
    this is how the toy rig models imperfect surrogate/victim similarity.
    """
    if not 0.0 <= share <= 1.0:
        raise EncoderError(f"share must lie in [0, 1], got {share}")
    weight = np.sqrt(share) * reference_weight(
        shared_seed, embed_dim, height, width
    ) + np.sqrt(1.0 - share) * reference_weight(
        private_seed, embed_dim, height, width
    )
    return ReferenceLinearImageEncoder(
        embed_dim,
        height,
        width,
        seed=private_seed,
        normalize_output=normalize_output,
        weight=weight,
        name=name or f"ref-linear-{embed_dim}",
        center_rows=center_rows,
    )


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; the documented token hash of the text encoder."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


class HashingTextEncoder(TextEncoder):
    """Bag-of-tokens embedding: token counts hashed into embed_dim buckets.

    Deterministic and order-invariant; bucket(token) =
    fnv1a64(utf8(token)) % embed_dim on the lowercased whitespace split.
    """

    def __init__(self, embed_dim: int, name: str | None = None):
        if embed_dim < 1:
            raise EncoderError(f"embed_dim must be positive, got {embed_dim}")
        self.embed_dim = embed_dim
        self.name = name or f"ref-hash-{embed_dim}"

    def bucket(self, token: str) -> int:
        return fnv1a64(token.lower().encode("utf-8")) % self.embed_dim

    def encode(self, text: str) -> EmbeddingVector:
        tokens = text.lower().split()
        if not tokens:
            raise EncoderError("cannot encode empty text")
        counts = np.zeros(self.embed_dim, dtype=np.float64)
        for tok in tokens:
            counts[fnv1a64(tok.encode("utf-8")) % self.embed_dim] += 1.0
        return EmbeddingVector(normalize_vector(counts), normalized=True)


def encode_image(enc: ImageEncoder, x: PixelImage) -> EmbeddingVector:
    return enc.encode(x)


def encode_text(enc: TextEncoder, text: str) -> EmbeddingVector:
    if not text.strip():
        raise EncoderError("cannot encode empty text")
    return enc.encode(text)


def similarity_vjp(
    enc: ImageEncoder, x: PixelImage, target: EmbeddingVector
) -> np.ndarray:
    """Gradient of s(x) = <encode(x), target> with respect to x."""
    if target.dim != enc.embed_dim:
        raise EncoderError(
            f"target dim {target.dim} != encoder embed_dim {enc.embed_dim}"
        )
    return enc.vjp(x, target.values)


# ---------------------------------------------------------------------------
# Registry.  Reference encoders are addressed as "ref-linear-<d>" and
# "ref-hash-<d>"; adapters for pretrained models register their own names.

_REF_LINEAR = re.compile(r"^ref-linear-(\d+)$")
_REF_HASH = re.compile(r"^ref-hash-(\d+)$")

_image_factories: dict[str, Callable[..., ImageEncoder]] = {}
_text_factories: dict[str, Callable[..., TextEncoder]] = {}


def register_image_encoder(name: str, factory: Callable[..., ImageEncoder]) -> None:
    _image_factories[name] = factory


def register_text_encoder(name: str, factory: Callable[..., TextEncoder]) -> None:
    _text_factories[name] = factory


def create_image_encoder(
    name: str,
    height: int,
    width: int,
    seed: int = 0,
    normalize: bool = True,
    shared_seed: int | None = None,
    share: float | None = None,
    center: bool = False,
    **extra,
) -> ImageEncoder:
    """Build an image encoder from a registry name plus its settings.

    ``shared_seed``/``share`` switch the reference encoder to the blended
    construction used for correlated surrogate/victim pairs; ``center``
    zero-means each weight row (brightness-invariant features).
    """
    m = _REF_LINEAR.match(name)
    if m:
        dim = int(m.group(1))
        if shared_seed is not None:
            return blended_linear_encoder(
                dim, height, width, shared_seed, seed,
                share if share is not None else 1.0,
                normalize_output=normalize, name=name, center_rows=center,
            )
        return ReferenceLinearImageEncoder(
            dim, height, width, seed=seed, normalize_output=normalize,
            name=name, center_rows=center,
        )
    if name in _image_factories:
        return _image_factories[name](
            height=height, width=width, seed=seed, normalize=normalize, **extra
        )
    raise EncoderError(f"unknown image encoder {name!r}")


def create_text_encoder(name: str, **extra) -> TextEncoder:
    m = _REF_HASH.match(name)
    if m:
        return HashingTextEncoder(int(m.group(1)), name=name)
    if name in _text_factories:
        return _text_factories[name](**extra)
    raise EncoderError(f"unknown text encoder {name!r}")
