"""Frozen vision-language encoder pair at desk scale.

The text encoder is a small pre-LN transformer (differentiable through the
tape so prefix gradients can flow); the image encoder is a patch MLP that
never needs gradients. Both are seeded, deterministic, and frozen: no
weight ever receives a gradient or changes after construction.

Word-embedding rows are initialized at a deliberately small scale. Layer
normalization makes the encoder scale-invariant per row, so this does not
change what functions are expressible; it only means a fixed optimizer
step rotates prompt rows faster, keeping desk-scale training budgets short.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .cachefile import CANONICAL_TOKENS, EmbeddingCache
from .triggers import PROVENANCE_CODES


class ConfigError(ValueError):
    """Encoder configuration is internally inconsistent."""


class UnknownTokenError(KeyError):
    """Word is not present in the vocabulary."""


@dataclass(frozen=True)
class EncoderConfig:
    d_embed: int = 64
    d_joint: int = 64
    layers: int = 2
    heads: int = 2
    d_ff: int = 256
    max_len: int = 16
    image_shape: tuple[int, int, int] = (3, 32, 32)
    patch: int = 4
    image_hidden: int = 128
    embed_scale: float = 3e-4

    def __post_init__(self):
        if min(self.d_embed, self.d_joint, self.layers, self.heads, self.d_ff,
               self.max_len, self.patch, self.image_hidden) < 1:
            raise ConfigError("all encoder dimensions must be positive")
        if self.d_embed % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide embed width ({self.d_embed})")
        c, h, w = self.image_shape
        if c < 1 or h % self.patch != 0 or w % self.patch != 0:
            raise ConfigError(f"image shape {self.image_shape} not divisible into {self.patch}x{self.patch} patches")
        if self.embed_scale <= 0:
            raise ConfigError("embed scale must be positive")


@dataclass
class Vocabulary:
    tokens: tuple[str, ...]
    table: np.ndarray  # (V, d_embed) float32
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.table = np.asarray(self.table, dtype=np.float32)
        self.table.setflags(write=False)

    @property
    def d_embed(self) -> int:
        return self.table.shape[1]


@dataclass
class LayerParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray


@dataclass
class TextEncoder:
    config: EncoderConfig
    pos: np.ndarray  # (max_len, d_embed)
    layers: list[LayerParams]
    ln_f_g: np.ndarray
    ln_f_b: np.ndarray
    w_proj: np.ndarray  # (d_embed, d_joint)
    frozen: bool = True


@dataclass
class ImageEncoder:
    config: EncoderConfig
    w1: np.ndarray  # (patch_dim, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, hidden)
    b2: np.ndarray
    w_proj: np.ndarray  # (hidden, d_joint)
    frozen: bool = True


def _freeze(*arrays: np.ndarray) -> None:
    for arr in arrays:
        arr.setflags(write=False)


def build_toy_encoders(config: EncoderConfig, seed: int) -> tuple[Vocabulary, TextEncoder, ImageEncoder]:
    """Seeded scaled-Gaussian initialization of the whole frozen stack."""
    rng = np.random.default_rng([seed, 0xE0C])
    d, dj = config.d_embed, config.d_joint

    table = (rng.standard_normal((len(CANONICAL_TOKENS), d)) * config.embed_scale).astype(np.float32)
    vocab = Vocabulary(tokens=CANONICAL_TOKENS, table=table)

    text_enc = _build_text_encoder(config, rng)

    patch_dim = config.image_shape[0] * config.patch * config.patch
    hid = config.image_hidden
    image_enc = ImageEncoder(
        config=config,
        w1=(rng.standard_normal((patch_dim, hid)) / np.sqrt(patch_dim)).astype(np.float32),
        b1=np.zeros(hid, dtype=np.float32),
        w2=(rng.standard_normal((hid, hid)) / np.sqrt(hid)).astype(np.float32),
        b2=np.zeros(hid, dtype=np.float32),
        w_proj=(rng.standard_normal((hid, dj)) / np.sqrt(hid)).astype(np.float32),
    )
    _freeze(image_enc.w1, image_enc.b1, image_enc.w2, image_enc.b2, image_enc.w_proj)
    return vocab, text_enc, image_enc


def _build_text_encoder(config: EncoderConfig, rng: np.random.Generator) -> TextEncoder:
    d = config.d_embed
    layers = []
    for _ in range(config.layers):
        params = LayerParams(
            ln1_g=np.ones(d, dtype=np.float32),
            ln1_b=np.zeros(d, dtype=np.float32),
            wq=(rng.standard_normal((d, d)) / np.sqrt(d)).astype(np.float32),
            bq=np.zeros(d, dtype=np.float32),
            wk=(rng.standard_normal((d, d)) / np.sqrt(d)).astype(np.float32),
            bk=np.zeros(d, dtype=np.float32),
            wv=(rng.standard_normal((d, d)) / np.sqrt(d)).astype(np.float32),
            bv=np.zeros(d, dtype=np.float32),
            wo=(rng.standard_normal((d, d)) / np.sqrt(d)).astype(np.float32),
            bo=np.zeros(d, dtype=np.float32),
            ln2_g=np.ones(d, dtype=np.float32),
            ln2_b=np.zeros(d, dtype=np.float32),
            w_ff1=(rng.standard_normal((d, config.d_ff)) / np.sqrt(d)).astype(np.float32),
            b_ff1=np.zeros(config.d_ff, dtype=np.float32),
            w_ff2=(rng.standard_normal((config.d_ff, d)) / np.sqrt(config.d_ff)).astype(np.float32),
            b_ff2=np.zeros(d, dtype=np.float32),
        )
        _freeze(*(getattr(params, f) for f in params.__dataclass_fields__))
        layers.append(params)

    enc = TextEncoder(
        config=config,
        pos=(rng.standard_normal((config.max_len, d)) * config.embed_scale).astype(np.float32),
        layers=layers,
        ln_f_g=np.ones(d, dtype=np.float32),
        ln_f_b=np.zeros(d, dtype=np.float32),
        w_proj=(rng.standard_normal((d, config.d_joint)) / np.sqrt(d)).astype(np.float32),
    )
    _freeze(enc.pos, enc.ln_f_g, enc.ln_f_b, enc.w_proj)
    return enc


def build_import_encoders(cache: EmbeddingCache, seed: int = 0,
                          layers: int = 2, heads: int = 2) -> tuple[Vocabulary, TextEncoder]:
    """Encoder pair for imported embeddings: the vocabulary table comes from
    the cache's token section and the text encoder is seeded at the imported
    widths. Images are never encoded locally in this mode."""
    if cache.token_vectors is None:
        raise ConfigError("imported cache has no token-embedding section")
    d = int(cache.token_dim)
    config = EncoderConfig(d_embed=d, d_joint=int(cache.dim), layers=layers, heads=heads,
                           d_ff=4 * d, max_len=16)
    table = np.zeros((len(CANONICAL_TOKENS), d), dtype=np.float32)
    for i, word in enumerate(CANONICAL_TOKENS):
        table[i] = cache.token_row(word)
    vocab = Vocabulary(tokens=CANONICAL_TOKENS, table=table)
    rng = np.random.default_rng([seed, 0xE0C, 1])
    return vocab, _build_text_encoder(config, rng)


# ---------------------------------------------------------------------------
# forward passes


def embed_tokens(vocab: Vocabulary, words: Sequence[str]) -> Tensor:
    """Look up word-embedding rows, in order; the result is not trainable."""
    rows = []
    for word in words:
        if word not in vocab.index:
            raise UnknownTokenError(word)
        rows.append(vocab.table[vocab.index[word]])
    return Tensor(np.stack(rows, axis=0), dtype=np.float32)


def text_encode(enc: TextEncoder, token_embeddings: Tensor) -> Tensor:
    """Map a sequence of token embeddings to one unnormalized joint-space
    vector; differentiable w.r.t. the input rows."""
    x = token_embeddings
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ValueError(f"text_encode expects a non-empty n-by-d matrix, got shape {x.data.shape}")
    n, d = x.data.shape
    if d != enc.config.d_embed:
        raise ShapeError(f"token width {d} does not match encoder width {enc.config.d_embed}")
    if n > enc.config.max_len:
        raise ValueError(f"sequence length {n} exceeds encoder max length {enc.config.max_len}")

    dtype = x.data.dtype
    wrap = lambda a: Tensor(a, dtype=dtype)
    heads = enc.config.heads
    head_dim = d // heads
    inv_sqrt = 1.0 / np.sqrt(head_dim)

    x = ad.add(x, wrap(enc.pos[:n]))
    for p in enc.layers:
        h = ad.layer_norm(x, wrap(p.ln1_g), wrap(p.ln1_b), eps=1e-5)
        q = ad.add_bias(ad.matmul(h, wrap(p.wq)), wrap(p.bq))
        k = ad.add_bias(ad.matmul(h, wrap(p.wk)), wrap(p.bk))
        v = ad.add_bias(ad.matmul(h, wrap(p.wv)), wrap(p.bv))
        outs = []
        for i in range(heads):
            lo, hi = i * head_dim, (i + 1) * head_dim
            qi = ad.slice_cols(q, lo, hi)
            ki = ad.slice_cols(k, lo, hi)
            vi = ad.slice_cols(v, lo, hi)
            attn = ad.softmax_rows(ad.scale(ad.matmul(qi, ad.transpose(ki)), inv_sqrt))
            outs.append(ad.matmul(attn, vi))
        merged = outs[0] if len(outs) == 1 else ad.concat_cols(outs)
        x = ad.add(x, ad.add_bias(ad.matmul(merged, wrap(p.wo)), wrap(p.bo)))

        h2 = ad.layer_norm(x, wrap(p.ln2_g), wrap(p.ln2_b), eps=1e-5)
        ff = ad.gelu(ad.add_bias(ad.matmul(h2, wrap(p.w_ff1)), wrap(p.b_ff1)))
        x = ad.add(x, ad.add_bias(ad.matmul(ff, wrap(p.w_ff2)), wrap(p.b_ff2)))

    x = ad.layer_norm(x, wrap(enc.ln_f_g), wrap(enc.ln_f_b), eps=1e-5)
    pooled = ad.mean_rows(x)
    return ad.vecmat(pooled, wrap(enc.w_proj))


def _patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, num_patches, C * patch * patch)."""
    b, c, h, w = images.shape
    grid_h, grid_w = h // patch, w // patch
    x = images.reshape(b, c, grid_h, patch, grid_w, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, grid_h * grid_w, c * patch * patch)


def encode_images(enc: ImageEncoder, images: np.ndarray) -> np.ndarray:
    """Vectorized frozen forward pass: (B, C, H, W) -> (B, d_joint), unnormalized.

    Max pooling over patches keeps localized trigger activations visible in
    the pooled feature; mean pooling would dilute a small patch to noise.
    """
    if images.ndim != 4 or images.shape[1:] != enc.config.image_shape:
        raise ShapeError(f"image batch shape {images.shape} does not match {enc.config.image_shape}")
    patches = _patchify(images.astype(np.float32), enc.config.patch)
    h = np.maximum(patches @ enc.w1 + enc.b1, 0.0)
    h = np.maximum(h @ enc.w2 + enc.b2, 0.0)
    pooled = h.max(axis=1)
    return pooled @ enc.w_proj


def image_encode(enc: ImageEncoder, image: np.ndarray) -> np.ndarray:
    """Single-image joint-space vector, unnormalized and deterministic."""
    if image.shape != enc.config.image_shape:
        raise ShapeError(f"image shape {image.shape} does not match encoder shape {enc.config.image_shape}")
    return encode_images(enc, image[None])[0]


def precompute_image_embeddings(enc: ImageEncoder, dataset, batch_size: int = 256) -> EmbeddingCache:
    """Encode and L2-normalize every sample once; f_I is frozen so the cache
    is exact and reusable across epochs."""
    n = len(dataset)
    if n == 0:
        return EmbeddingCache.empty(enc.config.d_joint)
    vectors = np.empty((n, enc.config.d_joint), dtype=np.float32)
    for start in range(0, n, batch_size):
        block = np.stack([dataset[i].image for i in range(start, min(start + batch_size, n))])
        raw = encode_images(enc, block).astype(np.float64)
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms <= 1e-12):
            raise FloatingPointError("image encoder produced a zero-norm embedding")
        vectors[start:start + len(block)] = (raw / norms).astype(np.float32)
    return EmbeddingCache(
        dim=enc.config.d_joint,
        ids=np.arange(n, dtype=np.uint64),
        provenance=np.array([PROVENANCE_CODES[dataset[i].provenance] for i in range(n)], dtype=np.uint8),
        detection=np.array([dataset[i].detection_label for i in range(n)], dtype=np.uint8),
        vectors=vectors,
    )


# ---------------------------------------------------------------------------
# frozen-weight auditing


def _text_encoder_arrays(enc: TextEncoder) -> list[np.ndarray]:
    arrays = [enc.pos]
    for p in enc.layers:
        arrays.extend(getattr(p, f) for f in p.__dataclass_fields__)
    arrays.extend([enc.ln_f_g, enc.ln_f_b, enc.w_proj])
    return arrays


def weights_hash(vocab: Vocabulary, text_enc: TextEncoder,
                 image_enc: ImageEncoder | None = None) -> str:
    """SHA-256 over every weight array in a fixed order."""
    digest = hashlib.sha256()
    digest.update(vocab.table.tobytes())
    for arr in _text_encoder_arrays(text_enc):
        digest.update(arr.tobytes())
    if image_enc is not None:
        for arr in (image_enc.w1, image_enc.b1, image_enc.w2, image_enc.b2, image_enc.w_proj):
            digest.update(arr.tobytes())
    return digest.hexdigest()
