"""Prefix-prompt tuning over the frozen dual-encoder pair.

Only the three prompt rows train. Class text embeddings are recomputed
every batch because the prefix moves every step; image embeddings are read
from a cache because the image encoder never moves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cachefile import EmbeddingCache
from .data import Dataset, batch_indices
from .encoders import ImageEncoder, TextEncoder, Vocabulary, embed_tokens, precompute_image_embeddings, text_encode

PREFIX_WORDS = ("a", "photo", "of")
CLASS_WORDS = ("clean", "backdoored")  # class 0 is clean, class 1 is backdoored

PREFIX_FORMAT = "bsentinel-prefix"
PREFIX_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    scale: float = 100.0
    lr: float = 1e-5
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be at least 1, got {self.batch_size}")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class PrefixState:
    prefix: np.ndarray  # (rows, d_embed) float32, trainable
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int = 0


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    accuracy: float  # percent over the epoch's training samples


def init_prefix(vocab: Vocabulary, words: tuple[str, ...] = PREFIX_WORDS) -> PrefixState:
    """Prefix rows start as the word embeddings of the canonical phrase."""
    rows = embed_tokens(vocab, list(words)).data.copy()
    return PrefixState(
        prefix=rows,
        adam_m=np.zeros_like(rows),
        adam_v=np.zeros_like(rows),
        step=0,
    )


def class_text_embeddings(prefix: Tensor | np.ndarray, enc: TextEncoder, vocab: Vocabulary) -> Tensor:
    """Unit-norm text embeddings for [prefix..., class-word], one row per class.

    Row 0 is the clean class, row 1 backdoored. Differentiable w.r.t. the
    prefix when it is a grad-enabled tensor.
    """
    if not isinstance(prefix, Tensor):
        prefix = Tensor(prefix, dtype=np.asarray(prefix).dtype)
    rows = []
    for word in CLASS_WORDS:
        class_row = Tensor(embed_tokens(vocab, [word]).data, dtype=prefix.data.dtype)
        sequence = ad.concat_rows([prefix, class_row])
        rows.append(ad.l2_normalize(text_encode(enc, sequence)))
    return ad.stack_rows(rows)


def compute_logits(image_vectors: Tensor | np.ndarray, text_vectors: Tensor, scale: float) -> Tensor:
    """Scaled cosine logits: s[j, k] = scale * dot(I_j, T_k)."""
    if not isinstance(image_vectors, Tensor):
        image_vectors = Tensor(image_vectors, dtype=text_vectors.data.dtype)
    if image_vectors.data.ndim != 2 or image_vectors.data.shape[1] != text_vectors.data.shape[1]:
        raise ad.ShapeError(
            f"dim mismatch: images {image_vectors.data.shape} vs text {text_vectors.data.shape}"
        )
    for name, arr in (("image", image_vectors.data), ("text", text_vectors.data)):
        norms = np.linalg.norm(arr.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ValueError(f"{name} embeddings must be unit-norm within 1e-3")
    return ad.scale(ad.matmul(image_vectors, ad.transpose(text_vectors)), scale)


def training_loss(logits: Tensor, detection_labels) -> Tensor:
    labels = np.asarray(detection_labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > 1):
        raise ValueError("detection labels must be 0 (clean) or 1 (backdoored)")
    return ad.cross_entropy_from_logits(logits, labels)


def adam_step(state: PrefixState, grads: np.ndarray, config: TrainConfig) -> PrefixState:
    """One bias-corrected Adam update of the prefix rows only."""
    if grads.shape != state.prefix.shape:
        raise ad.ShapeError(f"gradient shape {grads.shape} does not match prefix {state.prefix.shape}")
    g = grads.astype(state.prefix.dtype)
    step = state.step + 1
    m = config.beta1 * state.adam_m + (1.0 - config.beta1) * g
    v = config.beta2 * state.adam_v + (1.0 - config.beta2) * g * g
    m_hat = m / (1.0 - config.beta1**step)
    v_hat = v / (1.0 - config.beta2**step)
    prefix = state.prefix - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return PrefixState(prefix=prefix, adam_m=m, adam_v=v, step=step)


def fit(train, vocab: Vocabulary, text_enc: TextEncoder, config: TrainConfig,
        image_enc: ImageEncoder | None = None) -> tuple[PrefixState, list[EpochStats]]:
    """Tune the prefix on a tagged dataset or embedding cache.

    Per batch: rebuild the class text embeddings from the current prefix,
    score the cached image embeddings, backpropagate into the prefix alone,
    and take one Adam step. Deterministic given the config seed.
    """
    if isinstance(train, Dataset):
        if image_enc is None:
            raise ValueError("fitting from a raw dataset requires an image encoder")
        cache = precompute_image_embeddings(image_enc, train)
    elif isinstance(train, EmbeddingCache):
        cache = train
    else:
        raise TypeError(f"cannot fit on {type(train).__name__}")
    n = len(cache)
    if n == 0:
        raise ValueError("training set is empty")

    state = init_prefix(vocab)
    labels_all = cache.detection.astype(np.int64)
    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        loss_sum = 0.0
        n_correct = 0
        batches = batch_indices(n, config.batch_size, config.seed, epoch)
        for idx in batches:
            prefix = Tensor(state.prefix, requires_grad=True)
            text_vectors = class_text_embeddings(prefix, text_enc, vocab)
            logits = compute_logits(cache.vectors[idx], text_vectors, config.scale)
            labels = labels_all[idx]
            loss = training_loss(logits, labels)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise FloatingPointError(f"loss diverged to {loss_value} at step {state.step + 1}")
            grads = ad.backward(loss, wrt=[prefix])
            state = adam_step(state, grads[prefix], config)
            loss_sum += loss_value * len(idx)
            n_correct += int(((logits.data[:, 1] > logits.data[:, 0]).astype(np.int64) == labels).sum())
        history.append(
            EpochStats(epoch=epoch, mean_loss=loss_sum / n, accuracy=100.0 * n_correct / n)
        )
    return state, history


# ---------------------------------------------------------------------------
# serialization (exact round trip via 64-bit hex payloads)


def save_prefix(state: PrefixState, path, meta: dict | None = None) -> None:
    payload = {
        name: arr.astype("<f8").tobytes().hex()
        for name, arr in (("prefix", state.prefix), ("adam_m", state.adam_m), ("adam_v", state.adam_v))
    }
    doc = {
        "format": PREFIX_FORMAT,
        "version": PREFIX_VERSION,
        "rows": int(state.prefix.shape[0]),
        "dim": int(state.prefix.shape[1]),
        "step": int(state.step),
        "meta": meta or {},
        "payload": payload,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_prefix(path) -> tuple[PrefixState, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != PREFIX_FORMAT:
        raise ValueError(f"not a prefix file: format {doc.get('format')!r}")
    if doc.get("version") != PREFIX_VERSION:
        raise ValueError(f"unsupported prefix file version {doc.get('version')}")
    shape = (doc["rows"], doc["dim"])

    def unhex(name):
        arr = np.frombuffer(bytes.fromhex(doc["payload"][name]), dtype="<f8")
        return arr.reshape(shape).astype(np.float32)

    state = PrefixState(
        prefix=unhex("prefix"),
        adam_m=unhex("adam_m"),
        adam_v=unhex("adam_v"),
        step=int(doc["step"]),
    )
    return state, doc.get("meta", {})
