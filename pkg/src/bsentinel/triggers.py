"""The six adversary trigger generators and dataset poisoning.

Every realization is a (mask, pattern) pair over C-by-H-by-W pixels in
[0, 1]; injection blends ``(1 - mask) * image + mask * pattern`` and clamps.
Masks are exactly binary for the patch/pixel kinds; the watermark and the
L2-budgeted kind blend fractionally so the injected delta stays bounded for
every possible input image.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

KINDS = ("BadnetsSQ", "BadnetsPX", "TrojanSQ", "TrojanWM", "L2Inv", "L0Inv")

PROVENANCE_CLEAN = "clean"

#: provenance byte codes used by cache files: 0 is clean, 1..6 follow KINDS order
PROVENANCE_CODES = {PROVENANCE_CLEAN: 0, **{kind: i + 1 for i, kind in enumerate(KINDS)}}
PROVENANCE_NAMES = {code: name for name, code in PROVENANCE_CODES.items()}

_KIND_DEFAULTS = {
    "BadnetsSQ": {"square_side": 3},
    "BadnetsPX": {"pixel_count": 3},
    "TrojanSQ": {"square_side": 5},
    "TrojanWM": {"blend_ratio": 0.2},
    "L2Inv": {"l2_budget": 2.0},
    "L0Inv": {"sparsity": 10},
}

_SPEC_FIELDS = ("kind", "seed", "square_side", "pixel_count", "sparsity", "l2_budget", "blend_ratio", "anchor")


class GeometryError(ValueError):
    """Trigger geometry does not fit inside the target image."""


@dataclass(frozen=True)
class TriggerSpec:
    """Declarative description of one attack; fully determines (mask, pattern)."""

    kind: str
    seed: int = 0
    square_side: int = 3
    pixel_count: int = 3
    sparsity: int = 10
    l2_budget: float = 2.0
    blend_ratio: float = 0.2
    anchor: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}, expected one of {KINDS}")
        if self.square_side < 1 or self.pixel_count < 1 or self.sparsity < 1:
            raise ValueError("size parameters must be at least 1")
        if self.l2_budget <= 0:
            raise ValueError(f"l2 budget must be positive, got {self.l2_budget}")
        if not (0.0 < self.blend_ratio <= 1.0):
            raise ValueError(f"blend ratio must be in (0, 1], got {self.blend_ratio}")
        if self.anchor is not None:
            object.__setattr__(self, "anchor", (int(self.anchor[0]), int(self.anchor[1])))

    @classmethod
    def default(cls, kind: str, seed: int = 0) -> "TriggerSpec":
        return cls(kind=kind, seed=seed, **_KIND_DEFAULTS.get(kind, {}))

    def to_json(self) -> dict:
        out = {name: getattr(self, name) for name in _SPEC_FIELDS}
        out["anchor"] = list(self.anchor) if self.anchor is not None else None
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "TriggerSpec":
        unknown = set(obj) - set(_SPEC_FIELDS)
        if unknown:
            raise ValueError(f"unknown TriggerSpec keys: {sorted(unknown)}")
        if "kind" not in obj:
            raise ValueError("TriggerSpec JSON requires a 'kind'")
        kwargs = dict(obj)
        if kwargs.get("anchor") is not None:
            kwargs["anchor"] = tuple(kwargs["anchor"])
        return cls(**kwargs)


def default_specs(seed: int = 0) -> dict[str, TriggerSpec]:
    """One default spec per attack kind, seeded per kind for independence."""
    return {kind: TriggerSpec.default(kind, seed=seed + i) for i, kind in enumerate(KINDS)}


@dataclass(frozen=True)
class TriggerRealization:
    """Concrete mask/pattern pair for a fixed image shape."""

    kind: str
    mask: np.ndarray     # (C, H, W) float32 in [0, 1]
    pattern: np.ndarray  # (C, H, W) float32 in [0, 1]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(self.mask.tobytes())
        h.update(self.pattern.tobytes())
        return h.hexdigest()


def _anchor_for(spec: TriggerSpec, h: int, w: int, side: int) -> tuple[int, int]:
    # default placement: bottom-right corner with a 1-pixel margin
    if spec.anchor is not None:
        top, left = spec.anchor
    else:
        top, left = h - side - 1, w - side - 1
    if top < 0 or left < 0 or top + side > h or left + side > w:
        raise GeometryError(
            f"{spec.kind} square of side {side} at anchor ({top}, {left}) does not fit a {h}x{w} image"
        )
    return top, left


def realize_trigger(spec: TriggerSpec, shape: Sequence[int]) -> TriggerRealization:
    """Produce the deterministic (mask, pattern) pair for one attack kind.

    Same (spec, shape) always yields bit-identical arrays; all randomness
    flows from spec.seed.
    """
    c, h, w = (int(v) for v in shape)
    if c < 1 or h < 1 or w < 1:
        raise GeometryError(f"invalid image shape {tuple(shape)}")
    rng = np.random.default_rng([spec.seed, PROVENANCE_CODES[spec.kind]])
    mask = np.zeros((c, h, w), dtype=np.float32)
    pattern = np.zeros((c, h, w), dtype=np.float32)

    if spec.kind == "BadnetsSQ":
        side = spec.square_side
        top, left = _anchor_for(spec, h, w, side)
        mask[:, top:top + side, left:left + side] = 1.0
        pattern[:, top:top + side, left:left + side] = 1.0

    elif spec.kind == "BadnetsPX":
        positions = _isolated_pixels(rng, spec.pixel_count, h, w)
        for (i, j) in positions:
            mask[:, i, j] = 1.0
            pattern[:, i, j] = 1.0

    elif spec.kind == "TrojanSQ":
        side = spec.square_side
        top, left = _anchor_for(spec, h, w, side)
        ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
        checker = ((ii + jj) % 2).astype(np.float32)
        mask[:, top:top + side, left:left + side] = 1.0
        pattern[:, top:top + side, left:left + side] = checker

    elif spec.kind == "TrojanWM":
        mask[:] = spec.blend_ratio
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        for ch in range(c):
            fi = rng.uniform(1.0, 4.0)
            fj = rng.uniform(1.0, 4.0)
            pi = rng.uniform(0.0, 2.0 * np.pi)
            pj = rng.uniform(0.0, 2.0 * np.pi)
            grid = np.sin(2.0 * np.pi * fi * ii / h + pi) * np.sin(2.0 * np.pi * fj * jj / w + pj)
            pattern[ch] = 0.5 + 0.5 * grid

    elif spec.kind == "L2Inv":
        # Fractional blend with a uniform coefficient chosen so the injected
        # delta is L2-bounded by the budget for every image in [0, 1].
        pattern[:] = rng.random(size=(c, h, w), dtype=np.float32)
        worst = np.maximum(pattern, 1.0 - pattern)
        coeff = min(1.0, spec.l2_budget / float(np.linalg.norm(worst.astype(np.float64))))
        mask[:] = np.float32(coeff)

    elif spec.kind == "L0Inv":
        k = spec.sparsity
        if k > h * w:
            raise GeometryError(f"L0Inv budget {k} exceeds the {h}x{w} pixel count")
        flat = rng.choice(h * w, size=k, replace=False)
        values = rng.random(size=(k, c), dtype=np.float32)
        for idx, pos in enumerate(flat):
            i, j = divmod(int(pos), w)
            mask[:, i, j] = 1.0
            pattern[:, i, j] = values[idx]

    mask.setflags(write=False)
    pattern.setflags(write=False)
    return TriggerRealization(kind=spec.kind, mask=mask, pattern=pattern)


def _isolated_pixels(rng: np.random.Generator, count: int, h: int, w: int) -> list[tuple[int, int]]:
    """Seeded isolated pixels (Chebyshev distance >= 2) near the bottom-right."""
    win = min(8, h - 1, w - 1)
    if win < 1:
        raise GeometryError(f"image {h}x{w} too small for pixel trigger")
    top, left = h - win - 1, w - win - 1
    candidates = [(top + i, left + j) for i in range(win) for j in range(win)]
    order = rng.permutation(len(candidates))
    chosen: list[tuple[int, int]] = []
    for idx in order:
        pos = candidates[idx]
        if all(max(abs(pos[0] - q[0]), abs(pos[1] - q[1])) >= 2 for q in chosen):
            chosen.append(pos)
        if len(chosen) == count:
            return chosen
    raise GeometryError(f"cannot place {count} isolated pixels in a {win}x{win} corner window")


def apply_trigger(image: np.ndarray, realization: TriggerRealization) -> np.ndarray:
    """Blend the trigger into a copy of the image: clamp((1-m)*x + m*t)."""
    if image.shape != realization.mask.shape:
        raise ValueError(f"image shape {image.shape} does not match trigger shape {realization.mask.shape}")
    m = realization.mask
    out = (1.0 - m) * image + m * realization.pattern
    np.clip(out, 0.0, 1.0, out=out)
    return out.astype(np.float32, copy=False)


def poison_label(label: int, target: int, num_classes: int) -> int:
    """All-to-one label generator: every class maps to the target class."""
    if not (0 <= label < num_classes):
        raise ValueError(f"label {label} out of range [0, {num_classes})")
    if not (0 <= target < num_classes):
        raise ValueError(f"target {target} out of range [0, {num_classes})")
    return target


def poison_dataset(dataset, spec: TriggerSpec, rate: float, target: int, seed: int):
    """Poison a seeded fraction of a dataset, tagging every sample.

    Selects round(rate * n) samples without replacement, applies the trigger
    and the all-to-one label map to them, and returns a same-size dataset
    where every sample carries a provenance tag.
    """
    from . import data  # local import to avoid a module cycle

    if not (0.0 < rate <= 1.0):
        raise ValueError(f"poisoning rate must be in (0, 1], got {rate}")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot poison an empty dataset")
    n_modified = int(np.floor(rate * n + 0.5))
    rng = np.random.default_rng([seed, 0x9015])
    selected = set(rng.choice(n, size=n_modified, replace=False).tolist())

    realization = realize_trigger(spec, dataset[0].image.shape)
    samples = []
    for i, sample in enumerate(dataset):
        if i in selected:
            samples.append(
                data.Sample(
                    image=apply_trigger(sample.image, realization),
                    class_label=poison_label(sample.class_label, target, dataset.num_classes),
                    detection_label=1,
                    provenance=spec.kind,
                )
            )
        else:
            samples.append(sample)
    return data.Dataset(samples=samples, num_classes=dataset.num_classes)
