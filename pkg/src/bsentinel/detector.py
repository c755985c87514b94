"""Inference-time detection and the experiment harnesses: leave-one-attack-out,
cross-dataset generalization, and the static-prefix ablation.

Similarity scores are computed in float64 so the argmax decision is invariant
to the logit scale; exact ties break toward clean.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cachefile import EmbeddingCache, concat_caches
from .data import Dataset, LooPlan, loo_source_partition
from .encoders import ImageEncoder, TextEncoder, Vocabulary, precompute_image_embeddings
from .triggers import KINDS, PROVENANCE_CODES, TriggerSpec
from .tuner import PrefixState, TrainConfig, class_text_embeddings, fit, init_prefix

CLASS_NAMES = ("clean", "backdoored")
DEFAULT_SEEDS = (0, 1, 2)
METHOD_LEARNED = "learned-prefix"
METHOD_STATIC = "static-prefix"


@dataclass
class Detector:
    """Frozen prefix plus the text embeddings computed from it once."""

    text_vectors: np.ndarray  # (2, d_joint) unit rows
    scale: float
    prefix: np.ndarray
    step_count: int

    def __post_init__(self):
        self.text_vectors = np.asarray(self.text_vectors, dtype=np.float64)
        self.text_vectors.setflags(write=False)


def build_detector(state: PrefixState, text_enc: TextEncoder, vocab: Vocabulary,
                   scale: float = 100.0) -> Detector:
    text_vectors = class_text_embeddings(state.prefix, text_enc, vocab).data
    return Detector(
        text_vectors=text_vectors,
        scale=float(scale),
        prefix=state.prefix.copy(),
        step_count=state.step,
    )


def decision_scores(det: Detector, vectors: np.ndarray) -> np.ndarray:
    """Scaled similarity scores (n, 2) in float64; the margin between columns
    is the debug output backing every prediction."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim == 1:
        vectors = vectors[None]
    if vectors.shape[1] != det.text_vectors.shape[1]:
        raise ValueError(
            f"dim mismatch: embeddings are {vectors.shape[1]}-d, detector is {det.text_vectors.shape[1]}-d"
        )
    return det.scale * (vectors @ det.text_vectors.T)


def predict(det: Detector, vector: np.ndarray) -> int:
    """0 (clean) or 1 (backdoored) by highest similarity; ties go to clean."""
    s = decision_scores(det, vector)[0]
    return int(s[1] > s[0])


def predict_batch(det: Detector, vectors: np.ndarray) -> np.ndarray:
    s = decision_scores(det, vectors)
    return (s[:, 1] > s[:, 0]).astype(np.int64)


@dataclass
class EvalResult:
    accuracy: float  # percent
    n_total: int
    n_clean_correct: int
    n_clean_total: int
    n_backdoor_correct: int
    n_backdoor_total: int

    @property
    def clean_recall(self) -> float:
        return 100.0 * self.n_clean_correct / self.n_clean_total if self.n_clean_total else 0.0

    @property
    def backdoor_recall(self) -> float:
        return 100.0 * self.n_backdoor_correct / self.n_backdoor_total if self.n_backdoor_total else 0.0

    @property
    def confusion(self) -> dict[str, int]:
        return {
            "clean_as_clean": self.n_clean_correct,
            "clean_as_backdoored": self.n_clean_total - self.n_clean_correct,
            "backdoored_as_backdoored": self.n_backdoor_correct,
            "backdoored_as_clean": self.n_backdoor_total - self.n_backdoor_correct,
        }

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "clean_recall": self.clean_recall,
            "backdoor_recall": self.backdoor_recall,
            "confusion": self.confusion,
            "n_total": self.n_total,
        }


def evaluate(det: Detector, test, image_enc: ImageEncoder | None = None) -> EvalResult:
    """Accuracy and confusion counts over a tagged cache or dataset."""
    if isinstance(test, Dataset):
        if image_enc is None:
            raise ValueError("evaluating a raw dataset requires an image encoder")
        test = precompute_image_embeddings(image_enc, test)
    if not isinstance(test, EmbeddingCache):
        raise TypeError(f"cannot evaluate on {type(test).__name__}")
    if len(test) == 0:
        raise ValueError("test set is empty")
    preds = predict_batch(det, test.vectors)
    labels = test.detection.astype(np.int64)
    clean = labels == 0
    backdoor = labels == 1
    correct = preds == labels
    return EvalResult(
        accuracy=100.0 * float(correct.mean()),
        n_total=len(test),
        n_clean_correct=int(correct[clean].sum()),
        n_clean_total=int(clean.sum()),
        n_backdoor_correct=int(correct[backdoor].sum()),
        n_backdoor_total=int(backdoor.sum()),
    )


# ---------------------------------------------------------------------------
# cache-level leave-one-out selection (mirrors the dataset builders)


def _rows_by_id(cache: EmbeddingCache, mask: np.ndarray) -> dict[int, int]:
    rows = np.nonzero(mask)[0]
    return {int(cache.ids[r]): int(r) for r in rows}


def select_loo_training_cache(cache: EmbeddingCache, plan: LooPlan) -> EmbeddingCache:
    """Balanced training selection from a full cache holding clean records
    plus every attack applied to every clean image.

    Uses the same seeded source partition as the dataset-level builder, so
    both routes draw identical source images.
    """
    clean_rows = np.nonzero(cache.provenance == 0)[0]
    n = len(clean_rows)
    if n == 0:
        raise ValueError("cache has no clean records")
    clean_ids = cache.ids[clean_rows]
    partition = loo_source_partition(n, plan.training_attacks, plan.seed)

    pieces = [cache.subset(clean_rows)]
    for kind in plan.training_attacks:
        by_id = _rows_by_id(cache, cache.provenance == PROVENANCE_CODES[kind])
        rows = []
        for pos in partition[kind]:
            source_id = int(clean_ids[pos])
            if source_id not in by_id:
                raise ValueError(f"cache lacks a {kind} record for source image {source_id}")
            rows.append(by_id[source_id])
        pieces.append(cache.subset(np.asarray(rows, dtype=np.int64)))
    return concat_caches(pieces)


def select_loo_test_cache(cache: EmbeddingCache, plan: LooPlan) -> EmbeddingCache:
    """All clean records plus all records of the held-out attack."""
    held_code = PROVENANCE_CODES[plan.held_out_attack]
    mask = (cache.provenance == 0) | (cache.provenance == held_code)
    if not np.any(cache.provenance == held_code):
        raise ValueError(f"cache has no {plan.held_out_attack} records")
    return cache.subset(np.nonzero(mask)[0])


def build_full_caches(clean_train: Dataset, clean_test: Dataset,
                      specs: Mapping[str, TriggerSpec], image_enc: ImageEncoder,
                      ) -> tuple[EmbeddingCache, EmbeddingCache]:
    """Encode each split once: clean plus every attack applied to every image.

    Record ids tie a backdoored embedding back to its clean source, which is
    what the LOO selectors key on.
    """
    from . import triggers as trig
    from .data import Sample

    caches = []
    for split in (clean_train, clean_test):
        parts = [precompute_image_embeddings(image_enc, split)]
        for kind in KINDS:
            realization = trig.realize_trigger(specs[kind], split.image_shape)
            attacked = Dataset(
                samples=[
                    Sample(
                        image=trig.apply_trigger(s.image, realization),
                        class_label=s.class_label,
                        detection_label=1,
                        provenance=kind,
                    )
                    for s in split
                ],
                num_classes=split.num_classes,
            )
            parts.append(precompute_image_embeddings(image_enc, attacked))
        caches.append(concat_caches(parts))
    return caches[0], caches[1]


# ---------------------------------------------------------------------------
# reports


@dataclass
class ReportRow:
    attack: str
    dataset: str
    method: str
    seed_accuracies: list[list]  # [seed, accuracy] pairs, ordered as run
    mean: float
    std: float


@dataclass
class ExperimentReport:
    kind: str  # "loo" or "crossgen"
    rows: list[ReportRow]
    seeds: list[int]
    config: dict
    run_id: str

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "run_id": self.run_id,
            "seeds": self.seeds,
            "config": self.config,
            "rows": [
                {
                    "attack": r.attack,
                    "dataset": r.dataset,
                    "method": r.method,
                    "seed_accuracies": r.seed_accuracies,
                    "mean": r.mean,
                    "std": r.std,
                }
                for r in self.rows
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentReport":
        rows = [
            ReportRow(
                attack=r["attack"],
                dataset=r["dataset"],
                method=r["method"],
                seed_accuracies=[list(p) for p in r["seed_accuracies"]],
                mean=r["mean"],
                std=r["std"],
            )
            for r in doc["rows"]
        ]
        return cls(kind=doc["kind"], rows=rows, seeds=list(doc["seeds"]),
                   config=doc["config"], run_id=doc["run_id"])


@dataclass
class AblationRow:
    attack: str
    dataset: str
    learned: float
    static: float
    difference: float
    learned_seed_accuracies: list[list]


@dataclass
class AblationReport:
    kind: str
    rows: list[AblationRow]
    seeds: list[int]
    config: dict
    run_id: str

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "run_id": self.run_id,
            "seeds": self.seeds,
            "config": self.config,
            "rows": [
                {
                    "attack": r.attack,
                    "dataset": r.dataset,
                    "learned": r.learned,
                    "static": r.static,
                    "difference": r.difference,
                    "learned_seed_accuracies": r.learned_seed_accuracies,
                }
                for r in self.rows
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AblationReport":
        rows = [
            AblationRow(
                attack=r["attack"],
                dataset=r["dataset"],
                learned=r["learned"],
                static=r["static"],
                difference=r["difference"],
                learned_seed_accuracies=[list(p) for p in r["learned_seed_accuracies"]],
            )
            for r in doc["rows"]
        ]
        return cls(kind=doc["kind"], rows=rows, seeds=list(doc["seeds"]),
                   config=doc["config"], run_id=doc["run_id"])


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Population mean/std over the recorded seeds, in float64."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def make_run_id(kind: str, config: dict, seeds: Sequence[int]) -> str:
    canon = json.dumps({"kind": kind, "config": config, "seeds": list(seeds)}, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# experiment harnesses


def _fit_and_eval(train_cache: EmbeddingCache, test_cache: EmbeddingCache,
                  vocab: Vocabulary, text_enc: TextEncoder, config: TrainConfig,
                  plan: LooPlan) -> float:
    train_sel = select_loo_training_cache(train_cache, plan)
    run_config = replace(config, seed=plan.seed)
    state, _ = fit(train_sel, vocab, text_enc, run_config)
    det = build_detector(state, text_enc, vocab, config.scale)
    test_sel = select_loo_test_cache(test_cache, plan)
    return evaluate(det, test_sel).accuracy


def run_loo_experiment(train_cache: EmbeddingCache, test_cache: EmbeddingCache,
                       vocab: Vocabulary, text_enc: TextEncoder, config: TrainConfig,
                       seeds: Sequence[int] = DEFAULT_SEEDS, dataset_name: str = "dataset",
                       kind: str = "loo") -> ExperimentReport:
    """Hold out each attack in turn: select a balanced five-attack training
    mixture per seed, tune, and score on clean + held-out test images."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    rows = []
    for attack in KINDS:
        pairs = []
        for seed in seeds:
            plan = LooPlan(attack, seed=seed)
            acc = _fit_and_eval(train_cache, test_cache, vocab, text_enc, config, plan)
            pairs.append([seed, acc])
        mean, std = mean_std([p[1] for p in pairs])
        rows.append(ReportRow(attack=attack, dataset=dataset_name, method=METHOD_LEARNED,
                              seed_accuracies=pairs, mean=mean, std=std))
    report_config = {"train": config.to_json(), "dataset": dataset_name}
    return ExperimentReport(kind=kind, rows=rows, seeds=seeds, config=report_config,
                            run_id=make_run_id(kind, report_config, seeds))


def run_loo_on_datasets(clean_train: Dataset, clean_test: Dataset,
                        specs: Mapping[str, TriggerSpec], vocab: Vocabulary,
                        text_enc: TextEncoder, image_enc: ImageEncoder,
                        config: TrainConfig, seeds: Sequence[int] = DEFAULT_SEEDS,
                        dataset_name: str = "dataset") -> ExperimentReport:
    train_cache, test_cache = build_full_caches(clean_train, clean_test, specs, image_enc)
    return run_loo_experiment(train_cache, test_cache, vocab, text_enc, config,
                              seeds=seeds, dataset_name=dataset_name)


def run_crossgen(train_cache: EmbeddingCache, test_cache: EmbeddingCache,
                 train_name: str, test_name: str, vocab: Vocabulary,
                 text_enc: TextEncoder, config: TrainConfig,
                 seeds: Sequence[int] = DEFAULT_SEEDS) -> ExperimentReport:
    """Train the LOO mixture on one dataset's cache and test on the other's,
    still holding the evaluated attack out of training."""
    if train_name == test_name:
        raise ValueError("cross-generalization requires two distinct datasets")
    return run_loo_experiment(train_cache, test_cache, vocab, text_enc, config,
                              seeds=seeds, dataset_name=f"{train_name}->{test_name}",
                              kind="crossgen")


def run_static_prefix_ablation(train_cache: EmbeddingCache, test_cache: EmbeddingCache,
                               vocab: Vocabulary, text_enc: TextEncoder, config: TrainConfig,
                               seeds: Sequence[int] = DEFAULT_SEEDS,
                               dataset_name: str = "dataset") -> AblationReport:
    """Learned prefix versus the untrained prompt used zero-shot.

    The static arm takes zero optimizer steps; its detector is built straight
    from the initial prefix and is deterministic, so it carries no seed spread.
    """
    seeds = list(seeds)
    static_det = build_detector(init_prefix(vocab), text_enc, vocab, config.scale)
    assert static_det.step_count == 0
    rows = []
    for attack in KINDS:
        pairs = []
        for seed in seeds:
            plan = LooPlan(attack, seed=seed)
            acc = _fit_and_eval(train_cache, test_cache, vocab, text_enc, config, plan)
            pairs.append([seed, acc])
        learned_mean, _ = mean_std([p[1] for p in pairs])
        static_acc = evaluate(static_det, select_loo_test_cache(test_cache, LooPlan(attack, seed=seeds[0]))).accuracy
        rows.append(
            AblationRow(
                attack=attack,
                dataset=dataset_name,
                learned=learned_mean,
                static=static_acc,
                difference=learned_mean - static_acc,
                learned_seed_accuracies=pairs,
            )
        )
    report_config = {"train": config.to_json(), "dataset": dataset_name}
    return AblationReport(kind="ablation", rows=rows, seeds=seeds, config=report_config,
                          run_id=make_run_id("ablation", report_config, seeds))


# ---------------------------------------------------------------------------
# export


def report_to_csv(report) -> str:
    lines = []
    if isinstance(report, ExperimentReport):
        lines.append("attack,dataset,seed,accuracy,mean,std")
        for row in report.rows:
            for seed, acc in row.seed_accuracies:
                lines.append(f"{row.attack},{row.dataset},{seed},{acc!r},,")
            lines.append(f"{row.attack},{row.dataset},,,{row.mean!r},{row.std!r}")
    elif isinstance(report, AblationReport):
        lines.append("attack,dataset,learned,static,difference")
        for row in report.rows:
            lines.append(f"{row.attack},{row.dataset},{row.learned!r},{row.static!r},{row.difference!r}")
    else:
        raise TypeError(f"cannot export {type(report).__name__}")
    return "\n".join(lines) + "\n"


def export_report(report, path, format: str = "json") -> None:
    path = Path(path)
    if format == "json":
        path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    elif format == "csv":
        path.write_text(report_to_csv(report))
    else:
        raise ValueError(f"unknown report format {format!r}")


def report_from_json(doc: dict):
    if doc.get("kind") == "ablation":
        return AblationReport.from_json(doc)
    return ExperimentReport.from_json(doc)
