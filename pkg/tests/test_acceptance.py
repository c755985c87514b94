"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured numbers (run with -v or -s to see them)."""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from bsentinel import data, detector, triggers, tsne
from bsentinel.autodiff import Tensor, grad_check
from bsentinel.cachefile import export_embeddings, import_embeddings
from bsentinel.cli import EXIT_OK, main
from bsentinel.data import LooPlan, build_loo_training_set, contamination_count, split_counts
from bsentinel.detector import Detector, build_detector, evaluate, predict_batch
from bsentinel.encoders import EncoderConfig, build_import_encoders, build_toy_encoders, weights_hash
from bsentinel.triggers import KINDS, apply_trigger, default_specs, realize_trigger
from bsentinel.tuner import (
    TrainConfig,
    class_text_embeddings,
    compute_logits,
    fit,
    init_prefix,
    load_prefix,
    save_prefix,
    training_loss,
)

from conftest import make_separable_cache

SHAPE = (3, 32, 32)


def report(criterion: int, message: str) -> None:
    print(f"ACCEPTANCE {criterion}: PASS - {message}")


def test_c01_trigger_exactness():
    start = time.monotonic()
    rng = np.random.default_rng(11)
    specs = default_specs(seed=0)
    binary_kinds = {"BadnetsSQ", "BadnetsPX", "TrojanSQ", "L0Inv"}
    for kind in KINDS:
        realization = realize_trigger(specs[kind], SHAPE)
        off = realization.mask == 0.0
        for _ in range(100):
            image = rng.random(SHAPE, dtype=np.float32)
            out = apply_trigger(image, realization)
            assert np.array_equal(out[off], image[off]), f"{kind} modified off-support pixels"
            if kind in binary_kinds:
                on = realization.mask == 1.0
                assert np.array_equal(out[on], realization.pattern[on])
            if kind == "L0Inv":
                changed = np.any(out != image, axis=0)
                assert int(changed.sum()) <= specs[kind].sparsity
            if kind == "L2Inv":
                delta = out.astype(np.float64) - image.astype(np.float64)
                assert np.linalg.norm(delta) <= specs[kind].l2_budget + 1e-5
    elapsed = time.monotonic() - start
    assert elapsed < 5.0
    report(1, f"six kinds x 100 images, support-exact, budgets held ({elapsed:.2f}s)")


def test_c02_end_to_end_gradient():
    start = time.monotonic()
    vocab, text_enc, _ = build_toy_encoders(EncoderConfig(), seed=0)
    prefix = init_prefix(vocab).prefix
    worst = 0.0
    for batch_seed in range(5):
        rng = np.random.default_rng([batch_seed, 77])
        vectors = rng.standard_normal((8, text_enc.config.d_joint))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        labels = rng.integers(0, 2, size=8)

        def loss_fn(prefix_t):
            T = class_text_embeddings(prefix_t, text_enc, vocab)
            s = compute_logits(Tensor(vectors, dtype=np.float64), T, 100.0)
            return training_loss(s, labels)

        err = grad_check(loss_fn, Tensor(prefix, dtype=np.float64), step=1e-7)
        worst = max(worst, err)
        assert err <= 1e-3
    elapsed = time.monotonic() - start
    assert elapsed < 60.0
    report(2, f"prefix gradient vs central differences, max rel err {worst:.2e} ({elapsed:.1f}s)")


def test_c03_frozen_weights():
    vocab, text_enc, image_enc = build_toy_encoders(EncoderConfig(), seed=1)
    before = weights_hash(vocab, text_enc, image_enc)
    cache = make_separable_cache(200, text_enc.config.d_joint, 0.1, seed=0)
    fit(cache, vocab, text_enc, TrainConfig())
    after = weights_hash(vocab, text_enc, image_enc)
    assert before == after
    report(3, f"encoder weight sha256 unchanged by a full fit ({before[:16]}...)")


def test_c04_balanced_loo_construction():
    specs = default_specs(seed=0)
    for n in (1000, 1003):
        clean = data.generate_synthetic_dataset(n, 10, (3, 8, 8), seed=0)
        plan = LooPlan("TrojanWM", seed=0)
        mixed = build_loo_training_set(clean, plan, specs)
        n_clean = sum(1 for s in mixed if s.detection_label == 0)
        n_bad = sum(1 for s in mixed if s.detection_label == 1)
        assert n_clean == n_bad == n
        expected = split_counts(n, 5)
        actual = [sum(1 for s in mixed if s.provenance == k) for k in plan.training_attacks]
        assert actual == expected
        assert contamination_count(mixed, "TrojanWM") == 0
    report(4, "1:1 clean/backdoored, floor+remainder per-attack counts, zero contamination")


def test_c05_synthetic_separability():
    start = time.monotonic()
    vocab, text_enc, _ = build_toy_encoders(EncoderConfig(), seed=0)
    train = make_separable_cache(1000, text_enc.config.d_joint, 0.1, seed=0)
    heldout = make_separable_cache(1000, text_enc.config.d_joint, 0.1, seed=101)
    # independent oracle: a fixed threshold on dot(v, u) is already perfect
    for cache in (train, heldout):
        dots = cache.vectors @ train.separating_direction
        assert np.mean((dots <= 0) == (cache.detection == 1)) == 1.0

    config = TrainConfig()
    state, history = fit(train, vocab, text_enc, config)
    assert state.step <= 200
    assert history[-1].accuracy >= 99.0
    det = build_detector(state, text_enc, vocab, config.scale)
    held_acc = evaluate(det, heldout).accuracy
    assert held_acc >= 99.0
    elapsed = time.monotonic() - start
    assert elapsed < 120.0
    report(5, f"train {history[-1].accuracy:.2f}% in {state.step} steps, "
              f"held-out {held_acc:.2f}% ({elapsed:.1f}s)")


def test_c06_ablation_direction():
    vocab, text_enc, _ = build_toy_encoders(EncoderConfig(), seed=0)
    train = make_separable_cache(1000, text_enc.config.d_joint, 0.1, seed=0)
    test = make_separable_cache(500, text_enc.config.d_joint, 0.1, seed=7)
    config = TrainConfig()
    state, _ = fit(train, vocab, text_enc, config)
    learned = evaluate(build_detector(state, text_enc, vocab, config.scale), test).accuracy
    static_det = build_detector(init_prefix(vocab), text_enc, vocab, config.scale)
    assert static_det.step_count == 0
    static = evaluate(static_det, test).accuracy
    assert learned >= static
    report(6, f"learned {learned:.2f}% >= static {static:.2f}%")


def test_c07_argmax_scale_invariance():
    rng = np.random.default_rng(0)
    vectors = rng.standard_normal((1000, 64))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    text = rng.standard_normal((2, 64))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    predictions = []
    for scale in (1.0, 100.0, 1000.0):
        det = Detector(text_vectors=text, scale=scale,
                       prefix=np.zeros((3, 64), np.float32), step_count=0)
        predictions.append(predict_batch(det, vectors))
    assert np.array_equal(predictions[0], predictions[1])
    assert np.array_equal(predictions[0], predictions[2])
    report(7, "predictions identical for scale in {1, 100, 1000} on 1000 embeddings")


def test_c08_cmd_loo_determinism(tmp_path):
    cfg = {
        "out": str(tmp_path / "runs"),
        "seeds": [0, 1],
        "data": {
            "label": "synthetic",
            "train": {"kind": "synthetic", "n": 20, "classes": 2, "shape": [3, 32, 32], "seed": 0},
            "test": {"kind": "synthetic", "n": 10, "classes": 2, "shape": [3, 32, 32], "seed": 1},
        },
        "train": {"epochs": 2, "batch_size": 16},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(cfg))
    assert main(["loo", "--config", str(config_path)]) == EXIT_OK
    payloads = {
        name: (tmp_path / "runs" / name).read_bytes()
        for name in ("loo_report.json", "loo_report.csv", "loo_manifest.json")
    }
    assert main(["loo", "--config", str(config_path)]) == EXIT_OK
    for name, blob in payloads.items():
        assert (tmp_path / "runs" / name).read_bytes() == blob, f"{name} differs between runs"
    report(8, "cmd_loo reran byte-identical (json, csv, manifest)")


def test_c09_tsne_properties():
    rng = np.random.default_rng(3)
    cloud = np.concatenate([
        rng.standard_normal((100, 16)) * 0.5,
        rng.standard_normal((100, 16)) * 0.5 + 4.0,
    ])
    target = 30.0
    p_cond = tsne.conditional_affinities(cloud, target)
    for row in p_cond:
        nz = row > 0
        entropy = -(row[nz] * np.log2(row[nz])).sum()
        assert abs(2.0**entropy - target) <= 1e-3
    p = tsne.pairwise_affinities(cloud, target)
    assert np.allclose(p, p.T, atol=1e-12)
    assert abs(p.sum() - 1.0) <= 1e-6

    out = tsne.project(cloud, tsne.TsneConfig())
    post = [(it, kl) for it, kl in out.kl_checkpoints if it > 250]
    for (_, earlier), (_, later) in zip(post, post[1:]):
        assert later <= earlier + 1e-3
    report(9, f"affinities symmetric/normalized, per-row perplexity on target, "
              f"KL descent {post[0][1]:.3f} -> {post[-1][1]:.3f}")


def test_c10_file_format_round_trips(tmp_path):
    # embedding cache
    cache = make_separable_cache(16, 8, 0.1, seed=0)
    cache_path = tmp_path / "cache.bsec"
    export_embeddings(cache, cache_path)
    blob = cache_path.read_bytes()
    back = import_embeddings(cache_path)
    export_embeddings(back, tmp_path / "cache2.bsec")
    assert (tmp_path / "cache2.bsec").read_bytes() == blob

    # trained prefix
    vocab, text_enc, _ = build_toy_encoders(EncoderConfig(), seed=0)
    state, _ = fit(make_separable_cache(30, 64, 0.1, seed=1), vocab, text_enc,
                   TrainConfig(epochs=1, batch_size=16))
    save_prefix(state, tmp_path / "prefix.json")
    loaded, _ = load_prefix(tmp_path / "prefix.json")
    assert np.array_equal(loaded.prefix, state.prefix)
    assert np.array_equal(loaded.adam_m, state.adam_m)
    assert np.array_equal(loaded.adam_v, state.adam_v)
    save_prefix(loaded, tmp_path / "prefix2.json")
    assert (tmp_path / "prefix2.json").read_bytes() == (tmp_path / "prefix.json").read_bytes()

    # CIFAR-10 binary reader against hand-built records
    record = lambda label, r, g, b: bytes([label]) + bytes([r] * 1024 + [g] * 1024 + [b] * 1024)
    cifar_path = tmp_path / "batch.bin"
    cifar_path.write_bytes(record(0, 0, 100, 200) + record(5, 255, 0, 7) + record(9, 31, 63, 127))
    ds = data.load_cifar10_binary(cifar_path)
    assert [s.class_label for s in ds] == [0, 5, 9]
    assert np.allclose(ds[0].image[1], 100 / 255)
    assert np.allclose(ds[1].image[0], 1.0)
    assert ds[2].image[2][0, 0] == pytest.approx(127 / 255)
    report(10, "embedding cache + prefix serialization bit-exact, CIFAR reader matches bytes")


IMPORT_DIR = Path(os.environ.get("BSENTINEL_IMPORT_DIR", "import_caches"))
_IMPORT_FILES = {
    "cifar10_train": IMPORT_DIR / "cifar10_train.bsec",
    "cifar10_test": IMPORT_DIR / "cifar10_test.bsec",
    "gtsrb_test": IMPORT_DIR / "gtsrb_test.bsec",
}


@pytest.mark.skipif(
    not (_IMPORT_FILES["cifar10_train"].exists() and _IMPORT_FILES["cifar10_test"].exists()),
    reason="no imported embedding caches present (set BSENTINEL_IMPORT_DIR)",
)
def test_c11_import_contingent_reproduction():
    train_cache = import_embeddings(_IMPORT_FILES["cifar10_train"])
    test_cache = import_embeddings(_IMPORT_FILES["cifar10_test"])
    vocab, text_enc = build_import_encoders(train_cache, seed=0)
    config = TrainConfig()
    loo = detector.run_loo_experiment(train_cache, test_cache, vocab, text_enc, config,
                                      seeds=(0, 1, 2), dataset_name="cifar10")
    by_attack = {row.attack: row.mean for row in loo.rows}
    assert abs(by_attack["TrojanWM"] - 96.10) <= 5.0
    average = sum(by_attack.values()) / len(by_attack)
    assert abs(average - 86.20) <= 5.0
    message = f"loo TrojanWM {by_attack['TrojanWM']:.2f} (target 96.10), avg {average:.2f} (target 86.20)"

    if _IMPORT_FILES["gtsrb_test"].exists():
        gtsrb_test = import_embeddings(_IMPORT_FILES["gtsrb_test"])
        cross = detector.run_crossgen(train_cache, gtsrb_test, "cifar10", "gtsrb",
                                      vocab, text_enc, config, seeds=(0, 1, 2))
        cross_wm = {row.attack: row.mean for row in cross.rows}["TrojanWM"]
        assert abs(cross_wm - 76.54) <= 5.0
        message += f", crossgen TrojanWM {cross_wm:.2f} (target 76.54)"
    report(11, message)
