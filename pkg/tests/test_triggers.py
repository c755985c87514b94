import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsentinel import data, triggers
from bsentinel.triggers import (
    KINDS,
    GeometryError,
    TriggerSpec,
    apply_trigger,
    poison_dataset,
    poison_label,
    realize_trigger,
)

SHAPE = (3, 32, 32)
BINARY_KINDS = ("BadnetsSQ", "BadnetsPX", "TrojanSQ", "L0Inv")


def random_image(seed, shape=SHAPE):
    return np.random.default_rng(seed).random(shape, dtype=np.float32)


class TestRealize:
    def test_badnets_square_support_count(self):
        r = realize_trigger(TriggerSpec("BadnetsSQ", square_side=3), SHAPE)
        assert int((r.mask == 1.0).sum()) == 3 * 3 * 3
        assert np.all((r.mask == 0.0) | (r.mask == 1.0))

    def test_l0inv_support_count(self):
        r = realize_trigger(TriggerSpec("L0Inv", sparsity=5), SHAPE)
        assert int((r.mask == 1.0).sum()) == 5 * 3
        # exactly 5 distinct pixel positions
        positions = np.any(r.mask > 0, axis=0)
        assert int(positions.sum()) == 5

    def test_square_too_big_raises(self):
        with pytest.raises(GeometryError):
            realize_trigger(TriggerSpec("BadnetsSQ", square_side=40), SHAPE)

    def test_anchored_out_of_bounds_raises(self):
        with pytest.raises(GeometryError):
            realize_trigger(TriggerSpec("BadnetsSQ", square_side=3, anchor=(31, 31)), SHAPE)

    def test_determinism_hash_equality(self):
        for kind in KINDS:
            spec = TriggerSpec.default(kind, seed=7)
            a = realize_trigger(spec, SHAPE)
            b = realize_trigger(spec, SHAPE)
            assert a.content_hash() == b.content_hash()

    def test_different_seeds_differ_for_seeded_kinds(self):
        for kind in ("BadnetsPX", "TrojanWM", "L2Inv", "L0Inv"):
            a = realize_trigger(TriggerSpec.default(kind, seed=1), SHAPE)
            b = realize_trigger(TriggerSpec.default(kind, seed=2), SHAPE)
            assert a.content_hash() != b.content_hash()

    def test_mask_pattern_in_unit_range(self):
        for kind in KINDS:
            r = realize_trigger(TriggerSpec.default(kind, seed=3), SHAPE)
            for arr in (r.mask, r.pattern):
                assert arr.shape == SHAPE
                assert arr.min() >= 0.0 and arr.max() <= 1.0

    def test_binary_mask_invariant(self):
        for kind in BINARY_KINDS:
            r = realize_trigger(TriggerSpec.default(kind, seed=3), SHAPE)
            assert np.all((r.mask == 0.0) | (r.mask == 1.0))
        for kind in ("TrojanWM", "L2Inv"):
            r = realize_trigger(TriggerSpec.default(kind, seed=3), SHAPE)
            assert np.all(r.mask > 0.0) and np.all(r.mask < 1.0)


class TestApply:
    def test_zero_mask_is_identity(self):
        x = random_image(0)
        r = triggers.TriggerRealization(
            kind="BadnetsSQ",
            mask=np.zeros(SHAPE, dtype=np.float32),
            pattern=np.ones(SHAPE, dtype=np.float32),
        )
        out = apply_trigger(x, r)
        assert np.array_equal(out, x)

    def test_binary_mask_replaces_on_support_exactly(self):
        x = random_image(1)
        r = realize_trigger(TriggerSpec("BadnetsSQ", square_side=4), SHAPE)
        out = apply_trigger(x, r)
        on = r.mask == 1.0
        assert np.array_equal(out[on], r.pattern[on])
        assert np.array_equal(out[~on], x[~on])

    def test_watermark_blend_value(self):
        x = np.full(SHAPE, 0.5, dtype=np.float32)
        r = triggers.TriggerRealization(
            kind="TrojanWM",
            mask=np.full(SHAPE, 0.2, dtype=np.float32),
            pattern=np.ones(SHAPE, dtype=np.float32),
        )
        out = apply_trigger(x, r)
        assert np.allclose(out, 0.6, atol=1e-6)

    def test_does_not_mutate_input(self):
        x = random_image(2)
        before = x.copy()
        apply_trigger(x, realize_trigger(TriggerSpec.default("TrojanWM"), SHAPE))
        assert np.array_equal(x, before)

    def test_shape_mismatch(self):
        r = realize_trigger(TriggerSpec.default("BadnetsSQ"), SHAPE)
        with pytest.raises(ValueError):
            apply_trigger(np.zeros((3, 16, 16), dtype=np.float32), r)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from(KINDS))
    def test_modifies_only_mask_support(self, seed, kind):
        x = random_image(seed)
        r = realize_trigger(TriggerSpec.default(kind, seed=seed), SHAPE)
        out = apply_trigger(x, r)
        off = r.mask == 0.0
        assert np.array_equal(out[off], x[off])
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_idempotent_for_binary_kinds(self):
        x = random_image(3)
        for kind in BINARY_KINDS:
            r = realize_trigger(TriggerSpec.default(kind, seed=11), SHAPE)
            once = apply_trigger(x, r)
            twice = apply_trigger(once, r)
            assert np.array_equal(once, twice)


class TestBudgets:
    def test_l2_delta_bounded_for_all_images(self):
        spec = TriggerSpec("L2Inv", l2_budget=2.0, seed=5)
        r = realize_trigger(spec, SHAPE)
        for seed in range(50):
            x = random_image(seed)
            delta = apply_trigger(x, r).astype(np.float64) - x.astype(np.float64)
            assert np.linalg.norm(delta) <= 2.0 + 1e-5
        for extreme in (np.zeros(SHAPE, np.float32), np.ones(SHAPE, np.float32)):
            delta = apply_trigger(extreme, r).astype(np.float64) - extreme.astype(np.float64)
            assert np.linalg.norm(delta) <= 2.0 + 1e-5

    def test_l0_modifies_at_most_k_pixels(self):
        spec = TriggerSpec("L0Inv", sparsity=10, seed=4)
        r = realize_trigger(spec, SHAPE)
        x = random_image(9)
        out = apply_trigger(x, r)
        modified = np.any(out != x, axis=0)
        assert int(modified.sum()) <= 10


class TestSpecJson:
    def test_round_trip(self):
        spec = TriggerSpec("TrojanWM", seed=42, blend_ratio=0.35)
        again = TriggerSpec.from_json(json.loads(json.dumps(spec.to_json())))
        assert again == spec

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            TriggerSpec.from_json({"kind": "BadnetsSQ", "wat": 1})

    def test_bad_parameters_rejected(self):
        with pytest.raises(ValueError):
            TriggerSpec("TrojanWM", blend_ratio=0.0)
        with pytest.raises(ValueError):
            TriggerSpec("L2Inv", l2_budget=-1.0)
        with pytest.raises(ValueError):
            TriggerSpec("L0Inv", sparsity=0)
        with pytest.raises(ValueError):
            TriggerSpec("NotAnAttack")


class TestPoisonLabel:
    def test_all_to_one(self):
        assert poison_label(3, 0, num_classes=10) == 0
        assert poison_label(0, 0, num_classes=10) == 0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            poison_label(10, 0, num_classes=10)
        with pytest.raises(ValueError):
            poison_label(0, 10, num_classes=10)


class TestPoisonDataset:
    @pytest.fixture()
    def dataset(self):
        return data.generate_synthetic_dataset(40, 4, SHAPE, seed=0)

    def test_full_rate_tags_everything(self, dataset):
        spec = TriggerSpec.default("BadnetsSQ", seed=1)
        poisoned = poison_dataset(dataset, spec, rate=1.0, target=0, seed=0)
        assert len(poisoned) == len(dataset)
        assert all(s.provenance == "BadnetsSQ" for s in poisoned)
        assert all(s.class_label == 0 for s in poisoned)

    def test_partial_rate_counts(self):
        dataset = data.generate_synthetic_dataset(1000, 10, (3, 8, 8), seed=1)
        spec = TriggerSpec.default("BadnetsPX", seed=1)
        poisoned = poison_dataset(dataset, spec, rate=0.1, target=0, seed=3)
        n_bad = sum(s.detection_label for s in poisoned)
        assert n_bad == 100
        assert len(poisoned) == 1000

    def test_same_seed_same_selection(self, dataset):
        spec = TriggerSpec.default("TrojanSQ", seed=1)
        a = poison_dataset(dataset, spec, rate=0.5, target=1, seed=9)
        b = poison_dataset(dataset, spec, rate=0.5, target=1, seed=9)
        assert [s.detection_label for s in a] == [s.detection_label for s in b]

    def test_rate_bounds(self, dataset):
        spec = TriggerSpec.default("BadnetsSQ")
        with pytest.raises(ValueError):
            poison_dataset(dataset, spec, rate=0.0, target=0, seed=0)
        with pytest.raises(ValueError):
            poison_dataset(data.Dataset(samples=[], num_classes=4), spec, rate=0.5, target=0, seed=0)
