"""Project test embeddings for one held-out attack to 2D, with the learned
class text embeddings marked on the map. Writes CSV + SVG under
runs/projection/."""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from bsentinel.data import LooPlan, generate_synthetic_dataset
from bsentinel.detector import (
    build_detector,
    build_full_caches,
    select_loo_test_cache,
    select_loo_training_cache,
)
from bsentinel.encoders import EncoderConfig, build_toy_encoders
from bsentinel.triggers import PROVENANCE_NAMES, default_specs
from bsentinel.tsne import ROLE_IMAGE, ROLE_TEXT_BACKDOOR, ROLE_TEXT_CLEAN, TsneConfig, export_scatter, project
from bsentinel.tuner import TrainConfig, fit

OUT = pathlib.Path("runs/projection")
HELD_OUT = "TrojanWM"


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    vocab, text_enc, image_enc = build_toy_encoders(EncoderConfig(), seed=0)
    specs = default_specs(seed=0)
    clean_train = generate_synthetic_dataset(150, 10, (3, 32, 32), seed=0)
    clean_test = generate_synthetic_dataset(150, 10, (3, 32, 32), seed=1)
    train_cache, test_cache = build_full_caches(clean_train, clean_test, specs, image_enc)

    plan = LooPlan(HELD_OUT, seed=0)
    config = TrainConfig(epochs=5, batch_size=64)
    state, _ = fit(select_loo_training_cache(train_cache, plan), vocab, text_enc, config)
    det = build_detector(state, text_enc, vocab, config.scale)

    test_sel = select_loo_test_cache(test_cache, plan)
    vectors = np.concatenate([test_sel.vectors.astype(np.float64), det.text_vectors])
    provenance = [PROVENANCE_NAMES[int(c)] for c in test_sel.provenance] + ["clean", HELD_OUT]
    roles = [ROLE_IMAGE] * len(test_sel) + [ROLE_TEXT_CLEAN, ROLE_TEXT_BACKDOOR]

    points = project(vectors, TsneConfig(perplexity=30.0, iterations=600),
                     provenance=provenance, roles=roles)
    export_scatter(points, OUT / "projection.csv", format="csv")
    export_scatter(points, OUT / "projection.svg", format="svg")
    print(f"projected {len(points)} points (final KL {points.final_kl:.4f}) -> {OUT}/")


if __name__ == "__main__":
    main()
