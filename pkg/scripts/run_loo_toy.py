"""Desk-scale leave-one-attack-out run on synthetic data with toy encoders.

Builds full embedding caches once (clean plus all six attacks applied to
every image), then for each held-out attack trains the prefix on the other
five and scores clean + held-out test images. Also prints the learned vs
static prefix comparison. Reports land under runs/loo_toy/.
"""

import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from bsentinel.data import generate_synthetic_dataset
from bsentinel.detector import (
    build_full_caches,
    export_report,
    run_loo_experiment,
    run_static_prefix_ablation,
)
from bsentinel.encoders import EncoderConfig, build_toy_encoders
from bsentinel.triggers import default_specs
from bsentinel.tuner import TrainConfig

OUT = pathlib.Path("runs/loo_toy")
SEEDS = (0, 1, 2)


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    vocab, text_enc, image_enc = build_toy_encoders(EncoderConfig(), seed=0)
    specs = default_specs(seed=0)
    clean_train = generate_synthetic_dataset(200, 10, (3, 32, 32), seed=0)
    clean_test = generate_synthetic_dataset(100, 10, (3, 32, 32), seed=1)
    config = TrainConfig(epochs=30, batch_size=64)

    t0 = time.time()
    train_cache, test_cache = build_full_caches(clean_train, clean_test, specs, image_enc)
    print(f"encoded {len(train_cache)} train / {len(test_cache)} test embeddings "
          f"in {time.time() - t0:.1f}s")

    report = run_loo_experiment(train_cache, test_cache, vocab, text_enc, config,
                                seeds=SEEDS, dataset_name="synthetic")
    print("\nheld-out attack accuracy (mean +- std over seeds):")
    for row in report.rows:
        print(f"  {row.attack:>10s}  {row.mean:6.2f} +- {row.std:.2f}")
    export_report(report, OUT / "loo_report.json", format="json")
    export_report(report, OUT / "loo_report.csv", format="csv")

    ablation = run_static_prefix_ablation(train_cache, test_cache, vocab, text_enc,
                                          config, seeds=SEEDS, dataset_name="synthetic")
    print("\nlearned vs static prefix:")
    for row in ablation.rows:
        print(f"  {row.attack:>10s}  learned {row.learned:6.2f}  static {row.static:6.2f}  "
              f"({row.difference:+.2f})")
    export_report(ablation, OUT / "ablation_report.json", format="json")
    print(f"\nreports written to {OUT}/")


if __name__ == "__main__":
    main()
