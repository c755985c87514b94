"""Command-line workflow: forge poisoned data, build or import embeddings,
train the prefix, evaluate, run the experiment suites, and project.

All randomness flows from explicit seeds in the config, outputs carry no
timestamps, and every command writes a manifest echoing the effective
config, so identical configs produce byte-identical artifacts.

Exit codes: 0 ok, 2 config error, 3 data/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import cachefile, data, detector, encoders, triggers, tsne as tsne_mod, tuner
from .cachefile import CacheFormatError, EmbeddingCache, export_embeddings, import_embeddings
from .data import DatasetFormatError, Dataset, LooPlan
from .detector import (
    build_detector,
    build_full_caches,
    evaluate,
    export_report,
    run_crossgen,
    run_loo_experiment,
    run_static_prefix_ablation,
    select_loo_test_cache,
    select_loo_training_cache,
)
from .encoders import EncoderConfig, build_import_encoders, build_toy_encoders
from .triggers import KINDS, TriggerSpec, default_specs
from .tsne import ROLE_IMAGE, ROLE_TEXT_BACKDOOR, ROLE_TEXT_CLEAN, TsneConfig
from .tuner import TrainConfig, fit, load_prefix, save_prefix

log = logging.getLogger("bsentinel")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

COMMANDS = ("forge", "embed", "train", "eval", "loo", "crossgen", "ablate", "project")

_TOP_KEYS = {
    "out", "seeds", "threads", "encoder", "import_embeddings", "train", "triggers",
    "trigger_seed", "data", "data_b", "poison", "forge", "dataset_cache", "embeddings",
    "prefix", "project", "tsne", "crossgen",
}
_ENCODER_KEYS = {"mode", "seed", "d_embed", "d_joint", "layers", "heads", "d_ff",
                 "max_len", "image_shape", "patch", "image_hidden", "embed_scale"}
_DATA_BUNDLE_KEYS = {"label", "train", "test"}
_DATASET_KEYS = {
    "synthetic": {"kind", "n", "classes", "shape", "seed"},
    "cifar10": {"kind", "path", "files"},
    "image_dir": {"kind", "path", "labels_csv", "resize", "classes"},
}
_POISON_KEYS = {"rate", "target", "kind", "seed"}
_FORGE_KEYS = {"mode", "held_out"}
_PROJECT_KEYS = {"held_out", "max_points", "include_text"}
_IMPORT_KEYS = {"train", "test"}
_CROSSGEN_KEYS = {"train_name", "test_name"}
_TSNE_KEYS = set(TsneConfig.__dataclass_fields__)


class ConfigError(ValueError):
    """Run configuration is invalid."""


def _reject_unknown(obj: Mapping, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


@dataclass
class RunConfig:
    """Validated, fully resolved run configuration."""

    raw: dict
    out: Path
    seeds: list[int]
    threads: int
    encoder_mode: str
    encoder_config: EncoderConfig
    encoder_seed: int
    import_paths: dict[str, str] | None
    train: TrainConfig
    specs: dict[str, TriggerSpec]
    data: dict | None
    data_b: dict | None
    poison: dict
    forge: dict
    dataset_cache: str | None
    embeddings: str | None
    prefix: str | None
    project: dict
    tsne: TsneConfig
    crossgen: dict

    def effective(self) -> dict:
        """The config as every manifest echoes it."""
        doc = dict(self.raw)
        doc["out"] = str(self.out)
        doc["seeds"] = list(self.seeds)
        doc["threads"] = self.threads
        doc.setdefault("encoder", {})
        doc["encoder"] = {"mode": self.encoder_mode, "seed": self.encoder_seed,
                          **_encoder_config_json(self.encoder_config)}
        doc["train"] = self.train.to_json()
        doc["triggers"] = {kind: spec.to_json() for kind, spec in self.specs.items()}
        if self.import_paths:
            doc["import_embeddings"] = dict(self.import_paths)
        return doc


def _encoder_config_json(cfg: EncoderConfig) -> dict:
    out = {k: getattr(cfg, k) for k in _ENCODER_KEYS - {"mode", "seed"}}
    out["image_shape"] = list(cfg.image_shape)
    return out


def _parse_encoder(obj: Mapping) -> tuple[str, EncoderConfig, int]:
    _reject_unknown(obj, _ENCODER_KEYS, "encoder")
    mode = obj.get("mode", "toy")
    if mode not in ("toy", "import"):
        raise ConfigError(f"encoder mode must be 'toy' or 'import', got {mode!r}")
    seed = int(obj.get("seed", 0))
    kwargs = {k: obj[k] for k in obj if k not in ("mode", "seed")}
    if "image_shape" in kwargs:
        kwargs["image_shape"] = tuple(int(v) for v in kwargs["image_shape"])
    try:
        config = EncoderConfig(**kwargs)
    except encoders.ConfigError as exc:
        raise ConfigError(str(exc)) from exc
    return mode, config, seed


def _parse_dataset_descriptor(obj: Mapping, where: str) -> dict:
    kind = obj.get("kind")
    if kind not in _DATASET_KEYS:
        raise ConfigError(f"{where}: dataset kind must be one of {sorted(_DATASET_KEYS)}, got {kind!r}")
    _reject_unknown(obj, _DATASET_KEYS[kind], where)
    return dict(obj)


def _parse_data_bundle(obj: Mapping, where: str) -> dict:
    _reject_unknown(obj, _DATA_BUNDLE_KEYS, where)
    if "train" not in obj or "test" not in obj:
        raise ConfigError(f"{where} requires 'train' and 'test' dataset descriptors")
    return {
        "label": obj.get("label", where),
        "train": _parse_dataset_descriptor(obj["train"], f"{where}.train"),
        "test": _parse_dataset_descriptor(obj["test"], f"{where}.test"),
    }


def load_run_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config")

    # flags win over the config file
    out = Path(args.out) if args.out else Path(raw.get("out", "runs"))
    seeds = [int(s) for s in args.seed] if args.seed else [int(s) for s in raw.get("seeds", detector.DEFAULT_SEEDS)]
    if not seeds:
        raise ConfigError("at least one seed is required")
    threads = int(args.threads) if args.threads is not None else int(raw.get("threads", 1))
    if threads < 1:
        raise ConfigError(f"threads must be at least 1, got {threads}")

    encoder_obj = dict(raw.get("encoder", {}))
    if args.encoder:
        encoder_obj["mode"] = args.encoder
    mode, encoder_config, encoder_seed = _parse_encoder(encoder_obj)

    import_paths = None
    if args.import_embeddings:
        p = Path(args.import_embeddings)
        if p.is_dir():
            import_paths = {"train": str(p / "train.bsec"), "test": str(p / "test.bsec")}
        else:
            import_paths = {"train": str(p), "test": str(p)}
    elif "import_embeddings" in raw:
        _reject_unknown(raw["import_embeddings"], _IMPORT_KEYS, "import_embeddings")
        import_paths = {k: str(v) for k, v in raw["import_embeddings"].items()}
    if args.import_embeddings and not args.encoder and "mode" not in dict(raw.get("encoder", {})):
        mode = "import"

    try:
        train = TrainConfig.from_json(raw.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train config: {exc}") from exc

    trigger_seed = int(raw.get("trigger_seed", 0))
    specs = default_specs(seed=trigger_seed)
    for kind, spec_obj in raw.get("triggers", {}).items():
        if kind not in KINDS:
            raise ConfigError(f"triggers: unknown attack kind {kind!r}")
        try:
            specs[kind] = TriggerSpec.from_json(spec_obj)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"triggers.{kind}: {exc}") from exc
        if specs[kind].kind != kind:
            raise ConfigError(f"triggers.{kind}: spec declares kind {specs[kind].kind!r}")

    data_bundle = _parse_data_bundle(raw["data"], "data") if "data" in raw else None
    data_b = _parse_data_bundle(raw["data_b"], "data_b") if "data_b" in raw else None

    poison = dict(raw.get("poison", {}))
    _reject_unknown(poison, _POISON_KEYS, "poison")
    forge = dict(raw.get("forge", {}))
    _reject_unknown(forge, _FORGE_KEYS, "forge")
    project = dict(raw.get("project", {}))
    _reject_unknown(project, _PROJECT_KEYS, "project")
    crossgen = dict(raw.get("crossgen", {}))
    _reject_unknown(crossgen, _CROSSGEN_KEYS, "crossgen")

    tsne_obj = dict(raw.get("tsne", {}))
    _reject_unknown(tsne_obj, _TSNE_KEYS, "tsne")
    try:
        tsne_config = TsneConfig(**tsne_obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"tsne config: {exc}") from exc

    return RunConfig(
        raw=raw,
        out=out,
        seeds=seeds,
        threads=threads,
        encoder_mode=mode,
        encoder_config=encoder_config,
        encoder_seed=encoder_seed,
        import_paths=import_paths,
        train=train,
        specs=specs,
        data=data_bundle,
        data_b=data_b,
        poison=poison,
        forge=forge,
        dataset_cache=raw.get("dataset_cache"),
        embeddings=raw.get("embeddings"),
        prefix=raw.get("prefix"),
        project=project,
        tsne=tsne_config,
        crossgen=crossgen,
    )


# ---------------------------------------------------------------------------
# shared helpers


def resolve_dataset(desc: Mapping) -> Dataset:
    kind = desc["kind"]
    if kind == "synthetic":
        return data.generate_synthetic_dataset(
            n=int(desc.get("n", 100)),
            num_classes=int(desc.get("classes", 10)),
            shape=tuple(desc.get("shape", (3, 32, 32))),
            seed=int(desc.get("seed", 0)),
        )
    if kind == "cifar10":
        source = desc.get("files", desc.get("path"))
        if source is None:
            raise ConfigError("cifar10 dataset needs 'path' or 'files'")
        return data.load_cifar10_binary(source)
    if kind == "image_dir":
        if "path" not in desc or "labels_csv" not in desc:
            raise ConfigError("image_dir dataset needs 'path' and 'labels_csv'")
        return data.load_image_directory(
            desc["path"], desc["labels_csv"],
            resize_to=tuple(desc.get("resize", (32, 32))),
            num_classes=desc.get("classes"),
        )
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _toy_stack(cfg: RunConfig):
    return build_toy_encoders(cfg.encoder_config, seed=cfg.encoder_seed)


def _import_cache(cfg: RunConfig, which: str) -> EmbeddingCache:
    _require(cfg.import_paths is not None,
             "import mode needs --import-embeddings or an 'import_embeddings' config entry")
    path = Path(cfg.import_paths[which])
    if not path.exists():
        raise ConfigError(f"import cache not found: {path}")
    return import_embeddings(path)


def _loo_inputs(cfg: RunConfig):
    """(train_cache, test_cache, vocab, text_enc, dataset label) per encoder mode."""
    if cfg.encoder_mode == "import":
        train_cache = _import_cache(cfg, "train")
        test_cache = _import_cache(cfg, "test")
        vocab, text_enc = build_import_encoders(train_cache, seed=cfg.encoder_seed)
        label = cfg.data["label"] if cfg.data else "imported"
        return train_cache, test_cache, vocab, text_enc, label
    _require(cfg.data is not None, "toy mode needs a 'data' bundle in the config")
    vocab, text_enc, image_enc = _toy_stack(cfg)
    clean_train = resolve_dataset(cfg.data["train"])
    clean_test = resolve_dataset(cfg.data["test"])
    train_cache, test_cache = build_full_caches(clean_train, clean_test, cfg.specs, image_enc)
    return train_cache, test_cache, vocab, text_enc, cfg.data["label"]


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: RunConfig, command: str, outputs: dict[str, Path],
                   summary: dict) -> Path:
    effective = cfg.effective()
    run_id = hashlib.sha256(
        json.dumps({"command": command, "config": effective}, sort_keys=True).encode()
    ).hexdigest()[:12]
    doc = {
        "command": command,
        "run_id": run_id,
        "config": effective,
        "outputs": {name: {"path": str(p), "sha256": _sha256_file(p)} for name, p in outputs.items()},
        "summary": summary,
    }
    path = cfg.out / f"{command}_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _provenance_counts(ds: Dataset) -> dict[str, int]:
    counts: dict[str, int] = {}
    for s in ds:
        counts[s.provenance] = counts.get(s.provenance, 0) + 1
    return {k: counts[k] for k in sorted(counts)}


# ---------------------------------------------------------------------------
# commands


def cmd_forge(cfg: RunConfig) -> int:
    _require(cfg.data is not None, "forge needs a 'data' bundle in the config")
    mode = cfg.forge.get("mode", "loo")
    clean_train = resolve_dataset(cfg.data["train"])
    outputs: dict[str, Path] = {}
    summary: dict[str, Any] = {"mode": mode}

    if mode == "loo":
        held_out = cfg.forge.get("held_out")
        _require(held_out in KINDS, f"forge.held_out must be one of {KINDS}")
        clean_test = resolve_dataset(cfg.data["test"])
        plan = LooPlan(held_out, seed=cfg.seeds[0])
        train_set = data.build_loo_training_set(clean_train, plan, cfg.specs)
        test_set = data.build_loo_test_set(clean_test, plan, cfg.specs[held_out])
        train_path = cfg.out / "train_data.bsec"
        test_path = cfg.out / "test_data.bsec"
        data.write_dataset_cache(train_path, train_set)
        data.write_dataset_cache(test_path, test_set)
        outputs = {"train_data": train_path, "test_data": test_path}
        summary.update(
            held_out=held_out,
            seed=plan.seed,
            train_counts=_provenance_counts(train_set),
            test_counts=_provenance_counts(test_set),
        )
    elif mode == "poison":
        kind = cfg.poison.get("kind", "BadnetsSQ")
        _require(kind in KINDS, f"poison.kind must be one of {KINDS}")
        poisoned = triggers.poison_dataset(
            clean_train,
            cfg.specs[kind],
            rate=float(cfg.poison.get("rate", 1.0)),
            target=int(cfg.poison.get("target", 0)),
            seed=int(cfg.poison.get("seed", cfg.seeds[0])),
        )
        out_path = cfg.out / "poisoned_data.bsec"
        data.write_dataset_cache(out_path, poisoned)
        outputs = {"poisoned_data": out_path}
        summary.update(kind=kind, counts=_provenance_counts(poisoned))
    else:
        raise ConfigError(f"forge.mode must be 'loo' or 'poison', got {mode!r}")

    manifest = write_manifest(cfg, "forge", outputs, summary)
    print(f"forged {mode} dataset cache(s) under {cfg.out} (manifest {manifest.name})")
    return EXIT_OK


def cmd_embed(cfg: RunConfig) -> int:
    _require(cfg.encoder_mode == "toy", "embed computes toy embeddings; import mode brings its own cache")
    if cfg.dataset_cache:
        dataset = data.read_dataset_cache(cfg.dataset_cache)
    else:
        _require(cfg.data is not None, "embed needs 'dataset_cache' or a 'data' bundle")
        dataset = resolve_dataset(cfg.data["train"])
    _, _, image_enc = _toy_stack(cfg)
    cache = encoders.precompute_image_embeddings(image_enc, dataset)
    out_path = cfg.out / "embeddings.bsec"
    export_embeddings(cache, out_path)
    manifest = write_manifest(cfg, "embed", {"embeddings": out_path},
                              {"count": len(cache), "dim": cache.dim})
    print(f"wrote {len(cache)} image embeddings (dim {cache.dim}) to {out_path}")
    return EXIT_OK


def _training_cache(cfg: RunConfig):
    """(cache, vocab, text encoder) for train/eval-style commands."""
    if cfg.encoder_mode == "import":
        cache = _import_cache(cfg, "train")
        vocab, text_enc = build_import_encoders(cache, seed=cfg.encoder_seed)
        return cache, vocab, text_enc
    vocab, text_enc, image_enc = _toy_stack(cfg)
    if cfg.embeddings:
        path = Path(cfg.embeddings)
        if not path.exists():
            raise ConfigError(f"embeddings cache not found: {path}")
        cache = import_embeddings(path, expected_dim=cfg.encoder_config.d_joint)
    elif cfg.dataset_cache:
        cache = encoders.precompute_image_embeddings(image_enc, data.read_dataset_cache(cfg.dataset_cache))
    elif cfg.data is not None:
        cache = encoders.precompute_image_embeddings(image_enc, resolve_dataset(cfg.data["train"]))
    else:
        raise ConfigError("train needs 'embeddings', 'dataset_cache', or a 'data' bundle")
    return cache, vocab, text_enc


def cmd_train(cfg: RunConfig) -> int:
    cache, vocab, text_enc = _training_cache(cfg)
    run_config = replace(cfg.train, seed=cfg.seeds[0])
    state, history = fit(cache, vocab, text_enc, run_config)
    out_path = cfg.out / "prefix.json"
    save_prefix(state, out_path, meta={"train": run_config.to_json(), "samples": len(cache)})
    manifest = write_manifest(
        cfg, "train", {"prefix": out_path},
        {
            "steps": state.step,
            "epochs": [
                {"epoch": h.epoch, "mean_loss": h.mean_loss, "accuracy": h.accuracy}
                for h in history
            ],
        },
    )
    print(f"trained prefix for {state.step} steps; final epoch accuracy "
          f"{history[-1].accuracy:.2f}% -> {out_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg.prefix is not None, "eval needs a 'prefix' path in the config")
    prefix_path = Path(cfg.prefix)
    if not prefix_path.exists():
        raise ConfigError(f"prefix file not found: {prefix_path}")
    state, _ = load_prefix(prefix_path)

    if cfg.encoder_mode == "import":
        cache = _import_cache(cfg, "test")
        vocab, text_enc = build_import_encoders(_import_cache(cfg, "train"), seed=cfg.encoder_seed)
    else:
        vocab, text_enc, image_enc = _toy_stack(cfg)
        if cfg.embeddings:
            cache = import_embeddings(cfg.embeddings, expected_dim=cfg.encoder_config.d_joint)
        elif cfg.dataset_cache:
            cache = encoders.precompute_image_embeddings(image_enc, data.read_dataset_cache(cfg.dataset_cache))
        elif cfg.data is not None:
            cache = encoders.precompute_image_embeddings(image_enc, resolve_dataset(cfg.data["test"]))
        else:
            raise ConfigError("eval needs 'embeddings', 'dataset_cache', or a 'data' bundle")

    det = build_detector(state, text_enc, vocab, cfg.train.scale)
    result = evaluate(det, cache)
    out_path = cfg.out / "eval.json"
    out_path.write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n")
    write_manifest(cfg, "eval", {"eval": out_path}, result.to_json())
    print(f"accuracy {result.accuracy:.2f}% over {result.n_total} samples "
          f"(clean recall {result.clean_recall:.2f}%, backdoor recall {result.backdoor_recall:.2f}%)")
    return EXIT_OK


def _export_both(report, stem: str, cfg: RunConfig) -> dict[str, Path]:
    json_path = cfg.out / f"{stem}.json"
    csv_path = cfg.out / f"{stem}.csv"
    export_report(report, json_path, format="json")
    export_report(report, csv_path, format="csv")
    return {f"{stem}_json": json_path, f"{stem}_csv": csv_path}


def cmd_loo(cfg: RunConfig) -> int:
    train_cache, test_cache, vocab, text_enc, label = _loo_inputs(cfg)
    report = run_loo_experiment(train_cache, test_cache, vocab, text_enc, cfg.train,
                                seeds=cfg.seeds, dataset_name=label)
    outputs = _export_both(report, "loo_report", cfg)
    write_manifest(cfg, "loo", outputs,
                   {"rows": [{"attack": r.attack, "mean": r.mean, "std": r.std} for r in report.rows]})
    for row in report.rows:
        print(f"{row.attack:>10s}: {row.mean:6.2f} +- {row.std:.2f}")
    return EXIT_OK


def cmd_crossgen(cfg: RunConfig) -> int:
    if cfg.encoder_mode == "import":
        train_cache = _import_cache(cfg, "train")
        test_cache = _import_cache(cfg, "test")
        vocab, text_enc = build_import_encoders(train_cache, seed=cfg.encoder_seed)
        train_name = cfg.crossgen.get("train_name", "import-train")
        test_name = cfg.crossgen.get("test_name", "import-test")
        report = run_crossgen(train_cache, test_cache, train_name, test_name,
                              vocab, text_enc, cfg.train, seeds=cfg.seeds)
        reports = [report]
    else:
        _require(cfg.data is not None and cfg.data_b is not None,
                 "crossgen toy mode needs 'data' and 'data_b' bundles")
        _require(cfg.data["label"] != cfg.data_b["label"],
                 "crossgen requires two distinct dataset labels")
        vocab, text_enc, image_enc = _toy_stack(cfg)
        caches = {}
        for key, bundle in (("a", cfg.data), ("b", cfg.data_b)):
            clean_train = resolve_dataset(bundle["train"])
            clean_test = resolve_dataset(bundle["test"])
            caches[key] = build_full_caches(clean_train, clean_test, cfg.specs, image_enc)
        reports = [
            run_crossgen(caches["a"][0], caches["b"][1], cfg.data["label"], cfg.data_b["label"],
                         vocab, text_enc, cfg.train, seeds=cfg.seeds),
            run_crossgen(caches["b"][0], caches["a"][1], cfg.data_b["label"], cfg.data["label"],
                         vocab, text_enc, cfg.train, seeds=cfg.seeds),
        ]
        report = detector.ExperimentReport(
            kind="crossgen",
            rows=reports[0].rows + reports[1].rows,
            seeds=list(cfg.seeds),
            config=reports[0].config,
            run_id=detector.make_run_id("crossgen", reports[0].config, cfg.seeds),
        )
    outputs = _export_both(report, "crossgen_report", cfg)
    write_manifest(cfg, "crossgen", outputs,
                   {"rows": [{"attack": r.attack, "dataset": r.dataset, "mean": r.mean}
                             for r in report.rows]})
    for row in report.rows:
        print(f"{row.dataset} {row.attack:>10s}: {row.mean:6.2f} +- {row.std:.2f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    train_cache, test_cache, vocab, text_enc, label = _loo_inputs(cfg)
    report = run_static_prefix_ablation(train_cache, test_cache, vocab, text_enc,
                                        cfg.train, seeds=cfg.seeds, dataset_name=label)
    outputs = _export_both(report, "ablation_report", cfg)
    write_manifest(cfg, "ablate", outputs,
                   {"rows": [{"attack": r.attack, "learned": r.learned, "static": r.static,
                              "difference": r.difference} for r in report.rows]})
    for row in report.rows:
        print(f"{row.attack:>10s}: learned {row.learned:6.2f} vs static {row.static:6.2f} "
              f"({row.difference:+.2f})")
    return EXIT_OK


def cmd_project(cfg: RunConfig) -> int:
    held_out = cfg.project.get("held_out")
    _require(held_out in KINDS, f"project.held_out must be one of {KINDS}")
    train_cache, test_cache, vocab, text_enc, label = _loo_inputs(cfg)
    plan = LooPlan(held_out, seed=cfg.seeds[0])

    if cfg.prefix:
        state, _ = load_prefix(cfg.prefix)
    else:
        run_config = replace(cfg.train, seed=plan.seed)
        state, _ = fit(select_loo_training_cache(train_cache, plan), vocab, text_enc, run_config)
    det = build_detector(state, text_enc, vocab, cfg.train.scale)

    test_sel = select_loo_test_cache(test_cache, plan)
    max_points = int(cfg.project.get("max_points", 500))
    if len(test_sel) > max_points:
        keep = np.sort(
            np.random.default_rng([plan.seed, 0x9E0]).choice(len(test_sel), size=max_points, replace=False)
        )
        test_sel = test_sel.subset(keep)

    vectors = test_sel.vectors.astype(np.float64)
    provenance = [triggers.PROVENANCE_NAMES[int(c)] for c in test_sel.provenance]
    roles = [ROLE_IMAGE] * len(test_sel)
    if cfg.project.get("include_text", True):
        vectors = np.concatenate([vectors, det.text_vectors], axis=0)
        provenance += ["clean", held_out]
        roles += [ROLE_TEXT_CLEAN, ROLE_TEXT_BACKDOOR]

    points = tsne_mod.project(vectors, cfg.tsne, provenance=provenance, roles=roles)
    csv_path = cfg.out / "projection.csv"
    svg_path = cfg.out / "projection.svg"
    tsne_mod.export_scatter(points, csv_path, format="csv")
    tsne_mod.export_scatter(points, svg_path, format="svg")
    write_manifest(cfg, "project",
                   {"projection_csv": csv_path, "projection_svg": svg_path},
                   {"held_out": held_out, "points": len(points), "final_kl": points.final_kl,
                    "dataset": label})
    print(f"projected {len(points)} embeddings for held-out {held_out} "
          f"(final KL {points.final_kl:.4f}) -> {csv_path}, {svg_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsentinel",
        description="Forge backdoor-poisoned image sets and detect them with "
                    "prompt-tuned dual-encoder embeddings.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
    common.add_argument("--seed", metavar="N", action="append",
                        help="experiment seed; repeat for several (overrides config)")
    common.add_argument("--threads", metavar="N", type=int,
                        help="worker-thread cap for internal parallelism")
    common.add_argument("--encoder", choices=["toy", "import"],
                        help="encoder mode (overrides config)")
    common.add_argument("--import-embeddings", metavar="PATH",
                        help="embedding cache file, or directory with train.bsec/test.bsec")

    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "forge": "build poisoned dataset caches plus a manifest",
        "embed": "encode a dataset into an embedding cache file",
        "train": "tune the prefix and save it",
        "eval": "score a trained prefix on a tagged set",
        "loo": "leave-one-attack-out experiment over all six attacks",
        "crossgen": "train on one dataset, test on the other",
        "ablate": "learned-prefix versus static-prefix comparison",
        "project": "2D projection of test embeddings plus text anchors",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=descriptions[name])
    return parser


_HANDLERS = {
    "forge": cmd_forge,
    "embed": cmd_embed,
    "train": cmd_train,
    "eval": cmd_eval,
    "loo": cmd_loo,
    "crossgen": cmd_crossgen,
    "ablate": cmd_ablate,
    "project": cmd_project,
}


def _setup_logging() -> None:
    level_name = os.environ.get("BSENTINEL_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(stream=sys.stderr, level=levels.get(level_name, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def _error_json(exc: Exception, exit_code: int) -> str:
    return json.dumps(
        {"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": exit_code}}
    )


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        return _HANDLERS[args.command](cfg)
    except (DatasetFormatError, CacheFormatError) as exc:
        print(_error_json(exc, EXIT_DATA), file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(_error_json(exc, EXIT_NUMERIC), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FileNotFoundError, KeyError, TypeError, ValueError) as exc:
        print(_error_json(exc, EXIT_CONFIG), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(_error_json(exc, EXIT_DATA), file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
