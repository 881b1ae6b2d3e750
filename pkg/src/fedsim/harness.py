"""Experiment orchestration: config -> data -> shards -> runs -> records."""

import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .data import gen_synthetic_dataset, load_idx_dataset
from .errors import ConfigError
from .fedcore import _batches
from .models import ModelSpec
from .partition import (
    Dataset,
    heterogeneity_report,
    split_feature_skew,
    split_iid,
    split_label_skew,
    split_quantity_skew,
)
from .runner import FederatedRunner, centralized_checkpoints, train_centralized


def build_train_test(cfg):
    ds = cfg.raw["dataset"]
    if ds["kind"] == "synthetic":
        train = gen_synthetic_dataset(
            ds["generator"], ds["classes"], ds["samples"], ds["image_size"],
            ds["seed"], sigma=ds["sigma"], dtype=cfg.raw["model"]["dtype"],
        )
        test = gen_synthetic_dataset(
            ds["generator"], ds["classes"], ds["test_samples"],
            ds["image_size"], ds["seed"] + 0x7E57, sigma=ds["sigma"],
            dtype=cfg.raw["model"]["dtype"],
        )
        return train, test
    full = load_idx_dataset(ds["images_path"], ds["labels_path"],
                            dtype=cfg.raw["model"]["dtype"])
    # deterministic tail holdout for evaluation
    n_test = max(1, len(full) // 10)
    train = Dataset(full.images[:-n_test], full.labels[:-n_test],
                    full.num_classes)
    test = Dataset(full.images[-n_test:], full.labels[-n_test:],
                   full.num_classes)
    return train, test


def build_shards(cfg, ds):
    sp = cfg.raw["split"]
    k, seed = sp["num_clients"], sp["seed"]
    if sp["kind"] == "iid":
        return split_iid(ds, k, seed)
    if sp["kind"] == "label_skew":
        return split_label_skew(ds, k, sp["classes_per_client"], seed)
    if sp["kind"] == "quantity_skew":
        return split_quantity_skew(ds, k, sp["alpha"], seed)
    transforms = cfg.transforms(k, ds.images.shape[1])
    return split_feature_skew(ds, k, transforms, seed)


def resolve_spec(cfg, ds):
    spec = cfg.model_spec()
    if isinstance(spec, ModelSpec):
        return spec
    return ModelSpec(input_shape=ds.images.shape[1:],
                     num_classes=ds.num_classes, **spec)


def steps_per_epoch(n, batch_size):
    return len(_batches(n, batch_size, np.arange(n)))


def _local_budget(cfg):
    local = cfg.raw["local"]
    return local.get("epochs"), local.get("steps")


def fed_total_steps(cfg, shards):
    epochs, steps = _local_budget(cfg)
    rounds = cfg.raw["rounds"]
    batch = cfg.raw["schedule"]["batch_size"]
    if steps is not None:
        return rounds * steps
    per_round = max(
        epochs * steps_per_epoch(len(s.indices), batch) for s in shards
    )
    return rounds * per_round


def pooled_total_steps(cfg, n):
    epochs, steps = _local_budget(cfg)
    rounds = cfg.raw["rounds"]
    batch = cfg.raw["schedule"]["batch_size"]
    if steps is not None:
        return rounds * steps
    return rounds * epochs * steps_per_epoch(n, batch)


def _run_one_seed(cfg, train, test, shards, spec, seed):
    epochs, steps = _local_budget(cfg)
    schedule = cfg.schedule(fed_total_steps(cfg, shards))
    refs = None
    if cfg.raw["track_divergence"]:
        pooled = cfg.schedule(pooled_total_steps(cfg, len(train)))
        refs = centralized_checkpoints(
            train, spec, pooled, cfg.raw["rounds"],
            epochs=epochs, steps=steps, seed=seed,
        )
    runner = FederatedRunner(
        train, shards, spec, schedule, cfg.aggregator_config(),
        cfg.raw["rounds"], local_epochs=epochs, local_steps=steps,
        fraction=cfg.raw["fraction"], seed=seed,
        test_images=test.images, test_labels=test.labels,
        reference_checkpoints=refs,
    )
    rows = runner.run()
    for row in rows:
        row["seed"] = seed
    return rows


def run_experiment(cfg, parallel_seeds=False):
    """Execute every seed; returns (records, partition_report_dict)."""
    train, test = build_train_test(cfg)
    shards = build_shards(cfg, train)
    spec = resolve_spec(cfg, train)
    report = heterogeneity_report(shards, train).to_dict()
    seeds = cfg.raw["seeds"]
    if parallel_seeds and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=len(seeds)) as pool:
            futures = [
                pool.submit(_run_one_seed, cfg, train, test, shards, spec, s)
                for s in seeds
            ]
            per_seed = [f.result() for f in futures]
    else:
        per_seed = [_run_one_seed(cfg, train, test, shards, spec, s)
                    for s in seeds]
    records = [row for rows in per_seed for row in rows]
    return records, report


def run_baseline(cfg):
    """Centralized arm with the identical regimen on pooled data."""
    train, test = build_train_test(cfg)
    spec = resolve_spec(cfg, train)
    epochs, steps = _local_budget(cfg)
    schedule = cfg.schedule(pooled_total_steps(cfg, len(train)))
    batch = cfg.raw["schedule"]["batch_size"]
    if epochs is not None:
        total_epochs = cfg.raw["rounds"] * epochs
    else:
        spe = steps_per_epoch(len(train), batch)
        total_epochs = max(1, math.ceil(cfg.raw["rounds"] * steps / spe))
    results = {}
    for seed in cfg.raw["seeds"]:
        params, acc, _ = train_centralized(
            train, spec, schedule, total_epochs, seed,
            test_images=test.images, test_labels=test.labels,
        )
        results[seed] = (params, acc)
    return results
