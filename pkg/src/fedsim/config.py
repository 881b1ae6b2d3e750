"""Experiment configuration: JSON loading, defaulting, strict validation."""

import copy
import json

from .errors import ConfigError
from .fedcore import AggregatorConfig
from .models import ModelSpec
from .partition import FeatureTransform
from .schedule import TrainSchedule

DEFAULTS = {
    "dataset": {
        "kind": "synthetic",
        "generator": "GaussianBlobs",
        "images_path": None,
        "labels_path": None,
        "classes": 8,
        "samples": 2000,
        "test_samples": 500,
        "image_size": 16,
        "sigma": 0.25,
        "seed": 0,
    },
    "split": {
        "kind": "iid",
        "num_clients": 5,
        "classes_per_client": 2,
        "alpha": 1.0,
        "transforms": None,
        "seed": 0,
    },
    "model": {
        "family": "TinyCNN",
        "norm_kind": "None",
        "token_mixer": None,
        "depth": 2,
        "width": 16,
        "groups": 2,
        "patch_size": 4,
        "dtype": "float64",
    },
    "aggregator": {
        "kind": "FedAVG",
        "mu": None,
        "beta": None,
        "server_lr": None,
        "fedbn": False,
        "weighting": "BySampleCount",
    },
    "schedule": {
        "base_lr": 0.03,
        "warmup_steps": 100,
        "clip_norm": 1.0,
        "batch_size": 32,
    },
    "local": {"epochs": 1},
    "rounds": 10,
    "fraction": 1.0,
    "seeds": [0, 1, 2],
    "track_divergence": False,
    "target_acc": None,
    "output_dir": "runs/out",
}

# aggregator hyperparameters only meaningful for specific kinds
_AGG_FIELD_KINDS = {
    "mu": ("FedProx",),
    "beta": ("FedAVGM",),
    "server_lr": ("FedAVGM", "SCAFFOLD"),
}
_AGG_FIELD_DEFAULTS = {"mu": 0.001, "beta": 0.9, "server_lr": 1.0}


def _no_duplicates(pairs):
    seen = set()
    for k, _ in pairs:
        if k in seen:
            raise ConfigError(f"duplicate key {k!r} in config")
        seen.add(k)
    return dict(pairs)


def _merge(defaults, given, path):
    if not isinstance(given, dict):
        raise ConfigError(f"{path}: expected an object")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if k not in defaults:
            raise ConfigError(f"unknown config key {path}.{k}" if path else
                              f"unknown config key {k}")
        if isinstance(defaults[k], dict) and k != "local":
            out[k] = _merge(defaults[k], v, f"{path}.{k}" if path else k)
        else:
            out[k] = copy.deepcopy(v)
    return out


class ExperimentConfig:
    """Resolved experiment configuration with builder helpers."""

    def __init__(self, raw):
        self.raw = _merge(DEFAULTS, raw, "")
        self._validate()

    def _validate(self):
        c = self.raw
        ds = c["dataset"]
        if ds["kind"] not in ("synthetic", "idx"):
            raise ConfigError(f"dataset.kind must be synthetic or idx, got {ds['kind']!r}")
        if ds["kind"] == "idx" and not (ds["images_path"] and ds["labels_path"]):
            raise ConfigError("dataset.kind=idx requires images_path and labels_path")
        sp = c["split"]
        if sp["kind"] not in ("iid", "label_skew", "quantity_skew", "feature_skew"):
            raise ConfigError(f"unknown split.kind {sp['kind']!r}")
        if sp["num_clients"] < 1:
            raise ConfigError("split.num_clients must be >= 1")
        agg = c["aggregator"]
        for f, kinds in _AGG_FIELD_KINDS.items():
            if agg[f] is not None and agg["kind"] not in kinds:
                raise ConfigError(
                    f"aggregator.{f} is not applicable to kind={agg['kind']}"
                )
        local = c["local"]
        if set(local) - {"epochs", "steps"} or len(local) != 1:
            raise ConfigError("local must contain exactly one of epochs/steps")
        budget = next(iter(local.values()))
        if not isinstance(budget, int) or budget < 1:
            raise ConfigError("local budget must be a positive integer")
        if not isinstance(c["rounds"], int) or c["rounds"] < 1:
            raise ConfigError("rounds must be a positive integer")
        if not c["seeds"]:
            raise ConfigError("seeds must be nonempty")
        if not 0 < c["fraction"] <= 1:
            raise ConfigError("fraction must be in (0, 1]")
        # run the component validators now so errors surface at load time
        self.model_spec()
        self.aggregator_config()
        self.schedule(total_steps=max(c["schedule"]["warmup_steps"], 1))

    def to_dict(self):
        return copy.deepcopy(self.raw)

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.raw == other.raw

    def model_spec(self):
        m = self.raw["model"]
        ds = self.raw["dataset"]
        if ds["kind"] == "synthetic":
            input_shape = (1, ds["image_size"], ds["image_size"])
            num_classes = ds["classes"]
        else:
            input_shape = None  # resolved after loading the IDX pair
            num_classes = None
        kwargs = dict(
            family=m["family"], norm_kind=m["norm_kind"],
            token_mixer=m["token_mixer"], depth=m["depth"], width=m["width"],
            groups=m["groups"], patch_size=m["patch_size"], dtype=m["dtype"],
        )
        if input_shape is not None:
            return ModelSpec(input_shape=input_shape, num_classes=num_classes,
                             **kwargs)
        return kwargs

    def aggregator_config(self):
        agg = self.raw["aggregator"]
        resolved = {
            f: (_AGG_FIELD_DEFAULTS[f] if agg[f] is None else agg[f])
            for f in _AGG_FIELD_DEFAULTS
        }
        return AggregatorConfig(
            kind=agg["kind"], fedbn=agg["fedbn"], weighting=agg["weighting"],
            **resolved,
        )

    def schedule(self, total_steps):
        s = self.raw["schedule"]
        return TrainSchedule(
            total_steps=total_steps, base_lr=s["base_lr"],
            warmup_steps=min(s["warmup_steps"], total_steps),
            clip_norm=s["clip_norm"], batch_size=s["batch_size"],
        )

    def transforms(self, num_clients, channels):
        sp = self.raw["split"]
        if sp["transforms"] is None:
            kinds = ["None", "Rotate90k", "ChannelPermute", "GaussianNoise"]
            return [
                FeatureTransform(kind=kinds[i % len(kinds)], k=1 + i % 3,
                                 sigma=0.1, seed=sp["seed"] + i)
                for i in range(num_clients)
            ]
        out = []
        for i, t in enumerate(sp["transforms"]):
            out.append(FeatureTransform(
                kind=t.get("kind", "None"), k=t.get("k", 1),
                perm=tuple(t["perm"]) if t.get("perm") else None,
                sigma=t.get("sigma", 0.1), seed=t.get("seed", sp["seed"] + i),
            ))
        return out


def set_override(raw, dotted, value):
    """Apply a --set key=value override; value parsed as JSON when possible."""
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override through non-object at {k!r}")
    node[keys[-1]] = parsed


def load_config(path, overrides=()):
    try:
        with open(path) as f:
            raw = json.load(f, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: parse error at line {e.lineno}: {e.msg}")
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"--set expects key=value, got {ov!r}")
        key, _, value = ov.partition("=")
        set_override(raw, key, value)
    return ExperimentConfig(raw)
