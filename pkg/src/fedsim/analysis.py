"""Centralized baseline, weight divergence, accuracy, convergence speed."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .params import Role

DIVERGENCE_ROLES = (Role.WEIGHT, Role.BIAS, Role.NORM_AFFINE)


@dataclass
class DivergenceReport:
    global_divergence: float
    per_layer: dict
    round: int = -1

    def to_dict(self):
        return {
            "round": self.round,
            "global": self.global_divergence,
            "per_layer": self.per_layer,
        }


def weight_divergence(w_fed, w_cent, round_idx=-1):
    """Relative L2 distance ||w_fed - w_cent|| / ||w_cent||.

    Computed over optimized parameters only (weights, biases, norm affine);
    running statistics are excluded. Reported globally over the concatenated
    vector and per parameter name.
    """
    w_fed.require_compatible(w_cent)
    ref = w_cent.flat(DIVERGENCE_ROLES)
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm == 0.0:
        raise ConfigError("weight_divergence: zero-norm reference parameters")
    diff = w_fed.flat(DIVERGENCE_ROLES) - ref
    per_layer = {}
    for name, t, role in w_cent:
        if role not in DIVERGENCE_ROLES:
            continue
        denom = float(np.linalg.norm(t))
        num = float(np.linalg.norm(w_fed.get(name) - t))
        per_layer[name] = num / denom if denom > 0 else float("inf")
    return DivergenceReport(
        global_divergence=float(np.linalg.norm(diff)) / ref_norm,
        per_layer=per_layer,
        round=round_idx,
    )


def evaluate_accuracy(model, images, labels, batch_size=256):
    """Argmax-match fraction in eval mode; ties go to the lowest class."""
    n = len(labels)
    if n == 0:
        raise ConfigError("evaluate_accuracy: empty test set")
    hits = 0
    for start in range(0, n, batch_size):
        logits = model.forward(images[start:start + batch_size], train=False)
        hits += int((logits.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return hits / n


def rounds_to_target(accuracies, target_acc):
    """First 1-indexed round whose accuracy reaches the target, else None."""
    for i, acc in enumerate(accuracies):
        if acc >= target_acc:
            return i + 1
    return None
