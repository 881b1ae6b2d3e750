"""The federated round protocol: broadcast, local training, aggregation.

Aggregators: FedAVG, FedAVGM (server momentum), FedProx (proximal local
objective), SCAFFOLD (control variates), each optionally combined with the
FedBN policy that keeps normalization parameters client-local.

All reductions run over reports sorted by client_id, so results are bitwise
reproducible regardless of the order clients finish in.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ProtocolError
from .ops import clip_global_norm, sgd_step
from .params import ParamSet, Role, param_partition
from .schedule import lr_at_step

AGGREGATORS = ("FedAVG", "FedAVGM", "FedProx", "SCAFFOLD")
TRAINABLE = (Role.WEIGHT, Role.BIAS, Role.NORM_AFFINE)


@dataclass
class AggregatorConfig:
    kind: str = "FedAVG"
    mu: float = 0.0           # FedProx proximal strength
    beta: float = 0.9         # FedAVGM server momentum
    server_lr: float = 1.0    # FedAVGM / SCAFFOLD global step size
    fedbn: bool = False
    weighting: str = "BySampleCount"

    def __post_init__(self):
        if self.kind not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.kind!r}")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if not 0 <= self.beta < 1:
            raise ConfigError(f"beta must be in [0, 1), got {self.beta}")
        if self.server_lr <= 0:
            raise ConfigError(f"server_lr must be positive, got {self.server_lr}")
        if self.weighting not in ("BySampleCount", "Uniform"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")


@dataclass
class LocalReport:
    client_id: int
    params: ParamSet          # shared partition after local training
    sample_count: int
    mean_loss: float
    steps: int
    mean_lr: float
    new_control: dict = None  # SCAFFOLD c_i_plus, name -> array


@dataclass
class RoundState:
    global_params: ParamSet
    round: int = 0
    server_momentum: dict = None        # FedAVGM buffer, name -> array
    server_control: dict = None         # SCAFFOLD c
    client_controls: dict = field(default_factory=dict)  # cid -> c_i
    client_steps: dict = field(default_factory=dict)     # cid -> lr-schedule offset


def sample_clients(client_ids, fraction, round_idx, seed):
    """Deterministic sample of ceil(fraction*K) clients, ascending ids."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    ids = sorted(client_ids)
    count = math.ceil(fraction * len(ids))
    rng = np.random.default_rng(np.random.SeedSequence([seed, round_idx, 0x5A]))
    chosen = rng.choice(len(ids), size=count, replace=False)
    return sorted(ids[i] for i in chosen)


def _batches(n, batch_size, perm):
    """Batch index slices; a trailing singleton is dropped (BN needs >= 2)."""
    out = []
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) == 1 and n > 1:
            continue
        out.append(idx)
    return out


@dataclass
class TrainResult:
    steps: int
    mean_loss: float
    mean_lr: float


def local_train(model, images, labels, schedule, step_offset, *,
                epochs=None, steps=None, seed=0, round_idx=0, client_id=0,
                mu=0.0, anchor=None, control=None, client_control=None):
    """Minibatch SGD on one client's shard; the model is updated in place.

    FedProx: pass mu > 0 and the global snapshot as ``anchor``; the term
    mu * (w - w_anchor) joins each parameter gradient before clipping.
    SCAFFOLD: pass ``control`` (c) and ``client_control`` (c_i); the
    correction c - c_i joins each gradient step after clipping.
    """
    n = len(labels)
    if n == 0:
        raise ConfigError("local_train: empty shard")
    if (epochs is None) == (steps is None):
        raise ConfigError("local_train: exactly one of epochs/steps required")
    if (epochs is not None and epochs < 1) or (steps is not None and steps < 1):
        raise ConfigError("local_train: zero local steps")

    correction = None
    if control is not None:
        correction = {k: control[k] - client_control[k] for k in control}
        if not any(np.any(v) for v in correction.values()):
            correction = None

    rng = np.random.default_rng(
        np.random.SeedSequence([seed, round_idx, client_id, 0xB0])
    )
    losses, lrs = [], []
    t = 0
    done = False
    epoch_budget = epochs if epochs is not None else steps  # upper bound on epochs
    for _ in range(epoch_budget):
        if done:
            break
        perm = rng.permutation(n)
        for idx in _batches(n, schedule.batch_size, perm):
            lr = lr_at_step(schedule, min(step_offset + t, schedule.total_steps))
            x, y = images[idx], labels[idx]
            loss, grads = model.loss_and_grads(x, y, train=True)
            w = model.param_dict(TRAINABLE)
            if mu > 0.0:
                for k in anchor:
                    grads[k] = grads[k] + mu * (w[k] - anchor[k])
            grads = clip_global_norm(grads, schedule.clip_norm)
            if correction is not None:
                for k in correction:
                    grads[k] = grads[k] + correction[k]
            model.set_param_dict(sgd_step(w, grads, lr))
            losses.append(loss)
            lrs.append(lr)
            t += 1
            if steps is not None and t >= steps:
                done = True
                break
    return TrainResult(steps=t, mean_loss=float(np.mean(losses)),
                       mean_lr=float(np.mean(lrs)))


def scaffold_new_control(client_control, control, anchor, final_params,
                         steps, mean_lr):
    """c_i+ = c_i - c + (w_global - w_local) / (K * eta_l)."""
    if mean_lr <= 0:
        raise ProtocolError("SCAFFOLD: mean learning rate is zero this round")
    scale = 1.0 / (steps * mean_lr)
    return {
        k: client_control[k] - control[k]
        + (anchor[k] - final_params[k]) * scale
        for k in control
    }


def _sorted_reports(reports):
    if not reports:
        raise ProtocolError("aggregation needs at least one report")
    reports = sorted(reports, key=lambda r: r.client_id)
    first = reports[0].params
    for r in reports[1:]:
        first.require_compatible(r.params)
    return reports


def _uniform_mean(reports, name):
    total = reports[0].params.get(name).copy()
    for r in reports[1:]:
        total += r.params.get(name)
    return total / len(reports)


def aggregate_fedavg(reports, weighting="BySampleCount"):
    """Weighted average of client parameters, ascending client_id order."""
    reports = _sorted_reports(reports)
    out = ParamSet()
    if weighting == "Uniform":
        for name, _, role in reports[0].params:
            out.add(name, _uniform_mean(reports, name), role)
        return out
    total_n = sum(r.sample_count for r in reports)
    for name, _, role in reports[0].params:
        acc = (reports[0].sample_count / total_n) * reports[0].params.get(name)
        for r in reports[1:]:
            acc += (r.sample_count / total_n) * r.params.get(name)
        out.add(name, acc, role)
    return out


def aggregate_fedavgm(reports, global_params, momentum, beta, server_lr,
                      weighting="BySampleCount"):
    """Heavy-ball server momentum on the mean client update.

    v <- beta * v + (w - w_avg);  w <- w - server_lr * v.
    Returns (new_global, new_momentum).
    """
    avg = aggregate_fedavg(reports, weighting)
    new_global = ParamSet()
    new_momentum = {}
    for name, w, role in global_params:
        if name not in avg:
            new_global.add(name, w.copy(), role)
            continue
        a = avg.get(name)
        v = momentum[name]
        # algebraically w - lr*(beta*v + (w - a)); this form collapses
        # bitwise to plain averaging at beta=0, server_lr=1
        w_new = (1.0 - server_lr) * w + server_lr * a - (server_lr * beta) * v
        new_global.add(name, w_new, role)
        new_momentum[name] = beta * v + (w - a)
    return new_global, new_momentum


def aggregate_scaffold(reports, global_params, control, client_controls,
                       num_clients_total, server_lr):
    """Controlled averaging: w <- w + server_lr * mean(w_k - w) and the
    server control moves by (|S| / K_total) * mean(c_i+ - c_i).

    Returns (new_global, new_control, updated client_controls).
    """
    reports = _sorted_reports(reports)
    for r in reports:
        if r.new_control is None:
            raise ProtocolError(f"client {r.client_id} report missing c_i+")
    new_global = ParamSet()
    for name, w, role in global_params:
        if name not in reports[0].params:
            new_global.add(name, w.copy(), role)
            continue
        mean_w = _uniform_mean(reports, name)
        new_global.add(name, (1.0 - server_lr) * w + server_lr * mean_w, role)
    frac = len(reports) / num_clients_total
    new_control = {}
    for k in control:
        delta = reports[0].new_control[k] - client_controls[reports[0].client_id][k]
        for r in reports[1:]:
            delta = delta + (r.new_control[k] - client_controls[r.client_id][k])
        new_control[k] = control[k] + frac * (delta / len(reports))
    new_client_controls = dict(client_controls)
    for r in reports:
        new_client_controls[r.client_id] = r.new_control
    return new_global, new_control, new_client_controls


def broadcast_partition(config):
    """Which part of the global model is sent to clients."""
    return "ExcludeNorm" if config.fedbn else "All"


def fedbn_filter(params, config):
    """Shared partition of a ParamSet under the configured FedBN policy."""
    shared, _ = param_partition(params, broadcast_partition(config))
    return shared
