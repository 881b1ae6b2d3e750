"""Round orchestration: broadcast -> local training -> aggregation -> eval."""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .analysis import evaluate_accuracy, weight_divergence
from .errors import ConfigError
from .fedcore import (
    TRAINABLE,
    AggregatorConfig,
    LocalReport,
    RoundState,
    aggregate_fedavg,
    aggregate_fedavgm,
    aggregate_scaffold,
    broadcast_partition,
    local_train,
    sample_clients,
    scaffold_new_control,
)
from .models import build_model
from .params import param_partition
from .schedule import TrainSchedule


class FederatedRunner:
    """One federated training run over a fixed set of client shards.

    ``reference_checkpoints``, when given, is a per-round list of centralized
    ParamSets at matching step budgets; weight divergence is logged against
    them.
    """

    def __init__(self, ds, shards, model_spec, schedule, agg, rounds, *,
                 local_epochs=None, local_steps=None, fraction=1.0, seed=0,
                 test_images=None, test_labels=None, reference_checkpoints=None):
        if (local_epochs is None) == (local_steps is None):
            raise ConfigError("exactly one of local_epochs/local_steps required")
        self.ds = ds
        self.shards = {s.client_id: s for s in shards}
        self.spec = replace(model_spec, seed=seed)
        self.schedule = schedule
        self.agg = agg
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.local_steps = local_steps
        self.fraction = fraction
        self.seed = seed
        self.test_images = test_images
        self.test_labels = test_labels
        self.reference_checkpoints = reference_checkpoints

        self.client_models = {}
        self.client_data = {}
        for cid, shard in self.shards.items():
            self.client_models[cid] = build_model(self.spec)
            self.client_data[cid] = shard.load(ds)
        self.eval_model = build_model(self.spec)
        self.state = RoundState(global_params=build_model(self.spec).paramset())

        shared, _ = param_partition(self.state.global_params,
                                    broadcast_partition(agg))
        self._shared_trainable = [
            n for n, _, r in shared if r in TRAINABLE
        ]
        if agg.kind == "FedAVGM":
            self.state.server_momentum = {
                n: np.zeros_like(shared.get(n)) for n in shared.names
            }
        if agg.kind == "SCAFFOLD":
            self.state.server_control = {
                n: np.zeros_like(shared.get(n)) for n in self._shared_trainable
            }

    def _zero_control(self):
        g = self.state.global_params
        return {n: np.zeros_like(g.get(n)) for n in self._shared_trainable}

    def run_round(self):
        t0 = time.perf_counter()
        state = self.state
        r = state.round
        policy = broadcast_partition(self.agg)
        shared_global, _ = param_partition(state.global_params, policy)
        anchor = {n: state.global_params.get(n) for n in self._shared_trainable}

        sampled = sample_clients(list(self.shards), self.fraction, r, self.seed)
        if self.agg.kind == "SCAFFOLD":
            for cid in sampled:
                if cid not in state.client_controls:
                    state.client_controls[cid] = self._zero_control()

        def train_client(cid):
            model = self.client_models[cid]
            model.load(shared_global)
            images, labels = self.client_data[cid]
            offset = state.client_steps.get(cid, 0)
            kwargs = {}
            if self.agg.kind == "FedProx":
                kwargs = {"mu": self.agg.mu, "anchor": anchor}
            elif self.agg.kind == "SCAFFOLD":
                kwargs = {"control": state.server_control,
                          "client_control": state.client_controls[cid]}
            res = local_train(
                model, images, labels, self.schedule, offset,
                epochs=self.local_epochs, steps=self.local_steps,
                seed=self.seed, round_idx=r, client_id=cid, **kwargs,
            )
            after = model.paramset()
            shared_after, _ = param_partition(after, policy)
            new_control = None
            if self.agg.kind == "SCAFFOLD":
                final = {n: after.get(n) for n in self._shared_trainable}
                new_control = scaffold_new_control(
                    state.client_controls[cid], state.server_control,
                    anchor, final, res.steps, res.mean_lr,
                )
            return LocalReport(
                client_id=cid, params=shared_after,
                sample_count=len(labels), mean_loss=res.mean_loss,
                steps=res.steps, mean_lr=res.mean_lr,
                new_control=new_control,
            )

        workers = int(os.environ.get("FEDSIM_THREADS", "1"))
        if workers > 1 and len(sampled) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                reports = list(pool.map(train_client, sampled))
        else:
            reports = [train_client(cid) for cid in sampled]
        for rep in reports:
            state.client_steps[rep.client_id] = (
                state.client_steps.get(rep.client_id, 0) + rep.steps
            )

        if self.agg.kind in ("FedAVG", "FedProx"):
            new_shared = aggregate_fedavg(reports, self.agg.weighting)
        elif self.agg.kind == "FedAVGM":
            new_shared, state.server_momentum = aggregate_fedavgm(
                reports, shared_global, state.server_momentum,
                self.agg.beta, self.agg.server_lr, self.agg.weighting,
            )
        else:
            new_shared, state.server_control, state.client_controls = (
                aggregate_scaffold(
                    reports, shared_global, state.server_control,
                    state.client_controls, len(self.shards), self.agg.server_lr,
                )
            )
        for name, tensor, _ in new_shared:
            state.global_params.set(name, tensor)
        state.round += 1

        acc = ""
        if self.test_images is not None:
            self.eval_model.load(state.global_params)
            acc = evaluate_accuracy(self.eval_model, self.test_images,
                                    self.test_labels)
        div = ""
        if self.reference_checkpoints is not None:
            ref = self.reference_checkpoints[r]
            div = weight_divergence(state.global_params, ref, r).global_divergence
        return {
            "round": r + 1,
            "aggregator": self.agg.kind + ("+FedBN" if self.agg.fedbn else ""),
            "sampled_clients": "|".join(str(c) for c in sampled),
            "global_test_acc": acc,
            "mean_train_loss": float(np.mean([rep.mean_loss for rep in reports])),
            "weight_divergence": div,
            "wallclock_ms": (time.perf_counter() - t0) * 1000.0,
        }

    def run(self):
        return [self.run_round() for _ in range(self.rounds)]


def centralized_checkpoints(ds, model_spec, schedule, rounds, *,
                            epochs=None, steps=None, seed=0):
    """Pooled-data SGD mirroring the federated per-round budget.

    Returns one ParamSet checkpoint per round, for divergence tracking at
    matching optimization budgets.
    """
    model = build_model(replace(model_spec, seed=seed))
    offset = 0
    checkpoints = []
    for r in range(rounds):
        res = local_train(model, ds.images, ds.labels, schedule, offset,
                          epochs=epochs, steps=steps, seed=seed,
                          round_idx=r, client_id=0)
        offset += res.steps
        checkpoints.append(model.paramset())
    return checkpoints


def train_centralized(ds, model_spec, schedule, epochs, seed, *,
                      test_images=None, test_labels=None, keep_checkpoints=False):
    """Plain SGD on the pooled dataset with the federated regimen.

    Bitwise identical to a single-client FedAVG run with one local epoch per
    round (same seed, epoch index standing in for the round index).
    Returns (final ParamSet, test accuracy or None, checkpoints or None).
    """
    spec = replace(model_spec, seed=seed)
    model = build_model(spec)
    offset = 0
    checkpoints = [] if keep_checkpoints else None
    for e in range(epochs):
        res = local_train(model, ds.images, ds.labels, schedule, offset,
                          epochs=1, seed=seed, round_idx=e, client_id=0)
        offset += res.steps
        if keep_checkpoints:
            checkpoints.append(model.paramset())
    acc = None
    if test_images is not None:
        acc = evaluate_accuracy(model, test_images, test_labels)
    return model.paramset(), acc, checkpoints
