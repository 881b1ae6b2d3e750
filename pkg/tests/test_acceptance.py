"""Acceptance gate: nine end-to-end criteria, one pass/fail line each.

Every test prints ``ACCEPTANCE <n> <name>: PASS|FAIL (<time>)`` before its
assertions so the verdict survives in the -v log either way.
"""

import time

import numpy as np
import pytest

from fedsim.data import gen_synthetic_dataset
from fedsim.fedcore import AggregatorConfig
from fedsim.models import ModelSpec, build_model
from fedsim.params import NORM_ROLES, param_partition
from fedsim.partition import (
    heterogeneity_report,
    ks_statistic,
    split_iid,
    split_label_skew,
)
from fedsim.runner import (
    FederatedRunner,
    centralized_checkpoints,
    train_centralized,
)
from fedsim.schedule import TrainSchedule


def _verdict(num, name, ok, t0):
    print(f"\nACCEPTANCE {num} {name}: {'PASS' if ok else 'FAIL'} "
          f"({time.perf_counter() - t0:.1f}s)")
    return ok


# ------------------------------------------------------------- criterion 1

def test_acceptance_1_optimizer_identities():
    t0 = time.perf_counter()
    train = gen_synthetic_dataset("GaussianBlobs", 4, 256, 8, 0, sigma=0.5)
    shards = split_iid(train, 2, 0)
    sched = TrainSchedule(total_steps=40, warmup_steps=10)

    def run(kind, norm="BatchNorm", rounds=5, **kw):
        spec = ModelSpec(family="TinyCNN", input_shape=(1, 8, 8),
                         num_classes=4, depth=2, width=4, norm_kind=norm,
                         seed=0)
        r = FederatedRunner(train, shards, spec, sched,
                            AggregatorConfig(kind=kind, **kw), rounds,
                            local_epochs=1, seed=0)
        r.run()
        return r.state.global_params

    fedavg = run("FedAVG")
    prox_eq = run("FedProx", mu=0.0).equal(fedavg)
    avgm_eq = run("FedAVGM", beta=0.0, server_lr=1.0).equal(fedavg)
    fedavg_u1 = run("FedAVG", norm="None", rounds=1, weighting="Uniform")
    scaffold_eq = run("SCAFFOLD", norm="None", rounds=1,
                      server_lr=1.0).equal(fedavg_u1)
    elapsed = time.perf_counter() - t0
    ok = prox_eq and avgm_eq and scaffold_eq and elapsed < 10
    assert _verdict(1, "optimizer-identity suite (bitwise)", ok, t0)
    assert prox_eq and avgm_eq and scaffold_eq
    assert elapsed < 10


# ------------------------------------------------------------- criterion 2

def test_acceptance_2_degenerate_federation():
    t0 = time.perf_counter()
    train = gen_synthetic_dataset("GaussianBlobs", 4, 256, 8, 0, sigma=0.5)
    shards = split_iid(train, 1, 0)
    sched = TrainSchedule(total_steps=64, warmup_steps=10)
    spec = ModelSpec(family="TinyCNN", input_shape=(1, 8, 8), num_classes=4,
                     depth=2, width=4, norm_kind="BatchNorm", seed=0)
    rounds = 8
    runner = FederatedRunner(train, shards, spec, sched,
                             AggregatorConfig(kind="FedAVG"), rounds,
                             local_epochs=1, seed=0)
    runner.run()
    cent, _, _ = train_centralized(train, spec, sched, rounds, 0)
    equal = runner.state.global_params.equal(cent)
    elapsed = time.perf_counter() - t0
    ok = equal and elapsed < 30
    assert _verdict(2, "degenerate federation == centralized (bitwise)", ok, t0)
    assert equal
    assert elapsed < 30


# ------------------------------------------------------------- criterion 3

def _fd_ok(analytic, numeric):
    err = abs(numeric - analytic)
    return err <= 1e-4 * max(abs(numeric), abs(analytic)) or err <= 1e-8


def _check_layer(layer, x, rng, n_coords=3, train=True):
    """FD-check d(sum(out*r))/dx and every parameter of one layer."""
    h = 1e-6
    out = layer.forward(x, train)
    r = rng.standard_normal(out.shape)
    dx = layer.backward(r)
    failures = []
    for _ in range(n_coords):
        idx = tuple(rng.integers(0, d) for d in x.shape)
        old = x[idx]
        x[idx] = old + h
        lp = float(np.sum(layer.forward(x, train) * r))
        x[idx] = old - h
        lm = float(np.sum(layer.forward(x, train) * r))
        x[idx] = old
        if not _fd_ok(dx[idx], (lp - lm) / (2 * h)):
            failures.append(("x", idx, dx[idx], (lp - lm) / (2 * h)))
    layer.forward(x, train)
    layer.backward(r)
    grads = getattr(layer, "grads", {})
    for pname, arr, _ in layer.param_entries():
        g = grads.get(pname)
        if g is None:
            continue  # frozen parameter
        for _ in range(n_coords):
            idx = tuple(rng.integers(0, d) for d in arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            lp = float(np.sum(layer.forward(x, train) * r))
            arr[idx] = old - h
            lm = float(np.sum(layer.forward(x, train) * r))
            arr[idx] = old
            if not _fd_ok(g[idx], (lp - lm) / (2 * h)):
                failures.append((pname, idx, g[idx], (lp - lm) / (2 * h)))
    return failures


def test_acceptance_3_gradient_suite():
    from fedsim import layers as L
    from fedsim.ops import softmax_cross_entropy

    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = []
    shapes_per_kind = 20

    def rand(*shape):
        return rng.standard_normal(shape)

    for _ in range(shapes_per_kind):
        n = int(rng.integers(2, 6))

        f_in, f_out = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        failures += _check_layer(L.Linear(f_in, f_out, rng, np.float64),
                                 rand(n, f_in), rng)

        c, f = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        hw = int(rng.integers(k + stride, k + stride + 5))
        failures += _check_layer(
            L.Conv2d(c, f, k, stride, pad, rng, np.float64),
            rand(n, c, hw, hw), rng)

        pk = int(rng.integers(1, 3))
        phw = int(rng.integers(pk + 1, pk + 5))
        failures += _check_layer(L.MaxPool2d(pk, pk), rand(n, c, phw, phw), rng)
        failures += _check_layer(L.AvgPool2d(pk, pk), rand(n, c, phw, phw), rng)

        width = int(rng.integers(2, 9))
        failures += _check_layer(L.ReLU(), rand(n, width) + 0.1, rng)
        failures += _check_layer(L.GELU(), rand(n, width), rng)

        ch = 2 * int(rng.integers(1, 5))
        failures += _check_layer(L.BatchNorm(ch, np.float64),
                                 rand(max(n, 2), ch, 3, 3), rng)
        failures += _check_layer(L.LayerNorm(ch, np.float64),
                                 rand(n, ch, 3, 3), rng)
        failures += _check_layer(L.GroupNorm(ch, 2, np.float64),
                                 rand(n, ch, 3, 3), rng)

        dim, tokens = int(rng.integers(2, 7)), int(rng.integers(1, 6))
        failures += _check_layer(L.AttentionMixer(dim, rng, np.float64),
                                 rand(n, tokens, dim), rng)

        # softmax cross-entropy: FD on the logits directly
        classes = int(rng.integers(2, 6))
        logits = rand(n, classes)
        labels = rng.integers(0, classes, n)
        _, dlogits = softmax_cross_entropy(logits, labels)
        for _ in range(3):
            idx = tuple(rng.integers(0, d) for d in logits.shape)
            old = logits[idx]
            h = 1e-6
            logits[idx] = old + h
            lp, _ = softmax_cross_entropy(logits, labels)
            logits[idx] = old - h
            lm, _ = softmax_cross_entropy(logits, labels)
            logits[idx] = old
            if not _fd_ok(dlogits[idx], (lp - lm) / (2 * h)):
                failures.append(("softmax_ce", idx))

    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    assert _verdict(3, "finite-difference gradient suite", ok, t0), failures[:5]
    assert not failures, failures[:5]
    assert elapsed < 60


# ------------------------------------------------------------- criterion 4

def test_acceptance_4_ks_endpoints():
    t0 = time.perf_counter()
    ds = gen_synthetic_dataset("GaussianBlobs", 10, 200, 8, 0)
    iid_report = heterogeneity_report(split_iid(ds, 5, 0), ds)
    skew_shards = split_label_skew(ds, 5, 2, 0)
    skew_report = heterogeneity_report(skew_shards, ds)

    def prefix_oracle(p, q):
        best = cp = cq = 0.0
        for a, b in zip(p, q):
            cp += a
            cq += b
            best = max(best, abs(cp - cq))
        return best

    dists = [s.label_hist / s.label_hist.sum() for s in skew_shards]
    oracle_ok = all(
        abs(ks_statistic(dists[i], dists[j]) -
            prefix_oracle(dists[i], dists[j])) < 1e-12
        for i in range(5) for j in range(i + 1, 5)
    )
    elapsed = time.perf_counter() - t0
    ok = (iid_report.mean_pairwise_ks == 0.0
          and skew_report.mean_pairwise_ks == 1.0
          and oracle_ok and elapsed < 5)
    assert _verdict(4, "KS endpoints 0 and 1 vs prefix-sum oracle", ok, t0)
    assert iid_report.mean_pairwise_ks == 0.0
    assert skew_report.mean_pairwise_ks == 1.0
    assert oracle_ok
    assert elapsed < 5


# ------------------------------------------------------------- criterion 5

SIZE = 12
SIGMA = 0.75
NORM_SEEDS = (0, 1, 2)


def _norm_study_setting():
    train = gen_synthetic_dataset("GaussianBlobs", 8, 2000, SIZE, 0,
                                  sigma=SIGMA, dtype="float32")
    test = gen_synthetic_dataset("GaussianBlobs", 8, 500, SIZE, 0 + 0x7E57,
                                 sigma=SIGMA, dtype="float32")
    shards = split_label_skew(train, 4, 2, 0)
    return train, test, shards


def _norm_study_spec(norm, seed):
    return ModelSpec(family="TinyCNN", input_shape=(1, SIZE, SIZE),
                     num_classes=8, depth=2, width=8, norm_kind=norm,
                     seed=seed, dtype="float32")


def test_acceptance_5_layernorm_beats_batchnorm():
    t0 = time.perf_counter()
    train, test, shards = _norm_study_setting()
    agg = AggregatorConfig(kind="FedAVG")
    rounds = 60
    fed_sched = TrainSchedule(total_steps=rounds * 16)
    pooled_sched = TrainSchedule(total_steps=rounds * 63)
    result = {}
    for norm in ("BatchNorm", "LayerNorm"):
        accs, divs = [], []
        for seed in NORM_SEEDS:
            spec = _norm_study_spec(norm, seed)
            refs = centralized_checkpoints(train, spec, pooled_sched, rounds,
                                           epochs=1, seed=seed)
            runner = FederatedRunner(
                train, shards, spec, fed_sched, agg, rounds,
                local_epochs=1, seed=seed, test_images=test.images,
                test_labels=test.labels, reference_checkpoints=refs,
            )
            rows = runner.run()
            accs.append(rows[-1]["global_test_acc"])
            divs.append(rows[-1]["weight_divergence"])
        result[norm] = (float(np.mean(accs)), float(np.mean(divs)))

    acc_gap = result["LayerNorm"][0] - result["BatchNorm"][0]
    div_gap = result["BatchNorm"][1] - result["LayerNorm"][1]
    elapsed = time.perf_counter() - t0
    ok = acc_gap >= 0.05 and div_gap > 0 and elapsed < 300
    assert _verdict(
        5, f"LN beats BN under label skew (acc gap {acc_gap:+.3f}, "
           f"divergence gap {div_gap:+.3f})", ok, t0)
    assert acc_gap >= 0.05
    assert div_gap > 0
    assert elapsed < 300


# ------------------------------------------------------------- criterion 6

def test_acceptance_6_fedbn_semantics():
    t0 = time.perf_counter()
    train, _, shards = _norm_study_setting()
    spec = _norm_study_spec("BatchNorm", 0)
    sched = TrainSchedule(total_steps=3 * 16, warmup_steps=10)
    runner = FederatedRunner(train, shards, spec, sched,
                             AggregatorConfig(kind="FedAVG", fedbn=True), 3,
                             local_epochs=1, seed=0)
    runner.run()

    # aggregate payloads never contain norm-role entries
    payload, _ = param_partition(
        runner.client_models[0].paramset(), "ExcludeNorm")
    payload_clean = all(r not in NORM_ROLES for _, _, r in payload)

    # post-broadcast: conv weights align, client norm state does not
    shared_global, _ = param_partition(runner.state.global_params,
                                       "ExcludeNorm")
    for model in runner.client_models.values():
        model.load(shared_global)
    sets = [runner.client_models[cid].paramset() for cid in sorted(runner.client_models)]
    conv_equal = all(
        np.array_equal(sets[0].get(n), ps.get(n))
        for ps in sets[1:]
        for n, _, r in sets[0] if r not in NORM_ROLES
    )
    norm_names = [n for n, _, r in sets[0] if r in NORM_ROLES]
    norm_unequal = all(
        not np.array_equal(a.get(n), b.get(n))
        for i, a in enumerate(sets) for b in sets[i + 1:]
        for n in norm_names
    )
    elapsed = time.perf_counter() - t0
    ok = payload_clean and conv_equal and norm_unequal and elapsed < 30
    assert _verdict(6, "FedBN keeps norm state client-local", ok, t0)
    assert payload_clean
    assert conv_equal
    assert norm_unequal
    assert elapsed < 30


# ------------------------------------------------------------- criterion 7

def test_acceptance_7_scaffold_advantage():
    t0 = time.perf_counter()
    train = gen_synthetic_dataset("GaussianBlobs", 4, 400, 8, 0, sigma=0.75)
    shards = split_label_skew(train, 2, 2, 0)
    rounds, epochs = 20, 5
    # 200 samples/client, batch 32 -> 7 steps/epoch
    sched = TrainSchedule(total_steps=rounds * epochs * 7)
    losses = {}
    for kind in ("FedAVG", "SCAFFOLD"):
        per_seed = []
        for seed in (0, 1, 2):
            spec = ModelSpec(family="MLP", input_shape=(1, 8, 8),
                             num_classes=4, depth=2, width=16,
                             norm_kind="None", seed=seed)
            agg = (AggregatorConfig(kind="SCAFFOLD", server_lr=1.0)
                   if kind == "SCAFFOLD" else AggregatorConfig(kind="FedAVG"))
            runner = FederatedRunner(train, shards, spec, sched, agg, rounds,
                                     local_epochs=epochs, seed=seed)
            per_seed.append(runner.run()[-1]["mean_train_loss"])
        losses[kind] = per_seed
    wins = sum(s <= f for s, f in zip(losses["SCAFFOLD"], losses["FedAVG"]))
    elapsed = time.perf_counter() - t0
    ok = wins >= 2 and elapsed < 60
    assert _verdict(7, f"SCAFFOLD <= FedAVG train loss in {wins}/3 seeds",
                    ok, t0)
    assert wins >= 2
    assert elapsed < 60


# ------------------------------------------------------------- criterion 8

def test_acceptance_8_byte_identical_outputs(tmp_path):
    from fedsim.config import ExperimentConfig
    from fedsim.harness import run_experiment
    from fedsim.results import write_results

    t0 = time.perf_counter()
    cfg = ExperimentConfig({
        "dataset": {"classes": 4, "samples": 128, "test_samples": 64,
                    "image_size": 8},
        "split": {"kind": "label_skew", "num_clients": 2,
                  "classes_per_client": 2},
        "model": {"family": "TinyCNN", "width": 4, "depth": 1,
                  "norm_kind": "BatchNorm"},
        "rounds": 3,
        "seeds": [0, 1],
        "track_divergence": True,
    })

    texts = []
    for d in ("a", "b"):
        records, report = run_experiment(cfg)
        out = tmp_path / d
        write_results(records, out, cfg.to_dict(), partition_report=report)
        rounds = (out / "rounds.csv").read_text()
        no_wallclock = "\n".join(line.rsplit(",", 1)[0]
                                 for line in rounds.splitlines())
        texts.append((no_wallclock, (out / "summary.json").read_text()))
    equal = texts[0] == texts[1]
    elapsed = time.perf_counter() - t0
    ok = equal
    assert _verdict(8, "rerun produces byte-identical rounds.csv/summary.json",
                    ok, t0)
    assert equal


# ------------------------------------------------------------- criterion 9

def test_acceptance_9_structural_collapses():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    spec = ModelSpec(family="TinyMetaFormer", input_shape=(1, 8, 8),
                     num_classes=4, depth=2, width=6, norm_kind="LayerNorm",
                     token_mixer="Identity", patch_size=4, seed=0)
    model = build_model(spec)
    x = rng.standard_normal((4, 1, 8, 8))
    out = model.forward(x)

    h = x
    for name, layer in model.named_layers:
        if name.startswith("block"):
            a = layer.norm1.forward(h, False)
            mixed = h + a  # the mixer edited out of the block
            b = layer.norm2.forward(mixed, False)
            b = layer.fc2.forward(
                layer.act.forward(layer.fc1.forward(b, False), False), False)
            h = mixed + b
        else:
            h = layer.forward(h, False)
    identity_err = float(np.abs(out - h).max())

    from fedsim import layers as L
    gn_err = 0.0
    for shape, ch in [((4, 6), 6), ((2, 6, 5, 5), 6), ((3, 7, 6), 6)]:
        y = rng.standard_normal(shape)
        gn = L.GroupNorm(ch, 1, np.float64)
        ln = L.LayerNorm(ch, np.float64)
        gn_err = max(gn_err,
                     float(np.abs(gn.forward(y, True) - ln.forward(y, True)).max()))

    elapsed = time.perf_counter() - t0
    ok = identity_err <= 1e-12 and gn_err <= 1e-12 and elapsed < 10
    assert _verdict(
        9, f"identity-mixer collapse ({identity_err:.1e}) and "
           f"GroupNorm(1)==LayerNorm ({gn_err:.1e})", ok, t0)
    assert identity_err <= 1e-12
    assert gn_err <= 1e-12
    assert elapsed < 10
