"""Run persistence: round CSV, summary JSON, config echo, plot-ready tables."""

import csv
import io
import json
import os

import numpy as np

from .analysis import rounds_to_target
from .errors import ConfigError

ROUNDS_HEADER = ["seed", "round", "aggregator", "sampled_clients",
                 "global_test_acc", "mean_train_loss", "weight_divergence",
                 "wallclock_ms"]

PLOT_KINDS = ("accuracy_vs_round", "divergence_vs_round", "ks_report")


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def rows_csv_text(records):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROUNDS_HEADER)
    for row in records:
        writer.writerow([_fmt(row.get(col, "")) for col in ROUNDS_HEADER])
    return buf.getvalue()


def summarize(records, seeds, target_acc=None):
    """Run-level summary: final accuracy mean/std over seeds, convergence."""
    summary = {"seeds": list(seeds)}
    finals, per_seed = [], {}
    for seed in seeds:
        rows = [r for r in records if r["seed"] == seed]
        accs = [r["global_test_acc"] for r in rows
                if r["global_test_acc"] != ""]
        divs = [r["weight_divergence"] for r in rows
                if r["weight_divergence"] != ""]
        entry = {}
        if accs:
            entry["final_acc"] = accs[-1]
            finals.append(accs[-1])
            if target_acc is not None:
                entry["rounds_to_target"] = rounds_to_target(accs, target_acc)
        if divs:
            entry["divergence_trajectory"] = divs
            entry["final_divergence"] = divs[-1]
        per_seed[str(seed)] = entry
    if finals:
        summary["final_acc_mean"] = float(np.mean(finals))
        summary["final_acc_std"] = float(np.std(finals))
    summary["per_seed"] = per_seed
    return summary


def write_results(records, output_dir, resolved_config, target_acc=None,
                  partition_report=None):
    """Write rounds.csv, summary.json and config.json atomically."""
    os.makedirs(output_dir, exist_ok=True)
    paths = {}
    paths["rounds"] = os.path.join(output_dir, "rounds.csv")
    _atomic_write(paths["rounds"], rows_csv_text(records))

    seeds = resolved_config["seeds"]
    summary = summarize(records, seeds, target_acc)
    paths["summary"] = os.path.join(output_dir, "summary.json")
    _atomic_write(paths["summary"], json.dumps(summary, indent=2) + "\n")

    paths["config"] = os.path.join(output_dir, "config.json")
    _atomic_write(paths["config"], json.dumps(resolved_config, indent=2) + "\n")

    if partition_report is not None:
        paths["partition_report"] = os.path.join(output_dir, "partition_report.json")
        _atomic_write(paths["partition_report"],
                      json.dumps(partition_report, indent=2) + "\n")
    return paths


def read_rounds_csv(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = []
        for row in reader:
            for col in ("global_test_acc", "mean_train_loss",
                        "weight_divergence", "wallclock_ms"):
                if row.get(col):
                    row[col] = float(row[col])
            row["seed"] = int(row["seed"])
            row["round"] = int(row["round"])
            rows.append(row)
        return rows


def emit_plot_data(run_dir, kind, out_path=None):
    """Tidy long-format CSV (run_label, round, metric, value) from a run dir."""
    if kind not in PLOT_KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}")
    if out_path is None:
        out_path = os.path.join(run_dir, f"{kind}.csv")
    rows_out = []
    if kind == "ks_report":
        report_path = os.path.join(run_dir, "partition_report.json")
        if not os.path.exists(report_path):
            raise ConfigError(f"{report_path}: no partition report in run dir")
        with open(report_path) as f:
            report = json.load(f)
        for metric in ("mean_pairwise_ks", "mean_global_ks", "size_ratio"):
            rows_out.append(["partition", 0, metric, repr(float(report[metric]))])
        rows_out.append(["partition", 0, "has_feature_skew",
                         str(report["has_feature_skew"]).lower()])
    else:
        metric = ("global_test_acc" if kind == "accuracy_vs_round"
                  else "weight_divergence")
        for row in read_rounds_csv(os.path.join(run_dir, "rounds.csv")):
            value = row.get(metric, "")
            if value == "" or value is None:
                continue
            label = f"{row['aggregator']}/seed{row['seed']}"
            rows_out.append([label, row["round"], metric, repr(value)])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run_label", "round", "metric", "value"])
    writer.writerows(rows_out)
    _atomic_write(out_path, buf.getvalue())
    return out_path
