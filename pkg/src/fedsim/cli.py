"""Command-line front end.

Subcommands: run, partition, baseline, diverge, plotdata.
Exit codes: 0 ok, 2 config error, 3 runtime error.
"""

import argparse
import json
import os
import sys

from .analysis import weight_divergence
from .config import load_config
from .errors import ConfigError, FedsimError
from .harness import build_shards, build_train_test, run_experiment, run_baseline
from .params import load_paramset, save_paramset, write_manifest
from .partition import heterogeneity_report
from .results import PLOT_KINDS, emit_plot_data, write_results
from . import plots


def _add_config_args(p):
    p.add_argument("config", help="experiment config JSON")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config field")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated-learning simulation engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a federated experiment")
    _add_config_args(p)
    p.add_argument("--parallel-seeds", action="store_true",
                   help="run independent seeds concurrently")

    p = sub.add_parser("partition", help="build and inspect client shards")
    _add_config_args(p)
    p.add_argument("--report", action="store_true",
                   help="write heterogeneity report and figure")

    p = sub.add_parser("baseline", help="centralized arm with same regimen")
    _add_config_args(p)

    p = sub.add_parser("diverge", help="weight divergence between snapshots")
    p.add_argument("fed_params")
    p.add_argument("cent_params")
    p.add_argument("--out", help="write the report JSON here (default stdout)")

    p = sub.add_parser("plotdata", help="plot-ready table + figure from a run")
    p.add_argument("run_dir")
    p.add_argument("kind", choices=PLOT_KINDS)
    return parser


def cmd_run(args):
    cfg = load_config(args.config, args.overrides)
    records, report = run_experiment(cfg, parallel_seeds=args.parallel_seeds)
    out = cfg.raw["output_dir"]
    paths = write_results(records, out, cfg.to_dict(),
                          target_acc=cfg.raw["target_acc"],
                          partition_report=report)
    csv_path = emit_plot_data(out, "accuracy_vs_round")
    plots.render_plot_csv(csv_path)
    if cfg.raw["track_divergence"]:
        div_path = emit_plot_data(out, "divergence_vs_round")
        plots.render_plot_csv(div_path)
    print(f"wrote {paths['rounds']}")


def cmd_partition(args):
    cfg = load_config(args.config, args.overrides)
    train, _ = build_train_test(cfg)
    shards = build_shards(cfg, train)
    out = cfg.raw["output_dir"]
    os.makedirs(out, exist_ok=True)
    manifest_path = os.path.join(out, "partition_manifest.json")
    with open(manifest_path, "w") as f:
        json.dump([s.to_manifest() for s in shards], f, indent=2)
        f.write("\n")
    print(f"wrote {manifest_path}")
    if args.report:
        report = heterogeneity_report(shards, train)
        report_path = os.path.join(out, "partition_report.json")
        with open(report_path, "w") as f:
            json.dump(report.to_dict(), f, indent=2)
            f.write("\n")
        plots.render_partition_figure(
            shards, train.num_classes, os.path.join(out, "partition.png")
        )
        print(f"mean pairwise KS: {report.mean_pairwise_ks:.4f}")
        print(f"size ratio (max/min): {report.size_ratio:.4f}")
        print(f"wrote {report_path}")


def cmd_baseline(args):
    cfg = load_config(args.config, args.overrides)
    out = cfg.raw["output_dir"]
    os.makedirs(out, exist_ok=True)
    results = run_baseline(cfg)
    summary = {}
    for seed, (params, acc) in results.items():
        stem = os.path.join(out, f"centralized_seed{seed}")
        save_paramset(params, stem + ".params")
        write_manifest(params, stem + ".manifest.json")
        summary[str(seed)] = {"test_acc": acc, "params": stem + ".params"}
    path = os.path.join(out, "baseline.json")
    with open(path, "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    print(f"wrote {path}")


def cmd_diverge(args):
    fed = load_paramset(args.fed_params)
    cent = load_paramset(args.cent_params)
    report = weight_divergence(fed, cent).to_dict()
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)


def cmd_plotdata(args):
    csv_path = emit_plot_data(args.run_dir, args.kind)
    png = plots.render_plot_csv(csv_path)
    print(f"wrote {csv_path}")
    if png:
        print(f"wrote {png}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    handlers = {
        "run": cmd_run,
        "partition": cmd_partition,
        "baseline": cmd_baseline,
        "diverge": cmd_diverge,
        "plotdata": cmd_plotdata,
    }
    try:
        handlers[args.command](args)
    except ConfigError as e:
        print(f"fedsim: config error: {e}", file=sys.stderr)
        return 2
    except (FedsimError, OSError) as e:
        print(f"fedsim: error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
