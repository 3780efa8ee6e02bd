"""Command-line entry points.

Subcommands: train, eval, compare, count, export-features, gen-data.
Exit codes: 0 success, 2 configuration/input errors, 3 training diverged
(a diagnostic state dump is written before exiting).
"""

import argparse
import csv
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import load_run_config
from .errors import (
    CheckpointError,
    ConfigError,
    ManifestError,
    TreeMTLError,
    TrainingDivergedError,
)
from .evaluate import evaluate_model, export_branch_features
from .model import count_cost, count_split_cost
from .training import run_training


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def cmd_train(args):
    cfg = load_run_config(args.config, overrides=args.set)
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = cfg.training_config()

    fatigue_train, face_train = cfg.load_datasets("train")
    model = cfg.build_model()
    classifier = cfg.build_classifier(face_train.num_classes)

    try:
        model, log = run_training(
            model, classifier, fatigue_train, face_train, train_cfg, out_dir=out_dir
        )
    except TrainingDivergedError as exc:
        _write_json(out_dir / "diverged_state.json", exc.diagnostics)
        print(f"error: {exc} (state dumped to {out_dir / 'diverged_state.json'})", file=sys.stderr)
        return 3

    if log.steps:
        from .figures import plot_training_curves

        plot_training_curves(log, out_dir / "loss_curves.png")

    fatigue_test, face_test = cfg.load_datasets("test")
    metrics, _, _ = evaluate_model(
        model,
        fatigue_test,
        face_test,
        pair_seed=cfg.raw["eval"]["pair_seed"],
        n_pairs=cfg.raw["eval"]["pairs"],
    )
    _write_json(out_dir / "metrics.json", metrics)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_eval(args):
    cfg = load_run_config(args.config, overrides=args.set)
    bundle = load_checkpoint(args.checkpoint)
    if bundle.model.fingerprint() != cfg.fingerprint():
        raise ConfigError(
            f"checkpoint architecture does not match the config "
            f"({bundle.model.fingerprint()[:12]} vs {cfg.fingerprint()[:12]})"
        )
    fatigue_test, face_test = cfg.load_datasets("test")
    metrics, fatigue_roc, verification = evaluate_model(
        bundle.model,
        fatigue_test,
        face_test,
        pair_seed=cfg.raw["eval"]["pair_seed"],
        n_pairs=cfg.raw["eval"]["pairs"],
    )
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "eval_metrics.json", metrics)
    if args.roc:
        from .figures import plot_roc

        fatigue_roc.write_csv(out_dir / "roc_fatigue.csv")
        plot_roc(fatigue_roc, out_dir / "roc_fatigue.png", title="Fatigue detection ROC")
        verification.roc.write_csv(out_dir / "roc_face.csv")
        plot_roc(verification.roc, out_dir / "roc_face.png", title="Face verification ROC")
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def _cost_rows(cfg, label, split_parallel):
    model = cfg.build_model()
    report = count_cost(model)
    metrics_path = cfg.output_dir / "metrics.json"
    accs = {"fatigue_acc": "", "face_acc": "", "avg_acc": ""}
    if metrics_path.exists():
        stored = json.loads(metrics_path.read_text())
        for key in accs:
            if stored.get(key) is not None:
                accs[key] = f"{stored[key]:.4f}"
    rows = [
        {
            "label": label,
            "params": report.total_params,
            "params_m": report.params_m,
            "gflops": report.gflops,
            **accs,
        }
    ]
    if split_parallel:
        split = count_split_cost(model)
        rows.append(
            {
                "label": f"{label}-parallel",
                "params": split.total_params,
                "params_m": split.params_m,
                "gflops": split.gflops,
                "fatigue_acc": "",
                "face_acc": "",
                "avg_acc": "",
            }
        )
    return rows


def cmd_compare(args):
    overrides = list(args.set)
    if args.no_lanet:
        overrides.append("model.branch.use_lanet=false")
    if args.no_senet:
        overrides.append("model.branch.use_senet=false")
    rows = []
    for config_path in args.config:
        cfg = load_run_config(config_path, overrides=overrides)
        rows.extend(_cost_rows(cfg, Path(config_path).stem, args.split_parallel))

    header = ["label", "params", "params_m", "gflops", "fatigue_acc", "face_acc", "avg_acc"]
    widths = {h: max(len(h), *(len(_fmt(row[h])) for row in rows)) for h in header}
    print("  ".join(h.ljust(widths[h]) for h in header))
    for row in rows:
        print("  ".join(_fmt(row[h]).ljust(widths[h]) for h in header))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "compare.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({h: _fmt(row[h]) for h in header})
    from .figures import plot_comparison

    plot_comparison(rows, out_dir / "compare.png")
    return 0


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def cmd_count(args):
    cfg = load_run_config(args.config, overrides=args.set)
    report = count_cost(cfg.build_model())
    print(f"input size: {report.input_size}")
    for group in report.params:
        print(
            f"{group:>8}: {report.params[group]:>10d} params  "
            f"{report.flops[group]:>14d} FLOPs"
        )
    print(f"{'total':>8}: {report.total_params:>10d} params  {report.total_flops:>14d} FLOPs")
    print(f"          {report.params_m:.6f} M params, {report.gflops:.6f} GFLOPs")
    print(f"convention: {report.convention}")
    return 0


def cmd_export_features(args):
    cfg = load_run_config(args.config, overrides=args.set)
    bundle = load_checkpoint(args.checkpoint)
    if bundle.model.fingerprint() != cfg.fingerprint():
        raise ConfigError("checkpoint architecture does not match the config")
    _, face_test = cfg.load_datasets(args.split)
    images = face_test.images[: args.count]
    out = Path(args.out) if args.out else cfg.output_dir / "branch_features.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    export_branch_features(bundle.model, images, out)
    print(f"wrote {images.shape[0]} records per branch to {out}")
    return 0


def cmd_gen_data(args):
    from .data import export_manifest

    cfg = load_run_config(args.config, overrides=args.set)
    out_dir = Path(args.out) if args.out else cfg.output_dir / "data"
    manifests = export_manifest(out_dir, cfg.synthetic_spec())
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="treemtl",
        description="Tree-style two-task model: train, evaluate, and account costs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="run config (TOML)")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry, e.g. training.epochs=5",
        )

    p = sub.add_parser("train", help="train a model per the config")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test data")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--roc", action="store_true", help="also write ROC CSVs and figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="tabulate params/GFLOPs/ACC across configs")
    p.add_argument("--config", action="append", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument(
        "--split-parallel",
        action="store_true",
        help="add the parallel-style split (two single-task models) per config",
    )
    p.add_argument("--no-lanet", action="store_true", help="disable the spatial branch")
    p.add_argument("--no-senet", action="store_true", help="disable the channel branch")
    p.add_argument("--out", default=".", help="directory for compare.csv / compare.png")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("count", help="print the parameter/FLOP report")
    add_common(p)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("export-features", help="dump branch feature tensors for a batch")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=8, help="number of images to export")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("gen-data", help="write synthetic data as PNGs plus manifests")
    add_common(p)
    p.add_argument("--out", default=None, help="destination directory")
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:  # escaped a command-level handler
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, CheckpointError, ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TreeMTLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
