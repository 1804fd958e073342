"""Command-line entry point.

Subcommands: synth, train, predict, evaluate, report, config-schema.
Exit codes: 0 success, 2 config error, 3 data error (manifests, images,
checkpoints), 4 training failure, 5 evaluation error. Errors print one
structured ``error[<code>]: message`` line per problem on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import SCHEMA, RunConfig, load_run_config, render_schema
from .errors import (
    ConfigError,
    DataError,
    EvaluationError,
    MldeError,
    TrainingError,
)

log = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_EVALUATION = 5


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlde",
        description="Multi-level deep ensemble for skin-lesion classification: "
                    "train, predict, and evaluate seven one-vs-rest tasks.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate the synthetic multiscale dataset")
    synth.add_argument("--out-dir", required=True, help="dataset output directory")
    synth.add_argument("--n-images", type=int, default=70,
                       help="total images, assigned round-robin over the 7 classes")
    synth.add_argument("--seed", type=int, default=0)

    for name, help_text in (
        ("train", "train the seven-task model bank"),
        ("predict", "write challenge-format prediction CSV"),
        ("evaluate", "compute per-task and mean AUC on a labeled manifest"),
        ("report", "render the branch-vs-ensemble comparison table and figures"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", help="flat key = value config file")
        for field in SCHEMA:
            cmd.add_argument(_flag(field.name), dest=field.name, default=None,
                             metavar=field.kind.upper(), help=field.help)

    sub.add_parser("config-schema", help="print every config key with its default")
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in SCHEMA
                 if getattr(args, f.name, None) is not None}
    return load_run_config(args.config, overrides)


def _write_run_meta(cfg: RunConfig, command: str) -> None:
    import numpy
    import torch

    from . import __version__

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": {
            "mlde": __version__,
            "python": sys.version.split()[0],
            "numpy": numpy.__version__,
            "torch": torch.__version__,
        },
    }
    with open(out_dir / "run_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def cmd_synth(args: argparse.Namespace) -> int:
    from .synth import generate_dataset

    result = generate_dataset(args.out_dir, args.n_images, args.seed)
    print(f"wrote {args.n_images} images under {result.out_dir}")
    print(f"train manifest: {result.train_manifest} ({result.n_train} entries)")
    print(f"test manifest:  {result.test_manifest} ({result.n_test} entries)")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    from .dataset import load_manifest
    from .training import run_task_bank

    if not cfg.train_manifest:
        raise ConfigError(["train requires train_manifest"])
    manifest = load_manifest(cfg.train_manifest, "train")
    val_manifest = (load_manifest(cfg.val_manifest, "validation")
                    if cfg.val_manifest else None)
    _write_run_meta(cfg, "train")
    result = run_task_bank(manifest, cfg.to_train_config(), Path(cfg.out_dir),
                           val_manifest)
    for code, path in result.checkpoints.items():
        suffix = " (degenerate task, untrained)" if code in result.degenerate else ""
        print(f"trained {code}: {path}{suffix}")
    if result.failures:
        for code, message in result.failures.items():
            print(f"error[training]: task {code} failed: {message}", file=sys.stderr)
        raise TrainingError(
            f"{len(result.failures)} of 7 tasks failed: "
            f"{', '.join(sorted(result.failures))}")
    return 0


def _load_bank(cfg: RunConfig):
    from .checkpoint import load_model_bank

    return load_model_bank(Path(cfg.out_dir) / "checkpoints", cfg.to_train_config())


def cmd_predict(cfg: RunConfig) -> int:
    from .dataset import load_manifest
    from .evaluation import predict_dataset, write_predictions_csv

    if not cfg.predict_manifest:
        raise ConfigError(["predict requires predict_manifest"])
    manifest = load_manifest(cfg.predict_manifest, "test")
    models = _load_bank(cfg)
    workers = 1 if cfg.deterministic else cfg.workers
    table = predict_dataset(models, manifest, batch_size=cfg.batch_size,
                            workers=workers)
    _write_run_meta(cfg, "predict")
    path = write_predictions_csv(table, Path(cfg.out_dir) / "predictions.csv")
    print(f"wrote {len(table.image_ids)} prediction rows to {path}")
    return 0


def _evaluate(cfg: RunConfig):
    from .dataset import load_manifest
    from .evaluation import evaluate_models

    if not cfg.eval_manifest:
        raise ConfigError(["evaluate/report require eval_manifest"])
    manifest = load_manifest(cfg.eval_manifest, "test")
    models = _load_bank(cfg)
    workers = 1 if cfg.deterministic else cfg.workers
    return evaluate_models(models, manifest, batch_size=cfg.batch_size,
                           workers=workers)


def cmd_evaluate(cfg: RunConfig) -> int:
    report = _evaluate(cfg)
    _write_run_meta(cfg, "evaluate")
    path = report.to_json(Path(cfg.out_dir) / "evaluation.json")
    for code, value in report.per_task_auc.items():
        print(f"AUC[{code}] = {value:.4f}")
    print(f"mean AUC over 7 tasks = {report.mean_auc:.4f}")
    print(f"evaluation report: {path}")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    from .evaluation import (
        EvaluationReport,
        render_comparison_table,
        write_report_csv,
    )
    from .figures import save_auc_comparison_figure, save_roc_figure

    out_dir = Path(cfg.out_dir)
    eval_json = out_dir / "evaluation.json"
    if eval_json.is_file():
        report = EvaluationReport.from_json(eval_json)
    else:
        report = _evaluate(cfg)
        report.to_json(eval_json)
    _write_run_meta(cfg, "report")

    table = render_comparison_table(report)
    (out_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
    write_report_csv(report, out_dir / "report.csv")
    save_roc_figure(report, out_dir / "roc_curves.svg")
    save_auc_comparison_figure(report, out_dir / "auc_comparison.svg")
    print(table)
    print(f"report files: {out_dir / 'report.txt'}, {out_dir / 'report.csv'}, "
          f"{out_dir / 'roc_curves.svg'}, {out_dir / 'auc_comparison.svg'}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "config-schema":
            print(render_schema())
            return 0
        if args.command == "synth":
            return cmd_synth(args)
        cfg = _load_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        raise MldeError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        for violation in exc.violations:
            print(f"error[config]: {violation}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"error[training]: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except EvaluationError as exc:
        print(f"error[evaluation]: {exc}", file=sys.stderr)
        return EXIT_EVALUATION


if __name__ == "__main__":
    sys.exit(main())
