"""Command-line entry point.

Exit codes: 0 success, 2 configuration/schema error, 3 data error,
4 runtime or numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import AnisosegError, ConfigurationError

log = logging.getLogger("anisoseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _floats(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse number list {text!r}") from exc


def _ints(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse integer list {text!r}") from exc


def _dataset_for(cfg, manifest_arg):
    from .volume_io import Manifest, make_dataset

    if manifest_arg:
        return Manifest.load(manifest_arg)
    root = Path(cfg.output_dir) / "data"
    make_dataset(cfg.data.spec, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, root)
    return Manifest.load(root)


def cmd_gen_data(args):
    from .config import load_config
    from .volume_io import MANIFEST_NAME, make_dataset

    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "data"
    make_dataset(cfg.data.spec, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, out)
    cfg.write_resolved(out)
    print(out / MANIFEST_NAME)


def cmd_train(args):
    from .config import load_config
    from .trainer import train

    cfg = load_config(args.config)
    out = Path(cfg.output_dir) / "train"
    cfg.write_resolved(out)
    record = train(cfg.train_config(), args.manifest, out)
    print(
        f"best val Dice {record['best_val_dice']:.4f} at step {record['best_step']} "
        f"({record['stop_reason']} after {record['steps_completed']} steps); "
        f"checkpoint {record['best_checkpoint']}"
    )


def cmd_evaluate(args):
    from .metrics import format_summary
    from .trainer import evaluate_checkpoint

    out = Path(args.out) if args.out else Path("evaluation")
    _, summary = evaluate_checkpoint(args.checkpoint, args.manifest, args.split, out)
    print(f"{args.split} (n={summary['n_cases']}): {format_summary(summary)}")


def _load_matrix(spec: str):
    from .trainer import TABLE1_MATRIX, TABLE2_MATRIX, AblationCell

    presets = {"table1": TABLE1_MATRIX, "table2": TABLE2_MATRIX}
    if spec in presets:
        return presets[spec]
    try:
        raw = json.loads(Path(spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read ablation matrix {spec!r}: {exc}") from exc
    try:
        return [AblationCell.model_validate(c) for c in raw]
    except Exception as exc:
        raise ConfigurationError(f"invalid ablation matrix {spec!r}: {exc}") from exc


def cmd_ablation(args):
    from .config import load_config
    from .trainer import format_table, run_ablation

    cfg = load_config(args.config)
    matrix = _load_matrix(args.matrix)
    baseline = args.baseline
    if baseline is None and args.matrix == "table1":
        baseline = "2.5D U-Net"
    out = Path(cfg.output_dir) / "ablation"
    cfg.write_resolved(out)
    manifest = _dataset_for(cfg, args.manifest)
    table = run_ablation(matrix, cfg.train_config(), manifest, out, seeds=_ints(args.seeds), baseline=baseline)
    print(format_table(table))
    print(f"results written to {out / 'results.csv'}")


def cmd_sweep(args):
    from .config import load_config
    from .trainer import sweep_lambda

    cfg = load_config(args.config)
    out = Path(cfg.output_dir) / "sweep"
    cfg.write_resolved(out)
    lambdas = _floats(args.lambdas)
    # reject bad grids before generating data
    if len(set(lambdas)) != len(lambdas):
        raise ConfigurationError(f"duplicate λ values: {lambdas}")
    manifest = _dataset_for(cfg, args.manifest)
    rows = sweep_lambda(lambdas, cfg.train_config(), manifest, out, seeds=_ints(args.seeds))
    for r in rows:
        print(f"lambda={r['lambda']:g} dice={r['dice_mean']:.4f} assd={r['assd_mm_mean']} rve={r['rve_pct_mean']}")
    print(f"sweep written to {out / 'lambda_sweep.csv'}")


def cmd_grad_check(args):
    from .losses import check_hdl_gradient, check_total_loss_gradient

    if args.loss == "total":
        report = check_total_loss_gradient(args.lam, seed=args.seed, h=args.step, tolerance=args.tolerance)
    else:
        lam = 0.0 if args.loss == "dice" else args.lam
        report = check_hdl_gradient(lam, seed=args.seed, h=args.step, tolerance=args.tolerance)
    text = json.dumps(report.to_json())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_export_attention(args):
    from .trainer import export_attention

    out = Path(args.out) if args.out else Path("attention") / Path(args.case).name
    written = export_attention(args.checkpoint, args.case, out)
    print(f"wrote {len(written)} attention volumes and attention_L1.png to {out}")


def cmd_schema(args):
    from .config import config_schema

    print(json.dumps(config_schema(), indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anisoseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="dataset directory (default: <output_dir>/data)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", help="directory for metrics CSV and summary JSON (default: ./evaluation)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablation", help="train and compare a matrix of network/loss variants")
    p.add_argument("--config", required=True)
    p.add_argument("--matrix", required=True, help="'table1', 'table2' or a JSON list of cells")
    p.add_argument("--manifest", help="existing dataset (default: generate from the config)")
    p.add_argument("--seeds", default="0")
    p.add_argument("--baseline", help="cell name the t-tests compare against")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("sweep", help="train one run per λ value")
    p.add_argument("--config", required=True)
    p.add_argument("--lambdas", required=True, help="comma-separated, e.g. 0.0,0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--manifest")
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grad-check", help="finite-difference check of a loss gradient")
    p.add_argument("--loss", choices=["dice", "hdl", "total"], default="hdl")
    p.add_argument("--lambda", dest="lam", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export-attention", help="write per-level attention maps of one case")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("schema", help="print the experiment config JSON schema")
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        code = args.func(args)
    except AnisosegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
