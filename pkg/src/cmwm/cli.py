"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, serve. Settings come from an
optional JSON config file; explicit flags override file values. Every
artifact a command writes embeds the fully resolved configuration so
runs can be reproduced from their outputs alone.

Exit codes: 0 ok, 1 user error (bad flags, missing files, invalid
config), 2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

log = logging.getLogger(__name__)

COMM_VARIANT_CHOICES = ("full", "zero", "intensity")
SPLIT_CHOICES = ("train", "val", "test", "all")
DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)


class CliError(Exception):
    """User-facing problem; message printed without a traceback."""


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _limit_threads(n: int | None) -> None:
    """Best-effort cap on numeric-library thread pools; must run before
    the first numpy import to take effect."""
    if n is None:
        return
    if n < 1:
        raise CliError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            config = json.load(f)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"config file is not valid JSON: {e}")
    if not isinstance(config, dict):
        raise CliError("config file must hold a JSON object")
    return config


def section(config: dict, name: str, overrides: dict | None = None) -> dict:
    """One config-file section with non-None flag overrides applied."""
    values = dict(config.get(name, {}))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    # JSON has no tuples; dataclass fields typed as tuples get coerced here
    for key in ("feedback_clip", "action_effects", "betas"):
        if isinstance(values.get(key), list):
            values[key] = tuple(values[key])
    return values


def resolve_seed(args, config: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(config.get("seed", 0))


def as_plain_dict(obj) -> dict:
    """Dataclass to JSON-safe dict (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _split_cohort(cohort, fractions, seed):
    from .data import split_patients

    return split_patients(cohort, fractions=tuple(fractions), seed=seed)


def _load_cohort_or_fail(path):
    from .data import CohortError, load_cohort

    try:
        return load_cohort(path)
    except FileNotFoundError:
        raise CliError(f"cohort file not found: {path}")
    except CohortError as e:
        raise CliError(str(e))


def _model_config_for(report, model_section: dict, seed: int):
    from .model import ModelConfig

    dims = dict(d_x=report.d_x, d_a_struct=report.d_a_struct,
                d_a_comm=report.d_a_comm, d_tau=report.d_tau,
                d_static_in=report.d_static_in)
    return ModelConfig(**dims, **model_section, seed=seed)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, config: dict) -> int:
    from .data import save_cohort
    from .synthetic import SyntheticSpec, generate_synthetic_cohort

    seed = resolve_seed(args, config)
    spec_values = section(config, "synthetic", {
        "n_patients": args.patients,
        "min_periods": args.min_periods,
        "max_periods": args.max_periods,
        "noise_std": args.noise_std,
    })
    spec_values["seed"] = seed
    spec = SyntheticSpec(**spec_values)
    cohort, oracle = generate_synthetic_cohort(spec)
    save_cohort(args.out, cohort)
    sidecar = args.oracle_out or str(args.out) + ".oracle.json"
    _write_json(sidecar, {
        "resolved_config": {"synthetic": spec.to_dict(), "seed": seed},
        "oracle": json.loads(oracle.to_json()),
    })
    n_periods = sum(p.n_periods for p in cohort)
    print(f"wrote {len(cohort)} patients ({n_periods} periods) to {args.out}")
    print(f"wrote oracle sidecar to {sidecar}")
    return 0


def _resolved_train_config(model_cfg, weights, tcfg, variant, split_seed,
                           fractions) -> dict:
    return {
        "model": model_cfg.to_dict(),
        "loss": weights.to_dict(),
        "train": as_plain_dict(tcfg),
        "comm_variant": variant,
        "split_seed": split_seed,
        "split_fractions": list(fractions),
    }


def cmd_train(args, config: dict) -> int:
    from .data import apply_comm_variant
    from .model import save_checkpoint
    from .objective import LossWeights
    from .trainer import TrainConfig, fit

    seed = resolve_seed(args, config)
    split_seed = args.split_seed if args.split_seed is not None else int(
        config.get("split_seed", seed))
    fractions = config.get("split_fractions", DEFAULT_FRACTIONS)
    variant = args.comm_variant or config.get("comm_variant", "full")

    cohort, report = _load_cohort_or_fail(args.cohort)
    train, val, _ = _split_cohort(cohort, fractions, split_seed)
    train = apply_comm_variant(train, variant)
    val = apply_comm_variant(val, variant)

    model_cfg = _model_config_for(
        report, section(config, "model", {"action_encoder": args.action_encoder}),
        seed)
    weights = LossWeights(**section(config, "loss"))
    tcfg = TrainConfig(**section(config, "train", {
        "epochs": args.epochs, "batch_size": args.batch_size}), seed=seed)

    log.info("training on %d patients (val %d), comm variant %s",
             len(train), len(val), variant)
    result = fit(model_cfg, train, val, tcfg, weights,
                 history_path=args.history)

    resolved = _resolved_train_config(model_cfg, weights, tcfg, variant,
                                      split_seed, fractions)
    meta = {
        "resolved_config": resolved,
        "comm_variant": variant,
        "split_seed": split_seed,
        "split_fractions": list(fractions),
        "best_epoch": result.best_epoch,
        "best_val_mae": result.best_metric,
        "cohort_path": str(args.cohort),
    }
    save_checkpoint(args.out, result.params, result.standardizer.to_arrays(),
                    weights.to_dict(), meta)
    best = "n/a" if result.best_metric is None else f"{result.best_metric:.4f}"
    print(f"best epoch {result.best_epoch} val MAE {best}")
    print(f"wrote checkpoint to {args.out}")
    if args.history:
        print(f"wrote history to {args.history}")
    return 0


def _print_eval_table(rows) -> None:
    for name, summary in rows:
        if summary is None:
            print(f"{name:<14} no points")
        else:
            print(f"{name:<14} MAE {summary.mae:9.4f}  RMSE {summary.rmse:9.4f}"
                  f"  (n={summary.n})")


def _rollout_config(args, config: dict):
    from .rollout import RolloutConfig

    values = section(config, "rollout", {
        "protocol": args.protocol,
        "fixed_context": args.context,
    })
    if args.anchor:
        values["anchor_enabled"] = True
    return RolloutConfig(**values)


def cmd_eval(args, config: dict) -> int:
    from .data import Standardizer, apply_comm_variant
    from .model import load_checkpoint
    from .rollout import evaluate_baseline, evaluate_protocol, write_points_csv

    try:
        ckpt = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    stdzr = Standardizer.from_arrays(ckpt.norm_stats)
    meta = ckpt.meta

    variant = args.comm_variant or meta.get("comm_variant", "full")
    split_seed = args.split_seed if args.split_seed is not None else int(
        meta.get("split_seed", 0))
    fractions = meta.get("split_fractions", DEFAULT_FRACTIONS)

    cohort, report = _load_cohort_or_fail(args.cohort)
    dims = (report.d_x, report.d_a_struct, report.d_a_comm, report.d_tau,
            report.d_static_in)
    expected = (ckpt.cfg.d_x, ckpt.cfg.d_a_struct, ckpt.cfg.d_a_comm,
                ckpt.cfg.d_tau, ckpt.cfg.d_static_in)
    if cohort and dims != expected:
        raise CliError(f"cohort dims {dims} do not match checkpoint {expected}")

    if args.split == "all":
        chosen = cohort
    else:
        splits = dict(zip(("train", "val", "test"),
                          _split_cohort(cohort, fractions, split_seed)))
        chosen = splits[args.split]
    chosen = apply_comm_variant(chosen, variant)

    rcfg = _rollout_config(args, config)
    report_model = evaluate_protocol(ckpt.params, stdzr, chosen, rcfg)
    if report_model.summary is None:
        raise CliError(f"no evaluable patients in split {args.split!r}")

    rows = [("model", report_model.summary)]
    baselines = {}
    if not args.no_baselines:
        for name in ("carry_forward", "linear_trend"):
            baselines[name] = evaluate_baseline(name, chosen, rcfg)
            rows.append((name, baselines[name].summary))

    print(f"split={args.split} protocol={rcfg.protocol} variant={variant} "
          f"patients={len(chosen)} skipped={len(report_model.skipped_patients)}")
    _print_eval_table(rows)

    if args.report:
        _write_json(args.report, {
            "resolved_config": {
                "rollout": as_plain_dict(rcfg),
                "split": args.split,
                "comm_variant": variant,
                "split_seed": split_seed,
                "split_fractions": list(fractions),
                "checkpoint": str(args.checkpoint),
                "cohort": str(args.cohort),
            },
            "model": report_model.to_dict(),
            "baselines": {k: v.to_dict() for k, v in baselines.items()},
        })
        print(f"wrote report to {args.report}")
    if args.csv:
        write_points_csv(args.csv, report_model.results)
        print(f"wrote per-point csv to {args.csv}")
    return 0


def cmd_ablate(args, config: dict) -> int:
    from .data import apply_comm_variant
    from .model import ACTION_ENCODER_VARIANTS
    from .objective import LossWeights
    from .rollout import evaluate_protocol
    from .trainer import TrainConfig, fit

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    encoders = [e.strip() for e in args.encoders.split(",") if e.strip()]
    for v in variants:
        if v not in COMM_VARIANT_CHOICES:
            raise CliError(f"unknown comm variant {v!r}")
    for e in encoders:
        if e not in ACTION_ENCODER_VARIANTS:
            raise CliError(f"unknown action encoder {e!r}")

    seed = resolve_seed(args, config)
    split_seed = args.split_seed if args.split_seed is not None else int(
        config.get("split_seed", seed))
    fractions = config.get("split_fractions", DEFAULT_FRACTIONS)
    cohort, report = _load_cohort_or_fail(args.cohort)
    train, val, test = _split_cohort(cohort, fractions, split_seed)
    weights = LossWeights(**section(config, "loss"))
    tcfg = TrainConfig(**section(config, "train", {
        "epochs": args.epochs, "batch_size": args.batch_size}), seed=seed)
    rcfg = _rollout_config(args, config)

    rows = []
    for encoder in encoders:
        model_cfg = _model_config_for(
            report, section(config, "model", {"action_encoder": encoder}), seed)
        for variant in variants:
            log.info("ablation: variant=%s encoder=%s", variant, encoder)
            result = fit(model_cfg,
                         apply_comm_variant(train, variant),
                         apply_comm_variant(val, variant),
                         tcfg, weights)
            test_report = evaluate_protocol(
                result.params, result.standardizer,
                apply_comm_variant(test, variant), rcfg)
            if test_report.summary is None:
                raise CliError("ablation test split has no evaluable patients")
            rows.append({
                "comm_variant": variant,
                "action_encoder": encoder,
                "best_epoch": result.best_epoch,
                "val_mae": result.best_metric,
                "test_mae": test_report.summary.mae,
                "test_rmse": test_report.summary.rmse,
                "test_points": test_report.summary.n,
            })

    print(f"{'variant':<11} {'encoder':<7} {'val MAE':>9} {'test MAE':>9} "
          f"{'test RMSE':>10}")
    for row in rows:
        print(f"{row['comm_variant']:<11} {row['action_encoder']:<7} "
              f"{row['val_mae']:9.4f} {row['test_mae']:9.4f} "
              f"{row['test_rmse']:10.4f}")

    if args.out:
        _write_json(args.out, {
            "resolved_config": {
                "loss": weights.to_dict(),
                "train": as_plain_dict(tcfg),
                "rollout": as_plain_dict(rcfg),
                "variants": variants,
                "encoders": encoders,
                "seed": seed,
                "split_seed": split_seed,
                "split_fractions": list(fractions),
                "cohort": str(args.cohort),
            },
            "rows": rows,
        })
        print(f"wrote ablation report to {args.out}")
    return 0


def cmd_serve(args, config: dict) -> int:
    from .service import build_state, run_server

    try:
        state = build_state(args.checkpoint, args.cohort,
                            labels_path=args.labels)
    except FileNotFoundError as e:
        raise CliError(str(e))
    run_server(state, port=args.port)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--seed", type=int, help="seed for generation/training")
    common.add_argument("--threads", type=int,
                        help="cap numeric-library threads (set before numpy loads)")
    common.add_argument("-v", "--verbose", action="store_true",
                        help="info-level logging")

    parser = CliParser(prog="cmwm",
                       description="Action-conditioned latent forecasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="generate a synthetic cohort")
    p.add_argument("--out", required=True, help="cohort JSONL path")
    p.add_argument("--oracle-out", help="oracle sidecar path "
                                        "(default: <out>.oracle.json)")
    p.add_argument("--patients", type=int, help="number of patients")
    p.add_argument("--min-periods", type=int)
    p.add_argument("--max-periods", type=int)
    p.add_argument("--noise-std", type=float)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--cohort", required=True, help="cohort JSONL path")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history", help="training history JSONL output path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--comm-variant", choices=COMM_VARIANT_CHOICES)
    p.add_argument("--action-encoder", choices=("wide", "split"))
    p.add_argument("--split-seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint against baselines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--split", choices=SPLIT_CHOICES, default="test")
    p.add_argument("--protocol", choices=("dynamic50", "fixed"))
    p.add_argument("--context", type=int, help="context length for fixed protocol")
    p.add_argument("--anchor", action="store_true", help="enable first-step anchor")
    p.add_argument("--comm-variant", choices=COMM_VARIANT_CHOICES,
                   help="override the checkpoint's recorded variant")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--no-baselines", action="store_true")
    p.add_argument("--report", help="write report JSON here")
    p.add_argument("--csv", help="write per-point csv here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="train and compare action-channel variants")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", help="write comparison JSON here")
    p.add_argument("--variants", default="full,zero,intensity",
                   help="comma-separated comm variants")
    p.add_argument("--encoders", default="wide",
                   help="comma-separated action encoders")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--protocol", choices=("dynamic50", "fixed"))
    p.add_argument("--context", type=int)
    p.add_argument("--anchor", action="store_true")
    p.add_argument("--split-seed", type=int)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("serve", parents=[common],
                       help="serve what-if rollouts over HTTP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--labels", help="JSON list of structured-action labels")
    p.add_argument("--port", type=int)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads(args.threads)
        config = load_config_file(args.config)
        return args.fn(args, config)
    except (CliError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        log.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
