"""Command-line interface.

Examples::

    dyndetect synth --out data --seed 0
    dyndetect corrupt --data data/train.csv --kind symmetric --ratio 0.3 --out data
    dyndetect train-ref --data data/train_noisy.csv --out ref
    dyndetect train-detector --dynamics ref/dynamics.csv --out det
    dyndetect score --detector det/detector.json --dynamics other/dynamics.csv --out scored
    dyndetect eval --scores scored/scores.csv --dynamics other/dynamics.csv --out scored
    dyndetect identify --config pipeline.json --out runs/a

Exit codes: 0 success, 2 invalid config/arguments, 3 numerical divergence,
4 undefined metric.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from dyndetect import detector as det
from dyndetect.dynamics import read_dataset, read_dynamics, write_dataset, write_dynamics
from dyndetect.errors import ConfigError, DivergenceError, InvalidArgumentError, ParseError, UndefinedMetricError
from dyndetect.explain import explain_instance, write_importance_svg
from dyndetect.metrics import evaluate, reports_to_csv
from dyndetect.noise import NoiseSpec, contaminate_twice, inject, load_class_to_group
from dyndetect.pipeline import (
    DebugPlan,
    PipelineConfig,
    read_scores,
    run_debug,
    run_exclude_retrain,
    run_identification,
    write_scores,
)
from dyndetect.plots import emit_dynamics_plot
from dyndetect.reftrain import TrainConfig, make_blobs, scaled_drops, train_classifier

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_METRIC = 0, 2, 3, 4

log = logging.getLogger("dyndetect")


def _load_json(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- subcommands


def cmd_synth(args):
    cfg = {"num_classes": 10, "per_class": 200, "dim": 16, "separation": 4.0, "label_overlap_fraction": 0.0}
    cfg.update(_load_json(args.config))
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    train, test = make_blobs(seed=args.seed, **cfg)
    out = _out(args)
    write_dataset(train, out / "train.csv")
    write_dataset(test, out / "test.csv")
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


def cmd_corrupt(args):
    raw = _load_json(args.config)
    if args.kind is not None:
        raw["kind"] = args.kind
    if args.ratio is not None:
        raw["ratio"] = args.ratio
    raw.setdefault("seed", args.seed)
    if args.groups is not None:
        raw["class_to_group"] = load_class_to_group(args.groups)
    if "kind" not in raw or "ratio" not in raw:
        raise ConfigError("noise kind and ratio are required (--kind/--ratio or --config)")
    spec = NoiseSpec.from_dict(raw)
    data = read_dataset(args.data)
    if args.underlying_ratio is not None:
        under = NoiseSpec(args.underlying_kind, args.underlying_ratio, seed=args.seed + 1, class_to_group=spec.class_to_group)
        noisy = contaminate_twice(data, under, spec)
    else:
        noisy = inject(data, spec)
    out = _out(args)
    write_dataset(noisy, out / args.name)
    (out / "noise.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"corrupted {int(noisy.flags.sum())} of {len(noisy)} labels -> {out / args.name}")


def cmd_train_ref(args):
    raw = {"seed": args.seed, **_load_json(args.config)}
    for key in ("epochs", "batch_size", "learning_rate", "hidden"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    if args.epochs is not None and "lr_drop_epochs" not in _load_json(args.config):
        raw["lr_drop_epochs"] = scaled_drops(args.epochs)
    cfg = TrainConfig.from_dict(raw)
    data = read_dataset(args.data)
    model, table = train_classifier(data, cfg)
    out = _out(args)
    model.save(out / "model.json")
    write_dynamics(table, out / "dynamics.csv")
    print(f"trained {cfg.epochs} epochs; dynamics -> {out / 'dynamics.csv'}")


def _detector_config(args, **defaults):
    raw = {"seed": args.seed, **defaults, **_load_json(args.config)}
    for key in ("epochs", "learning_rate", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    return det.DetectorTrainConfig.from_dict(raw)


def _write_losses(losses, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for e, loss in enumerate(losses):
            fh.write(f"{e},{loss:.8f}\n")


def cmd_train_detector(args):
    table = read_dynamics(args.dynamics)
    result = det.train_detector(table, _detector_config(args), return_losses=True)
    out = _out(args)
    result.model.save(out / "detector.json")
    _write_losses(result.epoch_losses, out / "detector_losses.csv")
    print(f"detector (input_len={result.model.input_len}) -> {out / 'detector.json'}")


def cmd_finetune(args):
    model = det.DetectorModel.load(args.detector)
    table = read_dynamics(args.dynamics)
    result = det.fine_tune(model, table, _detector_config(args, learning_rate=det.FINETUNE_LR), return_losses=True)
    out = _out(args)
    result.model.save(out / "detector_finetuned.json")
    _write_losses(result.epoch_losses, out / "finetune_losses.csv")
    print(f"fine-tuned detector -> {out / 'detector_finetuned.json'}")


def cmd_score(args):
    table = read_dynamics(args.dynamics)
    if args.baseline:
        scores = det.baseline_score(table)
    else:
        scores = det.score(det.DetectorModel.load(args.detector), table)
    out = _out(args)
    write_scores(scores, out / args.name, table.flags)
    print(f"scored {len(scores)} samples -> {out / args.name}")


def cmd_eval(args):
    table = read_dynamics(args.dynamics)
    if table.flags is None:
        raise UndefinedMetricError("dynamics file carries no flags; metrics are undefined")
    scores = read_scores(args.scores)
    report = evaluate(scores, table.flags, args.method, args.noise_kind or "", args.noise_ratio)
    text = reports_to_csv([report], _out(args) / "report.csv")
    sys.stdout.write(text)


def _pipeline_config(args) -> PipelineConfig:
    raw = _load_json(args.config)
    raw["seed"] = args.seed if args.seed_given else raw.get("seed", 0)
    raw["out"] = args.out
    if getattr(args, "detector", None):
        raw["detector_path"] = args.detector
    return PipelineConfig.from_dict(raw)


def cmd_identify(args):
    cfg = _pipeline_config(args)
    result = run_identification(cfg)
    if result.report is not None:
        sys.stdout.write((Path(cfg.out) / "report.csv").read_text(encoding="utf-8"))


def cmd_exclude_retrain(args):
    cfg = _pipeline_config(args)
    if args.threshold is not None:
        cfg.threshold = args.threshold
    if args.top_k_percent is not None:
        cfg.top_k_percent = args.top_k_percent
    result = run_exclude_retrain(cfg)
    print(",".join(result.row()))
    print(",".join(str(v) for v in result.row().values()))


def cmd_debug(args):
    cfg = _pipeline_config(args)
    cfg.debug = DebugPlan(
        fraction=args.fraction if args.fraction is not None else cfg.debug.fraction,
        correction_mode=args.mode or cfg.debug.correction_mode,
    )
    result = run_debug(cfg)
    print(",".join(result.row()))
    print(",".join(str(v) for v in result.row().values()))


def cmd_explain(args):
    model = det.DetectorModel.load(args.detector)
    table = read_dynamics(args.dynamics).resampled(model.input_len)
    if not 0 <= args.sample_id < table.num_samples:
        raise InvalidArgumentError(f"sample_id {args.sample_id} out of range")
    exp = explain_instance(
        model,
        table.values[args.sample_id],
        num_perturbations=args.num_perturbations,
        kernel_width=args.kernel_width,
        seed=args.seed,
        window=args.window,
    )
    out = _out(args)
    exp.to_csv(out / f"explanation_{args.sample_id}.csv")
    if args.svg:
        write_importance_svg(exp, out / f"explanation_{args.sample_id}.svg", title=f"sample {args.sample_id}")
    print(
        f"score={exp.prediction:.4f} fidelity={exp.fidelity:.3f} first_half_share={exp.first_half_share():.3f}"
        + (" (ridge fallback)" if exp.ridge_fallback else "")
    )


def cmd_plot(args):
    table = read_dynamics(args.dynamics)
    out = _out(args)
    emit_dynamics_plot(table, out / args.name)
    print(f"plot -> {out / args.name}")


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config for this subcommand")
    common.add_argument("--seed", type=int, help="root random seed (default: 0, or the config's seed)")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dyndetect", description="Mislabel detection from training dynamics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate Gaussian-blob train/test splits")
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--separation", type=float)
    p.add_argument("--overlap", dest="label_overlap_fraction", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("corrupt", parents=[common], help="inject synthetic label noise")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("symmetric", "asymmetric", "superclass"))
    p.add_argument("--ratio", type=float)
    p.add_argument("--groups", help="JSON class->group map for superclass noise")
    p.add_argument("--underlying-kind", default="symmetric")
    p.add_argument("--underlying-ratio", type=float, help="contaminate twice: hidden noise applied first")
    p.add_argument("--name", default="train_noisy.csv")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train-ref", parents=[common], help="train the reference classifier and record dynamics")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--hidden", type=int)
    p.set_defaults(func=cmd_train_ref)

    for name, func, help_text in (
        ("train-detector", cmd_train_detector, "train a detector on flagged dynamics"),
        ("finetune", cmd_finetune, "fine-tune an existing detector (default lr 0.03)"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--dynamics", required=True)
        if name == "finetune":
            p.add_argument("--detector", required=True)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", dest="learning_rate", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("score", parents=[common], help="score dynamics with a detector")
    p.add_argument("--dynamics", required=True)
    p.add_argument("--detector")
    p.add_argument("--baseline", action="store_true", help="use 1 - mean probability instead of a detector")
    p.add_argument("--name", default="scores.csv")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common], help="mAP / ROC AUC / Precision@95 of scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--dynamics", required=True, help="dynamics file providing the flags")
    p.add_argument("--method", default="detector")
    p.add_argument("--noise-kind", default="")
    p.add_argument("--noise-ratio", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("identify", parents=[common], help="full pipeline: corrupt, train, detect, evaluate")
    p.add_argument("--detector", help="reuse a trained detector checkpoint")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("exclude-retrain", parents=[common], help="retrain without predicted mislabels")
    p.add_argument("--detector")
    p.add_argument("--threshold", type=float)
    p.add_argument("--top-k-percent", type=float)
    p.set_defaults(func=cmd_exclude_retrain)

    p = sub.add_parser("debug", parents=[common], help="correct the most suspicious labels and retrain")
    p.add_argument("--detector")
    p.add_argument("--fraction", type=float)
    p.add_argument("--mode", choices=("oracle", "pseudo_label"))
    p.set_defaults(func=cmd_debug)

    p = sub.add_parser("explain", parents=[common], help="per-epoch importance for one sample")
    p.add_argument("--detector", required=True)
    p.add_argument("--dynamics", required=True)
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--num-perturbations", type=int)
    p.add_argument("--kernel-width", type=float)
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("plot", parents=[common], help="SVG of mean dynamics, clean vs mislabeled")
    p.add_argument("--dynamics", required=True)
    p.add_argument("--name", default="dynamics.svg")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    if args.command == "score" and not args.baseline and not args.detector:
        parser.error("score needs --detector or --baseline")
    try:
        args.func(args)
    except UndefinedMetricError as exc:
        print(f"error: undefined metric: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, InvalidArgumentError, ParseError, OSError) as exc:
        where = getattr(exc, "stage", None)
        print(f"error{f' in stage {where}' if where else ''}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
