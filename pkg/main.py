# masrc/main.py
import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from checkpoint import check_compatible, load_checkpoint, save_checkpoint, write_metrics_log
from data_io import boundary_rate, load_dataset, split_dataset, synth_generate, write_dataset
from errors import EXIT_OK, EXIT_RUNTIME, ConfigError, DataFormatError, ShapeMismatchError, exit_code_for
from kernel import kernel_gradient_suite
from mcd import init_masrc_params, model_gradient_suite
from metrics import evaluate_predictions, predicted_segmentation
from schemas import ABLATION_PRESETS, ModalityConfig, RunConfig, SynthConfig, TrainConfig
from training import evaluate, predict_scores, run_seeds, train

load_dotenv()

GRADCHECK_TOLERANCE = 1e-4

logger = logging.getLogger("masrc")


# --- configuration ---------------------------------------------------------

def worker_threads() -> int:
    raw = os.getenv("MASRC_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"MASRC_THREADS must be a positive integer, got {raw!r}.") from None
    if threads < 1:
        raise ConfigError(f"MASRC_THREADS must be a positive integer, got {raw!r}.")
    return threads


def _configure_logging() -> None:
    level = os.getenv("MASRC_LOG_LEVEL", "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"MASRC_LOG_LEVEL {level!r} is not a logging level.")
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _read_json(path: Optional[str]) -> dict:
    if not path:
        return {}
    config_path = Path(path)
    if not config_path.is_file():
        raise DataFormatError(f"Config file not found: {config_path}")
    try:
        return json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"Config file {config_path} is not valid JSON: {e}") from e


def _modality_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    if getattr(args, "modality", None):
        overrides["modality"] = args.modality
    if getattr(args, "no_eld", False):
        overrides["use_eld"] = False
    if getattr(args, "no_psd", False):
        overrides["use_psd"] = False
    if getattr(args, "affiliation", None):
        overrides["affiliation"] = args.affiliation
    if getattr(args, "no_d2w", False):
        overrides["use_d2w"] = False
    if getattr(args, "no_w2d", False):
        overrides["use_w2d"] = False
    return overrides


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Flags override the config file, which overrides the model defaults."""
    data = _read_json(args.config)
    for flag, key in (("seed", "seed"), ("regime", "regime"), ("threshold", "threshold"), ("out", "out_dir"),
                      ("train_manifest", "train_manifest"), ("val_manifest", "val_manifest")):
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    modality = dict(data.get("modality") or {})
    modality.update(_modality_overrides(args))
    data["modality"] = modality
    return RunConfig.model_validate(data)


def _config_from_meta(meta: dict, args: argparse.Namespace) -> TrainConfig:
    data = dict(meta.get("train_config") or {})
    if getattr(args, "threshold", None) is not None:
        data["threshold"] = args.threshold
    data["show_progress"] = False
    return TrainConfig.model_validate(data)


def _load_model(checkpoint_path: str, dataset, args: argparse.Namespace):
    if not dataset:
        raise ConfigError(f"Manifest {args.manifest} lists no videos.")
    params, meta = load_checkpoint(checkpoint_path)
    config = _config_from_meta(meta, args)
    first = dataset[0]
    expected = init_masrc_params(config.modality, first.dim_entity, first.dim_place, config.window,
                                 hidden=config.hidden)
    check_compatible(params, expected)
    for key, actual in (("dim_entity", first.dim_entity), ("dim_place", first.dim_place)):
        if key in meta and meta[key] != actual:
            raise ShapeMismatchError(f"Checkpoint was trained with {key}={meta[key]} but {first.video_id} "
                                     f"has {actual}.", slot=key)
    return params, config


# --- subcommands -----------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    print("Step 1: Loading synthetic dataset config...")
    config = SynthConfig.model_validate(_read_json(args.config))
    seed = args.seed if args.seed is not None else 0
    out_dir = Path(args.out or "data/synth")

    print(f"Step 2: Generating {config.num_videos} videos (seed {seed})...")
    videos = synth_generate(config, seed)
    manifest = write_dataset(videos, out_dir)
    print(f"  Wrote {manifest}")
    if config.num_val_videos:
        train_videos, val_videos = split_dataset(videos, config.num_val_videos)
        print(f"  Wrote {write_dataset(train_videos, out_dir, 'train.jsonl')}")
        print(f"  Wrote {write_dataset(val_videos, out_dir, 'val.jsonl')}")

    shots = sum(v.num_shots for v in videos)
    print("\n--- Synthetic Dataset ---")
    print(f"Videos: {len(videos)}")
    print(f"Shots: {shots}")
    print(f"Boundary rate: {boundary_rate(videos):.4f}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    print("Step 1: Resolving run configuration...")
    config = build_run_config(args)
    if not config.train_manifest:
        raise ConfigError("No training manifest given (config 'train_manifest' or --train-manifest).")
    out_dir = Path(config.out_dir)

    print("Step 2: Loading datasets...")
    train_seqs = load_dataset(config.train_manifest)
    val_seqs = load_dataset(config.val_manifest) if config.val_manifest else []
    print(f"  {len(train_seqs)} training videos, {len(val_seqs)} validation videos.")
    if not val_seqs:
        print("Warning: no validation manifest; checkpoints are selected on the training videos.")

    print(f"Step 3: Training ({config.regime}, {args.threads} worker thread(s))...")
    result = train(train_seqs, config, val_seqs, workers=args.threads)

    print("Step 4: Writing outputs...")
    out_dir.mkdir(parents=True, exist_ok=True)
    first = train_seqs[0]
    train_config = TrainConfig.model_validate(config.model_dump(include=set(TrainConfig.model_fields)))
    meta = {
        "train_config": train_config.model_dump(mode="json"),
        "dim_entity": first.dim_entity,
        "dim_place": first.dim_place,
        "best_epoch": result.best_epoch,
    }
    checkpoint_path = save_checkpoint(result.params, out_dir / "checkpoint.bin", meta)
    metrics_path = write_metrics_log(result.records, out_dir / "metrics.jsonl")
    (out_dir / "run_config.json").write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")

    final = result.final_record
    print("\n--- Training Complete ---")
    print(f"Best epoch: {result.best_epoch} (AP {result.best_val_ap:.4f})")
    print(f"Final {final.split} record: AP {final.ap:.4f}, mIoU {final.miou:.4f}, F1 {final.f1:.4f}")
    print(f"Checkpoint: {checkpoint_path}")
    print(f"Metrics log: {metrics_path}")
    return EXIT_OK


def _read_predictions(path: str) -> dict[str, list[float]]:
    pred_path = Path(path)
    if not pred_path.is_file():
        raise DataFormatError(f"Predictions file not found: {pred_path}")
    scores = {}
    for line_no, line in enumerate(pred_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            scores[row["video_id"]] = [float(s) for s in row["scores"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{pred_path}:{line_no}: malformed prediction line: {e}") from e
    return scores


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.manifest)
    if not dataset:
        raise ConfigError(f"Manifest {args.manifest} lists no videos.")
    missing = [s.video_id for s in dataset if s.labels is None]
    if missing:
        raise ConfigError(f"Cannot evaluate: video {missing[0]} has no labels.")
    threshold = args.threshold if args.threshold is not None else 0.5

    if args.predictions:
        predictions = _read_predictions(args.predictions)
        per_video = {}
        for seq in dataset:
            if seq.video_id not in predictions or len(predictions[seq.video_id]) != seq.num_shots:
                raise DataFormatError(f"Predictions do not cover every shot of {seq.video_id}.")
            per_video[seq.video_id] = (predictions[seq.video_id], seq.labels)
        metrics = evaluate_predictions(per_video, threshold, args.miou_mode)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --predictions.")
        params, config = _load_model(args.checkpoint, dataset, args)
        config = config.model_copy(update={"miou_mode": args.miou_mode})
        metrics, _ = evaluate(params, dataset, config, workers=args.threads)

    summary = {"split": args.split, "ap": metrics["ap"], "miou": metrics["miou"], "f1": metrics["f1"],
               "per_video": metrics["per_video"]}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    print("Step 1: Loading checkpoint and dataset...")
    dataset = load_dataset(args.manifest)
    params, config = _load_model(args.checkpoint, dataset, args)

    print(f"Step 2: Scoring {len(dataset)} videos...")
    lines = []
    for seq in dataset:
        scores = predict_scores(params, seq, config, args.threads)
        scenes = predicted_segmentation(scores, config.threshold).scenes
        lines.append(json.dumps({"video_id": seq.video_id, "scores": scores.tolist(),
                                 "scenes": [list(s) for s in scenes]}, sort_keys=True))
    out_path = Path(args.out or "predictions.jsonl")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(f"Step 3: Wrote {out_path}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.max_entries < 0:
        raise ConfigError(f"--max-entries must be >= 0, got {args.max_entries}.")
    max_entries = args.max_entries or None
    modality = ModalityConfig(**_modality_overrides(args))

    print("Step 1: Checking kernel operations...")
    worst = kernel_gradient_suite(seeds=args.seeds, tolerance=GRADCHECK_TOLERANCE)
    failed = False
    for op, err in worst.items():
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        failed |= status == "FAIL"
        print(f"  {op:<28} max rel error {err:.2e}  {status}")

    scope = f"{max_entries} sampled entries per slot" if max_entries else "every entry"
    print(f"Step 2: Checking the full model ({scope})...")
    reports = model_gradient_suite(seeds=args.seeds, config=modality, tolerance=GRADCHECK_TOLERANCE,
                                   max_entries_per_slot=max_entries)
    for seed, report in enumerate(reports):
        failures = report.failures()
        failed |= bool(failures)
        excluded = sum(s.excluded for s in report.slots.values())
        print(f"  seed {seed}: {len(report.slots)} slots, max rel error {report.max_error:.2e}, "
              f"{excluded} kink entries skipped" + (f", FAILED: {', '.join(failures)}" if failures else ""))
    if failed:
        print("Error: gradient check failed.")
        return EXIT_RUNTIME
    print("All gradient checks passed.")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    print("Step 1: Resolving run configuration...")
    config = build_run_config(args)
    if not config.train_manifest:
        raise ConfigError("No training manifest given (config 'train_manifest' or --train-manifest).")
    unknown = [p for p in args.presets if p not in ABLATION_PRESETS]
    if unknown:
        raise ConfigError(f"Unknown ablation preset(s) {unknown}; choose from {sorted(ABLATION_PRESETS)}.")
    train_seqs = load_dataset(config.train_manifest)
    val_seqs = load_dataset(config.val_manifest) if config.val_manifest else []
    seeds = range(config.seed, config.seed + args.seeds)

    print(f"Step 2: Training {len(args.presets)} presets x {args.seeds} seeds...")
    lines = []
    for name in args.presets:
        preset_config = config.model_copy(update={"modality": ABLATION_PRESETS[name], "show_progress": False})
        summary = run_seeds(train_seqs, val_seqs, preset_config, seeds, args.threads)
        line = json.dumps({"preset": name, "mean_ap": summary["mean_ap"],
                           "per_seed": {str(k): v for k, v in summary["per_seed"].items()}}, sort_keys=True)
        print(line)
        lines.append(line)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(f"Step 3: Wrote {out_dir / 'ablation.jsonl'}")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="JSON config file; flags override its fields.")
    common.add_argument("--seed", type=int, help="Random seed.")
    common.add_argument("--out", type=str, help="Output directory (or file for predict).")
    common.add_argument("--modality", choices=["entity", "place", "both"], help="Feature modalities to use.")
    common.add_argument("--no-eld", action="store_true", help="Skip the entity relation module (raw entity features).")
    common.add_argument("--no-psd", action="store_true", help="Skip the place relation module (raw place features).")
    common.add_argument("--affiliation", choices=["both", "similarity", "proximity"],
                        help="Detail-to-wide affiliation rule of the place graph.")
    common.add_argument("--no-d2w", action="store_true", help="Skip the detail -> wide pass of the place graph.")
    common.add_argument("--no-w2d", action="store_true", help="Skip the wide -> detail pass of the place graph.")
    common.add_argument("--regime", choices=["supervised", "self_supervised", "transfer"], help="Learning regime.")
    common.add_argument("--threshold", type=float, help="Score threshold for F1 and predicted scenes (default: 0.5).")

    parser = argparse.ArgumentParser(description="Detect scene boundaries in shot feature sequences.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset with planted scenes.")

    p_train = sub.add_parser("train", parents=[common], help="Train a model and write checkpoint + metrics.")
    p_train.add_argument("--train-manifest", type=str, help="Manifest of the training videos.")
    p_train.add_argument("--val-manifest", type=str, help="Manifest of the validation videos.")

    p_eval = sub.add_parser("eval", parents=[common], help="Report AP / mIoU / F1 on a labelled dataset.")
    p_eval.add_argument("--checkpoint", type=str, help="Checkpoint written by 'train'.")
    p_eval.add_argument("--manifest", type=str, required=True, help="Manifest of the videos to evaluate.")
    p_eval.add_argument("--predictions", type=str, help="Score a predictions file instead of running the model.")
    p_eval.add_argument("--split", type=str, default="eval", help="Split name echoed in the output.")
    p_eval.add_argument("--miou-mode", choices=["symmetric", "gt"], default="symmetric")

    p_predict = sub.add_parser("predict", parents=[common], help="Write per-shot scores and predicted scenes.")
    p_predict.add_argument("--checkpoint", type=str, required=True)
    p_predict.add_argument("--manifest", type=str, required=True)

    p_grad = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of every gradient.")
    p_grad.add_argument("--seeds", type=int, default=5)
    p_grad.add_argument("--max-entries", type=int, default=12,
                        help="Entries sampled per parameter slot (default: 12); 0 checks every entry.")

    p_ablate = sub.add_parser("ablate", parents=[common], help="Train ablation presets over several seeds.")
    p_ablate.add_argument("--train-manifest", type=str)
    p_ablate.add_argument("--val-manifest", type=str)
    p_ablate.add_argument("--presets", nargs="+", default=["full", "entity_long", "place_short", "mcd_only"],
                          help=f"Presets among: {', '.join(ABLATION_PRESETS)}.")
    p_ablate.add_argument("--seeds", type=int, default=5)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        args.threads = worker_threads()
        return COMMANDS[args.command](args)
    except (ValidationError, ValueError, FileNotFoundError) as e:
        print(f"Error: {e}")
        return exit_code_for(e)
    except Exception as e:
        print(f"Error: {type(e).__name__}: {e}")
        if logger.isEnabledFor(logging.DEBUG):
            traceback.print_exc()
        return exit_code_for(e)


if __name__ == '__main__':
    sys.exit(main())
