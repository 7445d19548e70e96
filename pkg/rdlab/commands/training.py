"""train and eval"""
import json
from pathlib import Path

import numpy as np

from rdlab import config
from rdlab.commands import announce, emit_json, positive_int
from rdlab.schemas.evaluation import RdCurve
from rdlab.schemas.training import ShiftConfig, SourceConfig
from rdlab.services.codec_service import CodecModel
from rdlab.services.evaluation_service import curve_table, evaluate_checkpoint
from rdlab.services.report_service import provenance, table_csv
from rdlab.services.sources import build_dataset, create_source
from rdlab.services.training_service import load_config, load_run, train_grid
from rdlab.utils.common import EXIT_FAILURE, EXIT_OK, ConfigError, InvalidArgument


def add_config_arguments(parser) -> None:
    parser.add_argument("--config", help="TrainConfig document (JSON or TOML)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a dotted config key; alpha/lambda/seed set a single-value grid")
    parser.add_argument("--runs-dir", default=str(config.RUNS_DIR), help="Run cache directory")
    parser.add_argument("--workers", type=positive_int, default=config.WORKERS, help="Parallel runs")


def register(subparsers) -> None:
    train = subparsers.add_parser("train", help="Train every (lambda, alpha, seed) run of a config")
    add_config_arguments(train)
    train.set_defaults(handler=train_command)

    evaluate = subparsers.add_parser("eval", help="Evaluate a codec checkpoint on a (possibly shifted) source")
    target = evaluate.add_mutually_exclusive_group(required=True)
    target.add_argument("--run", help="Run directory (runs/<hash>)")
    target.add_argument("--checkpoint", help="Codec checkpoint directory")
    evaluate.add_argument("--source", help="SourceConfig JSON; defaults to the run's validation split")
    evaluate.add_argument("--shift", choices=["identity", "mean_shift", "rotate", "heavy_tail", "reweight"],
                          help="Evaluate on a shifted variant of the source")
    evaluate.add_argument("--magnitude", type=float, help="Shift magnitude (default depends on the shift)")
    evaluate.add_argument("--samples", type=positive_int, default=2000, help="Vectors drawn for evaluation")
    evaluate.add_argument("--seed", type=int, default=0, help="Evaluation sampling seed")
    evaluate.add_argument("--out", help="Write a CSV row here instead of printing JSON")
    evaluate.set_defaults(handler=eval_command)


def summarize(records) -> list:
    return [
        {
            "run_hash": r.run_hash, "lambda": r.lmbda, "alpha": r.alpha, "seed": r.seed, "status": r.status,
            "final": r.final.model_dump(exclude={"wall_time"}) if r.final else None, "error": r.error,
        }
        for r in records
    ]


def train_command(args) -> int:
    train_config = load_config(args.config, args.overrides)
    announce(train_config.model_dump(mode="json"), train_config.seeds)
    records = train_grid(train_config, Path(args.runs_dir), args.workers, command=args.command_line)
    emit_json({"command": args.command_line, "runs": summarize(records)})
    return EXIT_OK if all(r.status == "completed" for r in records) else EXIT_FAILURE


def _read_source(path: str) -> SourceConfig:
    try:
        return SourceConfig.model_validate(json.loads(Path(path).read_text()))
    except (OSError, ValueError) as e:
        raise ConfigError(f"Error loading source config {path}: {str(e)}") from e


def eval_command(args) -> int:
    record = None
    if args.run:
        record = load_run(args.run)
        if not record.checkpoint:
            raise InvalidArgument(f"Run {record.run_hash} has no checkpoint")
        model, header = CodecModel.load(Path(record.checkpoint) / "codec")
    else:
        model, header = CodecModel.load(args.checkpoint)

    shift = ShiftConfig.with_default(args.shift, args.magnitude) if args.shift else None
    if args.source:
        source = _read_source(args.source)
    elif record is not None:
        source = SourceConfig.model_validate(record.config["source"])
    else:
        raise ConfigError("eval --checkpoint needs --source")
    announce({"checkpoint": header, "source": source.model_dump(mode="json"),
              "shift": shift.model_dump() if shift else None}, [args.seed])

    if shift is None and not args.source and record is not None:
        _, batch = build_dataset(source, record.config.get("validation_fraction", 0.1))
    else:
        batch = create_source(source, shift).sample(args.samples, np.random.default_rng(args.seed))
    lmbda = record.lmbda if record is not None else None
    point = evaluate_checkpoint(model, batch, lmbda)
    if args.out:
        table = curve_table(RdCurve(label="eval", points=[point]))
        hashes = [header["config_hash"]] if header.get("config_hash") else []
        Path(args.out).write_text(table_csv(table, provenance(args.command_line, hashes, [args.seed])))
    else:
        emit_json({"command": args.command_line, "config_hash": header.get("config_hash"),
                   "point": point.model_dump()})
    return EXIT_OK
