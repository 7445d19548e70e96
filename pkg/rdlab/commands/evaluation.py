"""bd-rate, sweep-alpha, domain-shift and alignment"""
from pathlib import Path
from typing import List

from rdlab import config
from rdlab.commands import announce, emit_json, float_list, positive_int
from rdlab.commands.training import add_config_arguments, summarize
from rdlab.schemas.training import DEFAULT_SHIFT_MAGNITUDES, ShiftConfig
from rdlab.services.evaluation_service import (
    alignment_report,
    alpha_sweep_report,
    bd_rate,
    domain_shift_report,
    read_curve_csv,
    training_progress_report,
)
from rdlab.services.training_service import load_config, load_models, plan_grid, train_grid
from rdlab.utils.common import EXIT_FAILURE, EXIT_OK, InvalidArgument, get_logger

logger = get_logger("cli")


def register(subparsers) -> None:
    bd = subparsers.add_parser("bd-rate", help="BD-Rate of a test curve against an anchor curve")
    bd.add_argument("--anchor", required=True, help="Anchor CSV (rate_bpd, quality_db columns)")
    bd.add_argument("--test", required=True, help="Test CSV")
    bd.add_argument("--out", help="Write the JSON BdResult here")
    bd.set_defaults(handler=bd_rate_command)

    sweep = subparsers.add_parser("sweep-alpha", help="Train an alpha grid and report BD-Rate per alpha")
    add_config_arguments(sweep)
    sweep.add_argument("--alphas", type=float_list, help="Comma-separated alpha values (must include 0)")
    sweep.add_argument("--out", default=str(config.REPORTS_DIR), help="Report directory")
    sweep.set_defaults(handler=sweep_alpha_command)

    shift = subparsers.add_parser("domain-shift", help="BD-Rate of regularized vs anchor codecs on shifted sources")
    add_config_arguments(shift)
    shift.add_argument("--alpha", type=float, default=1.0, help="Regularization factor of the test codecs")
    shift.add_argument("--shifts", default="mean_shift,rotate,heavy_tail,reweight",
                       help="Comma-separated shift kinds")
    shift.add_argument("--samples", type=positive_int, default=2000, help="Vectors per evaluated source")
    shift.add_argument("--eval-seed", type=int, default=0, help="Sampling seed of the evaluation sets")
    shift.add_argument("--out", default=str(config.REPORTS_DIR), help="Report directory")
    shift.set_defaults(handler=domain_shift_command)

    align = subparsers.add_parser("alignment", help="Compare aligned, stronger and weaker source models")
    add_config_arguments(align)
    align.add_argument("--alpha", type=float, default=1.0, help="Regularization factor shared by all modes")
    align.add_argument("--modes", default="factorized,causal,weak", help="Comma-separated source-model modes")
    align.add_argument("--out", default=str(config.REPORTS_DIR), help="Report directory")
    align.set_defaults(handler=alignment_command)


def bd_rate_command(args) -> int:
    announce({"anchor": args.anchor, "test": args.test}, [])
    result = bd_rate(read_curve_csv(args.anchor), read_curve_csv(args.test))
    print(f"BD-Rate: {result.bd_rate_percent:.2f}%")
    if args.out:
        emit_json({"command": args.command_line, **result.model_dump()}, args.out)
    return EXIT_OK


def _train(train_config, args):
    planned = plan_grid(train_config, Path(args.runs_dir))
    new_runs = sum(1 for _, cached in planned if not cached)
    records = train_grid(train_config, Path(args.runs_dir), args.workers, command=args.command_line)
    return records, new_runs


def sweep_alpha_command(args) -> int:
    overrides = list(args.overrides)
    if args.alphas is not None:
        overrides.append(f"alphas={args.alphas}")
    train_config = load_config(args.config, overrides)
    announce(train_config.model_dump(mode="json"), train_config.seeds)
    records, new_runs = _train(train_config, args)
    sweep = alpha_sweep_report(records, args.out, args.command_line)
    progress = training_progress_report(records, args.out, args.command_line)
    emit_json({
        "command": args.command_line, "new_runs": new_runs, "runs": summarize(records),
        "alpha_sweep": sweep.model_dump(), "training_progress_files": progress.files,
    })
    return EXIT_OK if all(r.status == "completed" for r in records) else EXIT_FAILURE


def shift_alphas(alpha: float) -> List[float]:
    return sorted({0.0, float(alpha)})


def domain_shift_command(args) -> int:
    kinds = [k.strip() for k in args.shifts.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in DEFAULT_SHIFT_MAGNITUDES]
    if unknown:
        raise InvalidArgument(f"Unknown shift kinds: {unknown}")
    train_config = load_config(args.config, [*args.overrides, f"alphas={shift_alphas(args.alpha)}"])
    announce(train_config.model_dump(mode="json"), train_config.seeds)
    records, new_runs = _train(train_config, args)
    seed = train_config.seeds[0]
    completed = [r for r in records if r.status == "completed" and r.seed == seed]
    anchor = [(r.lmbda, load_models(r)[0]) for r in completed if r.alpha == 0]
    test = [(r.lmbda, load_models(r)[0]) for r in completed if r.alpha == args.alpha]
    if len(anchor) != len(train_config.lambdas) or len(test) != len(train_config.lambdas):
        logger.error("Some runs did not complete; domain-shift report needs every lambda")
        return EXIT_FAILURE
    shifts = [ShiftConfig.with_default(k) for k in kinds]
    table = domain_shift_report(anchor, test, train_config.source, shifts, args.samples, args.eval_seed,
                                records=completed, out_dir=args.out, command=args.command_line)
    emit_json({"command": args.command_line, "new_runs": new_runs, "domain_shift": table.model_dump()})
    return EXIT_OK


def alignment_command(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    anchor_config = load_config(args.config, [*args.overrides, "alphas=[0.0]", "source_model.mode=\"factorized\""])
    configs = [anchor_config] + [
        load_config(args.config, [*args.overrides, f"alphas={[args.alpha]}", f"source_model.mode=\"{mode}\""])
        for mode in modes
    ]
    announce({"anchor": anchor_config.model_dump(mode="json"), "alpha": args.alpha, "modes": modes},
             anchor_config.seeds)
    records, new_runs = [], 0
    for train_config in configs:
        batch, fresh = _train(train_config, args)
        records += batch
        new_runs += fresh
    table = alignment_report(records, args.out, args.command_line)
    emit_json({"command": args.command_line, "new_runs": new_runs, "alignment": table.model_dump()})
    return EXIT_OK if all(r.status == "completed" for r in records) else EXIT_FAILURE
