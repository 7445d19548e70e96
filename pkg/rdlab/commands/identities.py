"""verify-identities and probe-identities"""
import argparse
import json
from pathlib import Path

from rdlab import config
from rdlab.commands import announce, emit_json, positive_int
from rdlab.schemas.evaluation import ProbeSource
from rdlab.services.codec_service import CodecModel
from rdlab.services.coding_service import replay_failure, verify_batch
from rdlab.services.evaluation_service import identity_probe
from rdlab.services.training_service import load_run
from rdlab.utils.common import EXIT_FAILURE, EXIT_OK, InvalidArgument


def register(subparsers) -> None:
    verify = subparsers.add_parser("verify-identities", help="Check the coding-model entropy identities on random specs")
    verify.add_argument("--count", type=positive_int, default=1000, help="Specs per coding model")
    verify.add_argument("--seed", type=int, default=1, help="Root seed expanded into per-spec seeds")
    verify.add_argument("--max-alphabet", type=positive_int, default=64, help="Largest source alphabet")
    verify.add_argument("--kind", choices=["direct", "transform", "both"], default="both", help="Coding model(s)")
    verify.add_argument("--workers", type=positive_int, default=config.WORKERS, help="Worker processes")
    verify.add_argument("--replay", help="Re-verify a serialized failing spec instead of a random batch")
    verify.add_argument("--out", help="Write the JSON report here instead of stdout")
    verify.add_argument("--inject-mutant", action="store_true", help=argparse.SUPPRESS)
    verify.set_defaults(handler=verify_identities)

    probe = subparsers.add_parser("probe-identities", help="Enumerate a trained codec on a grid and check its identities")
    target = probe.add_mutually_exclusive_group(required=True)
    target.add_argument("--run", help="Run directory (runs/<hash>)")
    target.add_argument("--checkpoint", help="Codec checkpoint directory")
    probe.add_argument("--dims", type=positive_int, default=2, help="Grid dimensions (<= 4)")
    probe.add_argument("--grid", type=positive_int, default=32, help="Points per dimension (<= 32)")
    probe.add_argument("--low", type=float, default=-3.0, help="Lowest grid coordinate")
    probe.add_argument("--high", type=float, default=3.0, help="Highest grid coordinate")
    probe.add_argument("--integer", action="store_true", help="Integer grid starting at --low")
    probe.add_argument("--weights", choices=["uniform", "gaussian"], default="uniform", help="Grid probabilities")
    probe.add_argument("--bins", type=positive_int, nargs="+", default=[64], help="Reconstruction bins per dimension")
    probe.add_argument("--out", help="Write the JSON report here instead of stdout")
    probe.set_defaults(handler=probe_identities)


def verify_identities(args) -> int:
    if args.replay:
        try:
            document = json.loads(Path(args.replay).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidArgument(f"Error reading replay file {args.replay}: {str(e)}") from e
        announce({"replay": args.replay}, [document.get("seed")] if document.get("seed") is not None else [])
        report = replay_failure(document)
        emit_json(report.model_dump(mode="json", by_alias=True), args.out)
        return EXIT_OK if report.passed else EXIT_FAILURE

    kinds = ["direct", "transform"] if args.kind == "both" else [args.kind]
    announce({"count": args.count, "max_alphabet": args.max_alphabet, "kinds": kinds}, [args.seed])
    reports = {
        kind: verify_batch(kind, args.count, args.seed, args.max_alphabet, args.workers,
                           inject_mutant=args.inject_mutant)
        for kind in kinds
    }
    document = {
        "command": args.command_line,
        "seed": args.seed,
        "ok": all(r.ok for r in reports.values()),
        "reports": {kind: r.model_dump(mode="json", by_alias=True) for kind, r in reports.items()},
    }
    emit_json(document, args.out)
    return EXIT_OK if document["ok"] else EXIT_FAILURE


def probe_identities(args) -> int:
    if args.run:
        record = load_run(args.run)
        if not record.checkpoint:
            raise InvalidArgument(f"Run {record.run_hash} has no checkpoint")
        model, header = CodecModel.load(Path(record.checkpoint) / "codec")
    else:
        model, header = CodecModel.load(args.checkpoint)
    probe = ProbeSource(dims=args.dims, grid=args.grid, low=args.low, high=args.high, integer=args.integer,
                        weights=args.weights)
    announce({"probe": probe.model_dump(), "bins": args.bins, "checkpoint": header}, [])
    reports = [identity_probe(model, probe, bins) for bins in args.bins]
    document = {
        "command": args.command_line,
        "config_hash": header.get("config_hash"),
        "reports": [r.model_dump(mode="json") for r in reports],
    }
    emit_json(document, args.out)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAILURE
