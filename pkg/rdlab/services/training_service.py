"""Two-stage training over lambda x alpha x seed grids, with run caching."""
import csv
import io
import json
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from rdlab.engine import adam_step, constant
from rdlab.schemas.training import MetricRow, RunRecord, TrainConfig
from rdlab.services.codec_service import CodecModel, encode_eval, encode_train, quality_db, rd_loss
from rdlab.services.regularizer_service import SourceModel, regularized_loss, source_model_step_loss, source_nll
from rdlab.services.sources import SourceBatch, build_dataset
from rdlab.utils.common import (
    ConfigError,
    InvalidArgument,
    ModelDiverged,
    TrainingDiverged,
    content_hash,
    ensure_directory_exists,
    format_float,
    get_logger,
)

logger = get_logger("trainer")

STREAMS = ("data", "noise", "init", "source_init")
METRIC_COLUMNS = ["step", "lambda", "alpha", "seed", "rate_bpd", "mse", "quality_db", "reg_bits"]
SHORTHANDS = {"alpha": "alphas", "lambda": "lambdas", "seed": "seeds"}


# ---- configuration -------------------------------------------------------

def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply `dotted.key=value` overrides; alpha/lambda/seed replace their grid lists"""
    document = json.loads(json.dumps(document))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = _parse_value(raw)
        if key in SHORTHANDS:
            key, value = SHORTHANDS[key], value if isinstance(value, list) else [value]
        node = document
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return document


def read_document(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"Error reading config {path}: {str(e)}") from e
    try:
        return tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Error parsing config {path}: {str(e)}") from e


def load_config(path=None, overrides: Sequence[str] = ()) -> TrainConfig:
    """Strictly parsed TrainConfig; unknown keys abort before any compute"""
    document = read_document(path) if path else {}
    document = apply_overrides(document, overrides)
    try:
        return TrainConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {str(e)}") from e


def run_hash(config: TrainConfig, lmbda: float, alpha: float, seed: int) -> str:
    return content_hash(config.run_payload(lmbda, alpha, seed))


def seed_streams(seed: int) -> Dict[str, np.random.Generator]:
    """Independent generators for data, AUN noise, codec init and source-model init"""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


# ---- metrics files -------------------------------------------------------

def metrics_csv(rows: Sequence[MetricRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([
            row.step, format_float(row.lmbda), format_float(row.alpha), row.seed,
            format_float(row.rate_bpd), format_float(row.mse), format_float(row.quality_db),
            format_float(row.reg_bits),
        ])
    return buffer.getvalue()


def read_metrics_csv(path) -> List[MetricRow]:
    with open(path, newline="") as handle:
        lines = [line for line in handle if not line.startswith("#")]
    return [
        MetricRow(step=int(r["step"]), lmbda=float(r["lambda"]), alpha=float(r["alpha"]), seed=int(r["seed"]),
                  rate_bpd=float(r["rate_bpd"]), mse=float(r["mse"]), quality_db=float(r["quality_db"]),
                  reg_bits=float(r["reg_bits"]))
        for r in csv.DictReader(lines)
    ]


# ---- a single run --------------------------------------------------------

class TrainingRun:
    """State of one (lambda, alpha, seed) run: codec, source model, streams, data"""

    def __init__(self, config: TrainConfig, lmbda: float, alpha: float, seed: int,
                 dataset: Optional[Tuple[SourceBatch, SourceBatch]] = None):
        if lmbda <= 0:
            raise InvalidArgument(f"lambda must be > 0, got {lmbda}")
        if alpha < 0:
            raise InvalidArgument(f"alpha must be >= 0, got {alpha}")
        self.config = config
        self.lmbda, self.alpha, self.seed = float(lmbda), float(alpha), int(seed)
        self.run_hash = run_hash(config, lmbda, alpha, seed)
        self.streams = seed_streams(seed)
        self.train_set, self.valid_set = dataset or build_dataset(config.source, config.validation_fraction)
        dim = config.source.dim
        self.codec = CodecModel(dim, config.architecture, self.streams["init"])
        self.source_model = SourceModel(dim, config.source_model, self.streams["source_init"])
        self.step_count = 0
        self.started = time.perf_counter()

    def next_batch(self) -> Tuple[np.ndarray, np.ndarray]:
        batch = self.config.batch_size
        rows = self.streams["data"].integers(0, len(self.train_set), size=batch)
        noise = self.streams["noise"].uniform(-0.5, 0.5, size=(batch, self.codec.latent))
        return self.train_set.values[rows], noise

    def stage_one(self, x: np.ndarray, noise: np.ndarray) -> float:
        """Update the codec; the source model is read through stop-gradient"""
        self.codec.store.zero_grad()
        out = encode_train(self.codec, constant(x), noise)
        if self.config.ablate_regularizer:
            loss = rd_loss(out, x, self.lmbda, self.config.distortion_scale)
        else:
            loss = regularized_loss(out, x, self.source_model, self.lmbda, self.alpha,
                                    self.config.distortion_scale).total
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(f"Non-finite codec loss at step {self.step_count + 1}", parameter="loss")
        loss.backward()
        adam_step(self.codec.store, lr=self.config.codec_lr)
        return loss.item()

    def stage_two(self, x: np.ndarray, noise: np.ndarray) -> float:
        """Update θ on reconstructions of the freshly updated, frozen codec"""
        self.source_model.store.zero_grad()
        x_hat = encode_train(self.codec, constant(x), noise, frozen=True).x_hat
        loss = source_model_step_loss(self.source_model, x, x_hat)
        loss.backward()
        adam_step(self.source_model.store, lr=self.config.source_lr)
        return loss.item()

    def step(self) -> None:
        x, noise = self.next_batch()
        self.stage_one(x, noise)
        self.step_count += 1
        if self.step_count % self.config.source_period == 0:
            self.stage_two(x, noise)

    def evaluate(self) -> MetricRow:
        out = encode_eval(self.codec, self.valid_set)
        mse_value = out.distortion.item()
        reg = source_nll(self.source_model, self.valid_set.values, out.x_hat, frozen=True).item()
        return MetricRow(
            step=self.step_count, lmbda=self.lmbda, alpha=self.alpha, seed=self.seed,
            rate_bpd=out.rate_bpd.item(), mse=mse_value, quality_db=quality_db(mse_value), reg_bits=reg,
            wall_time=time.perf_counter() - self.started,
        )

    def record(self, status: str, metrics: List[MetricRow], checkpoint: Optional[str] = None,
               error: Optional[str] = None, command: Optional[str] = None) -> RunRecord:
        return RunRecord(
            run_hash=self.run_hash, lmbda=self.lmbda, alpha=self.alpha, seed=self.seed,
            config=self.config.run_payload(self.lmbda, self.alpha, self.seed),
            status=status, metrics=metrics, checkpoint=checkpoint, error=error, command=command,
        )


class RunDirectory:
    """runs/<hash>/ with config.json, metrics.csv, record.json and checkpoint/"""

    def __init__(self, root, run_hash: str):
        self.path = Path(root) / run_hash

    @property
    def record_path(self) -> Path:
        return self.path / "record.json"

    @property
    def checkpoint(self) -> Path:
        return self.path / "checkpoint"

    def prepare(self, run: TrainingRun) -> None:
        ensure_directory_exists(str(self.path))
        payload = run.config.run_payload(run.lmbda, run.alpha, run.seed)
        (self.path / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))

    def save_models(self, run: TrainingRun) -> str:
        run.codec.save(self.checkpoint / "codec", config_hash=run.run_hash, step=run.step_count)
        run.source_model.save(self.checkpoint / "source", config_hash=run.run_hash, step=run.step_count)
        return str(self.checkpoint)

    def write(self, record: RunRecord) -> None:
        (self.path / "metrics.csv").write_text(metrics_csv(record.metrics))
        self.record_path.write_text(record.model_dump_json(indent=2))

    def load(self) -> Optional[RunRecord]:
        if not self.record_path.exists():
            return None
        return RunRecord.model_validate_json(self.record_path.read_text())


def train_one(config: TrainConfig, lmbda: float, alpha: float, seed: int, runs_dir=None,
              command: Optional[str] = None,
              dataset: Optional[Tuple[SourceBatch, SourceBatch]] = None) -> RunRecord:
    """Run the two-stage loop; rows at step 0, every eval_every steps and the last step"""
    run = TrainingRun(config, lmbda, alpha, seed, dataset)
    directory = RunDirectory(runs_dir, run.run_hash) if runs_dir is not None else None
    metrics: List[MetricRow] = []
    checkpoint = None

    def snapshot(status: str, error: Optional[str] = None) -> RunRecord:
        record = run.record(status, list(metrics), checkpoint, error, command)
        if directory is not None:
            directory.write(record)
        return record

    def evaluate() -> None:
        nonlocal checkpoint
        metrics.append(run.evaluate())
        if directory is not None:
            checkpoint = directory.save_models(run)
            snapshot("running")

    logger.info(f"Run {run.run_hash}: lambda={run.lmbda} alpha={run.alpha} seed={run.seed} steps={config.steps}")
    if directory is not None:
        directory.prepare(run)
    try:
        evaluate()
        while run.step_count < config.steps:
            run.step()
            if run.step_count % config.eval_every == 0 or run.step_count == config.steps:
                evaluate()
    except (TrainingDiverged, ModelDiverged) as e:
        logger.warning(f"Run {run.run_hash} diverged at step {run.step_count}: {str(e)}")
        return snapshot("diverged", f"step {run.step_count}: {str(e)}")
    except KeyboardInterrupt:
        snapshot("aborted", f"interrupted at step {run.step_count}")
        raise
    logger.info(f"Run {run.run_hash} completed")
    return snapshot("completed")


# ---- grids ---------------------------------------------------------------

def grid_jobs(config: TrainConfig) -> List[Tuple[float, float, int]]:
    return [(l, a, s) for l, a, s in product(config.lambdas, config.alphas, config.seeds)]


def load_run(run_dir) -> RunRecord:
    record = RunDirectory(Path(run_dir).parent, Path(run_dir).name).load()
    if record is None:
        raise InvalidArgument(f"No run record in {run_dir}")
    return record


def list_runs(runs_dir) -> List[RunRecord]:
    root = Path(runs_dir)
    if not root.exists():
        return []
    records = [RunDirectory(root, p.name).load() for p in sorted(root.iterdir()) if p.is_dir()]
    return [r for r in records if r is not None]


def cached_record(runs_dir, config: TrainConfig, lmbda: float, alpha: float, seed: int) -> Optional[RunRecord]:
    if runs_dir is None:
        return None
    record = RunDirectory(runs_dir, run_hash(config, lmbda, alpha, seed)).load()
    return record if record is not None and record.status == "completed" else None


def plan_grid(config: TrainConfig, runs_dir) -> List[Tuple[Tuple[float, float, int], bool]]:
    """Each job with whether a completed run is already cached"""
    return [(job, cached_record(runs_dir, config, *job) is not None) for job in grid_jobs(config)]


def _run_job(payload: Dict[str, Any]) -> Dict[str, Any]:
    config = TrainConfig.model_validate(payload["config"])
    try:
        record = train_one(config, payload["lambda"], payload["alpha"], payload["seed"],
                           payload["runs_dir"], payload["command"])
    except KeyboardInterrupt:
        raise
    except Exception as e:
        return _failed(config, payload, e).model_dump(mode="json")
    return record.model_dump(mode="json")


def _failed(config: TrainConfig, payload: Dict[str, Any], error: Exception, status: str = "failed") -> RunRecord:
    lmbda, alpha, seed = payload["lambda"], payload["alpha"], payload["seed"]
    record = RunRecord(
        run_hash=run_hash(config, lmbda, alpha, seed), lmbda=lmbda, alpha=alpha, seed=seed,
        config=config.run_payload(lmbda, alpha, seed), status=status,
        error=f"Error training run: {str(error)}", command=payload["command"],
    )
    if payload["runs_dir"] is not None:
        directory = RunDirectory(payload["runs_dir"], record.run_hash)
        ensure_directory_exists(str(directory.path))
        directory.write(record)
    logger.error(f"Run {record.run_hash} {status}: {str(error)}")
    return record


def train_grid(config: TrainConfig, runs_dir=None, workers: int = 1,
               command: Optional[str] = None) -> List[RunRecord]:
    """One run per (lambda, alpha, seed); completed runs are reused, failures are recorded"""
    jobs = grid_jobs(config)
    records: Dict[Tuple[float, float, int], RunRecord] = {}
    pending = []
    for job in jobs:
        cached = cached_record(runs_dir, config, *job)
        if cached is not None:
            logger.info(f"Reusing cached run {cached.run_hash}")
            records[job] = cached
        else:
            pending.append(job)
    payloads = {
        job: {
            "config": config.model_dump(mode="json"), "lambda": job[0], "alpha": job[1], "seed": job[2],
            "runs_dir": str(runs_dir) if runs_dir is not None else None, "command": command,
        }
        for job in pending
    }
    logger.info(f"Grid: {len(jobs)} runs, {len(jobs) - len(pending)} cached, {len(pending)} to train")

    if workers <= 1 or len(pending) <= 1:
        for job in pending:
            records[job] = RunRecord.model_validate(_run_job(payloads[job]))
    else:
        executor = ProcessPoolExecutor(max_workers=workers)
        futures = {job: executor.submit(_run_job, payloads[job]) for job in pending}
        try:
            for job in pending:
                records[job] = RunRecord.model_validate(futures[job].result())
        except KeyboardInterrupt:
            for job, future in futures.items():
                if job not in records:
                    future.cancel()
                    _mark_aborted(config, payloads[job])
            executor.shutdown(wait=False, cancel_futures=True)
            raise
        executor.shutdown()
    return [records[job] for job in jobs]


def _mark_aborted(config: TrainConfig, payload: Dict[str, Any]) -> None:
    if payload["runs_dir"] is None:
        return
    directory = RunDirectory(payload["runs_dir"], run_hash(config, payload["lambda"], payload["alpha"], payload["seed"]))
    record = directory.load()
    if record is not None and record.status in ("completed", "diverged", "failed"):
        return
    if record is None:
        _failed(config, payload, KeyboardInterrupt("interrupted before start"), status="aborted")
    else:
        directory.write(record.model_copy(update={"status": "aborted", "error": "interrupted"}))


def load_models(record: RunRecord) -> Tuple[CodecModel, SourceModel]:
    if not record.checkpoint:
        raise InvalidArgument(f"Run {record.run_hash} has no checkpoint")
    codec, header = CodecModel.load(Path(record.checkpoint) / "codec")
    if header.get("config_hash") != record.run_hash:
        raise InvalidArgument(f"Checkpoint header hash {header.get('config_hash')} does not match run {record.run_hash}")
    source_model, _ = SourceModel.load(Path(record.checkpoint) / "source")
    return codec, source_model
