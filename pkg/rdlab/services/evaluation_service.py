"""R-D curves, BD-Rate, entropy-identity probes and the study reports."""
import csv
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import isotonic_regression

from rdlab.config import MAX_TABLE_CELLS
from rdlab.schemas.evaluation import BdResult, ProbeReport, ProbeSource, RdCurve, RdPoint, ReportTable
from rdlab.schemas.training import RunRecord, ShiftConfig, SourceConfig
from rdlab.services.codec_service import CodecModel, encode_eval, quality_db
from rdlab.services.coding_service import identity_report
from rdlab.services.info_service import joint_from_cells
from rdlab.services.report_service import provenance, write_report
from rdlab.services.sources import SourceBatch, create_source
from rdlab.utils.common import InvalidArgument, NoOverlap, ResourceLimit, get_logger

logger = get_logger("evaluation")

MIN_BD_POINTS = 4
MAX_PROBE_DIMS = 4
MAX_PROBE_GRID = 32
THEOREM_CHECK = "H(U)=H(X)-H(X|Xhat)+H(U|Xhat)"

ALPHA_REFERENCE = "image-scale reference: alpha=1 was best at -1.24% BD-Rate"
SHIFT_REFERENCE = "image-scale reference: pathology images with the attention model, -2.38% BD-Rate"


# ---- BD-Rate -------------------------------------------------------------

def _monotone_points(curve: RdCurve, role: str) -> Tuple[np.ndarray, np.ndarray, int]:
    """Sort by rate and project quality onto the closest non-decreasing sequence (pool adjacent violators)"""
    points = curve.sorted().points
    if any(p.rate_bpd <= 0 for p in points):
        raise InvalidArgument(f"{role} curve has a non-positive rate")
    if len(points) < MIN_BD_POINTS:
        raise InvalidArgument(f"{role} curve needs at least {MIN_BD_POINTS} points, has {len(points)}")
    quality = np.array([p.quality_db for p in points])
    projected = isotonic_regression(quality, increasing=True).x
    moved = int(np.count_nonzero(np.abs(projected - quality) > 0))
    if moved:
        logger.warning(f"{role} curve is not monotone; projected {moved} point(s) onto a monotone curve")
    return projected, np.array([p.rate_bpd for p in points]), moved


def _fit_degree(quality: np.ndarray, role: str) -> int:
    """Cubic unless pooling left fewer than four distinct qualities"""
    distinct = np.unique(quality).size
    if distinct < 2:
        raise InvalidArgument(f"{role} curve collapses to a single quality after projection")
    return min(3, distinct - 1)


def bd_rate(anchor: RdCurve, test: RdCurve) -> BdResult:
    """Average log-rate difference of cubic fits over the shared quality interval, in percent"""
    q_anchor, r_anchor, moved_anchor = _monotone_points(anchor, "anchor")
    q_test, r_test, moved_test = _monotone_points(test, "test")
    degree_anchor, degree_test = _fit_degree(q_anchor, "anchor"), _fit_degree(q_test, "test")
    low = max(q_anchor.min(), q_test.min())
    high = min(q_anchor.max(), q_test.max())
    if not high > low:
        raise NoOverlap(f"Quality ranges do not overlap: anchor [{q_anchor.min()}, {q_anchor.max()}], "
                        f"test [{q_test.min()}, {q_test.max()}]")

    fit_anchor = np.polyfit(q_anchor, np.log10(r_anchor), degree_anchor)
    fit_test = np.polyfit(q_test, np.log10(r_test), degree_test)
    int_anchor, int_test = np.polyint(fit_anchor), np.polyint(fit_test)
    area_anchor = np.polyval(int_anchor, high) - np.polyval(int_anchor, low)
    area_test = np.polyval(int_test, high) - np.polyval(int_test, low)
    avg_diff = (area_test - area_anchor) / (high - low)

    def rms(fit, q, r):
        return float(np.sqrt(np.mean((np.polyval(fit, q) - np.log10(r)) ** 2)))

    return BdResult(
        bd_rate_percent=float((10.0 ** avg_diff - 1.0) * 100.0),
        overlap=[float(low), float(high)],
        diagnostics={
            "method": "least-squares cubic of log10(rate) in quality, closed-form integral",
            "anchor_points": int(q_anchor.size),
            "test_points": int(q_test.size),
            "anchor_projected": moved_anchor,
            "test_projected": moved_test,
            "anchor_degree": degree_anchor,
            "test_degree": degree_test,
            "anchor_residual_rms": rms(fit_anchor, q_anchor, r_anchor),
            "test_residual_rms": rms(fit_test, q_test, r_test),
            "anchor_fit": fit_anchor.tolist(),
            "test_fit": fit_test.tolist(),
        },
    )


# ---- curves --------------------------------------------------------------

def evaluate_checkpoint(model: CodecModel, batch, lmbda: Optional[float] = None) -> RdPoint:
    """Eval-mode operating point of a codec on a batch"""
    values = batch.values if isinstance(batch, SourceBatch) else np.asarray(batch, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != model.dim:
        raise InvalidArgument(f"Batch shape {values.shape} does not match codec dimension {model.dim}")
    out = encode_eval(model, values)
    mse_value = out.distortion.item()
    return RdPoint(rate_bpd=out.rate_bpd.item(), quality_db=quality_db(mse_value), mse=mse_value, lmbda=lmbda)


def _row_at(record: RunRecord, step: Optional[int]):
    if step is None:
        return record.final
    return next((row for row in record.metrics if row.step == step), None)


def curve_from_runs(records: Iterable[RunRecord], label: str = "", step: Optional[int] = None) -> RdCurve:
    """One point per run (final metrics, or the row at `step`)"""
    points, hashes = [], []
    for record in sorted(records, key=lambda r: r.lmbda):
        row = _row_at(record, step)
        if row is None:
            raise InvalidArgument(f"Run {record.run_hash} has no metrics at step {step}")
        points.append(RdPoint(rate_bpd=row.rate_bpd, quality_db=row.quality_db, mse=row.mse, lmbda=record.lmbda))
        hashes.append(record.run_hash)
    return RdCurve(label=label, points=points, provenance=hashes).sorted()


def read_curve_csv(path) -> RdCurve:
    """Curve from a CSV with rate_bpd and quality_db columns; metric logs contribute their last row per lambda"""
    path = Path(path)
    try:
        with open(path, newline="") as handle:
            rows = list(csv.DictReader(line for line in handle if not line.startswith("#")))
    except OSError as e:
        raise InvalidArgument(f"Error reading curve {path}: {str(e)}") from e
    if not rows or not {"rate_bpd", "quality_db"} <= set(rows[0]):
        raise InvalidArgument(f"{path} needs rate_bpd and quality_db columns")
    if "step" in rows[0] and "lambda" in rows[0]:
        last: Dict[str, dict] = {}
        for row in rows:
            last[row["lambda"]] = row
        rows = list(last.values())
    points = [
        RdPoint(rate_bpd=float(r["rate_bpd"]), quality_db=float(r["quality_db"]),
                lmbda=float(r["lambda"]) if r.get("lambda") else None)
        for r in rows
    ]
    return RdCurve(label=path.stem, points=points).sorted()


def curve_table(curve: RdCurve) -> ReportTable:
    return ReportTable(
        name=curve.label or "curve",
        columns=["lambda", "rate_bpd", "quality_db", "mse"],
        rows=[[p.lmbda if p.lmbda is not None else "", p.rate_bpd, p.quality_db,
               p.mse if p.mse is not None else ""] for p in curve.points],
    )


# ---- identity probe ------------------------------------------------------

def probe_grid(probe: ProbeSource, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Grid points embedded in `dim` coordinates and their probabilities"""
    if probe.dims > MAX_PROBE_DIMS or probe.grid > MAX_PROBE_GRID:
        raise ResourceLimit(f"Probe grid {probe.grid}^{probe.dims} exceeds the enumeration cap "
                            f"({MAX_PROBE_GRID} points per dim, {MAX_PROBE_DIMS} dims)")
    if probe.dims > dim:
        raise InvalidArgument(f"Probe has {probe.dims} dims but the codec input has {dim}")
    if probe.integer:
        axis = probe.low + np.arange(probe.grid, dtype=np.float64)
    else:
        axis = np.linspace(probe.low, probe.high, probe.grid)
    mesh = np.stack(np.meshgrid(*([axis] * probe.dims), indexing="ij"), axis=-1).reshape(-1, probe.dims)
    points = np.zeros((mesh.shape[0], dim))
    if probe.offset is not None:
        if len(probe.offset) != dim:
            raise InvalidArgument(f"Probe offset needs {dim} entries")
        points[:] = probe.offset
    points[:, :probe.dims] = mesh
    if probe.weights == "gaussian":
        weights = np.exp(-0.5 * np.sum(mesh * mesh, axis=1))
    else:
        weights = np.ones(mesh.shape[0])
    return points, weights / weights.sum()


def _row_codes(values: np.ndarray) -> Tuple[np.ndarray, int]:
    unique, inverse = np.unique(values, axis=0, return_inverse=True)
    return inverse.reshape(-1), unique.shape[0]


def bin_reconstructions(x_hat: np.ndarray, bins: int) -> np.ndarray:
    """Uniform bins over the observed range of each dimension; power-of-two counts nest"""
    low, high = x_hat.min(axis=0), x_hat.max(axis=0)
    span = high - low
    t = np.divide(x_hat - low, span, out=np.zeros_like(x_hat), where=span > 0)
    return np.minimum(np.floor(t * bins), bins - 1).astype(np.int64)


def identity_probe(model: CodecModel, probe: ProbeSource, bins: int = 64) -> ProbeReport:
    """Exact (X, U, Xhat) joint of the codec on a grid, with Xhat binned, and its identities"""
    if bins < 1:
        raise InvalidArgument("bins must be >= 1")
    points, weights = probe_grid(probe, model.dim)
    if points.shape[0] > MAX_TABLE_CELLS:
        raise ResourceLimit(f"{points.shape[0]} probe points exceed {MAX_TABLE_CELLS}")
    out = encode_eval(model, points)
    u_codes, num_u = _row_codes(out.u)
    xhat_codes, num_xhat = _row_codes(bin_reconstructions(out.x_hat.values, bins))
    cells = np.column_stack([np.arange(points.shape[0]), u_codes, xhat_codes])
    joint = joint_from_cells([points.shape[0], num_u, num_xhat], ["X", "U", "Xhat"], cells, weights)
    report = identity_report(joint, "transform")
    return ProbeReport(
        bins=bins,
        grid_points=int(points.shape[0]),
        num_indices=num_u,
        num_reconstructions=num_xhat,
        identities=[check.model_dump(by_alias=True) for check in report.identities],
        residual_H_U_given_Xhat=report.residual_H_U_given_Xhat,
        theorem_gap=report.check(THEOREM_CHECK).gap,
        passed=report.passed,
    )


# ---- study reports -------------------------------------------------------

def _completed(records: Iterable[RunRecord]) -> List[RunRecord]:
    return [r for r in records if r.status == "completed"]


def _group(records: Iterable[RunRecord], key) -> Dict[tuple, List[RunRecord]]:
    groups: Dict[tuple, List[RunRecord]] = defaultdict(list)
    for record in records:
        groups[key(record)].append(record)
    for k, members in groups.items():
        lambdas = [r.lmbda for r in members]
        if len(set(lambdas)) != len(lambdas):
            raise InvalidArgument(f"Duplicate lambda values in run group {k}")
    return groups


def _anchors(records: Sequence[RunRecord]) -> Dict[int, List[RunRecord]]:
    anchors: Dict[int, List[RunRecord]] = defaultdict(list)
    for r in records:
        if r.alpha == 0:
            anchors[r.seed].append(r)
    if not anchors:
        raise InvalidArgument("Missing anchor: no completed alpha=0 runs")
    return anchors


def _same_lambdas(anchor: Sequence[RunRecord], test: Sequence[RunRecord], what: str) -> None:
    if sorted(r.lmbda for r in anchor) != sorted(r.lmbda for r in test):
        raise InvalidArgument(f"{what} does not share the anchor's lambda grid")


def _finish(table: ReportTable, records: Sequence[RunRecord], out_dir, command, stem, plot=None,
            rd_curves: Sequence[RdCurve] = ()) -> ReportTable:
    if out_dir is None:
        return table
    meta = provenance(command, [r.run_hash for r in records], [r.seed for r in records])
    return write_report(table, out_dir, meta, stem=stem, plot=plot, rd_curves=rd_curves)


def _seed_mean_curve(groups: Sequence[Sequence[RunRecord]], label: str) -> RdCurve:
    """Per-lambda mean of rate and quality over seeds"""
    curves = [curve_from_runs(members) for members in groups]
    by_lambda = [sorted(c.points, key=lambda p: p.lmbda) for c in curves]
    points = [
        RdPoint(rate_bpd=float(np.mean([seed_points[i].rate_bpd for seed_points in by_lambda])),
                quality_db=float(np.mean([seed_points[i].quality_db for seed_points in by_lambda])),
                lmbda=by_lambda[0][i].lmbda)
        for i in range(len(by_lambda[0]))
    ]
    return RdCurve(label=label, points=points, provenance=[h for c in curves for h in c.provenance]).sorted()





def alpha_sweep_report(runs: Iterable[RunRecord], out_dir=None, command: Optional[str] = None) -> ReportTable:
    """Per-seed BD-Rate of every alpha against the alpha=0 anchor, plus per-alpha medians"""
    runs = _completed(runs)
    anchors = _anchors(runs)
    groups = _group(runs, lambda r: (r.alpha, r.seed))
    cells: Dict[float, List[float]] = defaultdict(list)
    rows = []
    for alpha, seed in sorted(groups):
        if seed not in anchors:
            raise InvalidArgument(f"Missing anchor for seed {seed}")
        members = groups[(alpha, seed)]
        _same_lambdas(anchors[seed], members, f"alpha={alpha} seed={seed}")
        value = 0.0 if alpha == 0 else bd_rate(curve_from_runs(anchors[seed]), curve_from_runs(members)).bd_rate_percent
        cells[alpha].append(value)
        rows.append([alpha, str(seed), value])
    for alpha in sorted(cells):
        rows.append([alpha, "median", float(np.median(cells[alpha]))])
    table = ReportTable(name="alpha_sweep", columns=["alpha", "seed", "bd_rate_percent"], rows=rows,
                        annotations=[ALPHA_REFERENCE])
    alphas = sorted(cells)
    plot = {
        "x_label": "alpha", "y_label": "BD-Rate vs anchor (%)", "title": "Effect of the regularization factor",
        "series": {"median": [alphas, [float(np.median(cells[a])) for a in alphas]]},
    }
    by_alpha = defaultdict(list)
    for (alpha, _), members in sorted(groups.items()):
        by_alpha[alpha].append(members)
    rd_curves = [_seed_mean_curve(by_alpha[a], f"alpha={a:g}") for a in alphas]
    return _finish(table, runs, out_dir, command, "alpha_sweep", plot, rd_curves)


def training_progress_report(runs: Iterable[RunRecord], out_dir=None, command: Optional[str] = None) -> ReportTable:
    """BD-Rate of each regularized group against its anchor at every shared evaluation step"""
    runs = _completed(runs)
    anchors = _anchors(runs)
    groups = _group(runs, lambda r: (r.alpha, r.seed))
    rows, series = [], {}
    for alpha, seed in sorted(groups):
        if alpha == 0 or seed not in anchors:
            continue
        members = groups[(alpha, seed)]
        _same_lambdas(anchors[seed], members, f"alpha={alpha} seed={seed}")
        shared = set.intersection(*[{m.step for m in r.metrics} for r in [*members, *anchors[seed]]])
        xs, ys = [], []
        for step in sorted(shared):
            try:
                value = bd_rate(curve_from_runs(anchors[seed], step=step),
                                curve_from_runs(members, step=step)).bd_rate_percent
            except (InvalidArgument, NoOverlap) as e:
                logger.info(f"No BD-Rate at step {step} (alpha={alpha}, seed={seed}): {str(e)}")
                value = float("nan")
            rows.append([step, alpha, seed, value])
            if np.isfinite(value):
                xs.append(step)
                ys.append(value)
        series[f"alpha={alpha} seed={seed}"] = [xs, ys]
    table = ReportTable(name="training_progress", columns=["step", "alpha", "seed", "bd_rate_percent"], rows=rows)
    plot = {"x_label": "step", "y_label": "BD-Rate vs anchor (%)", "title": "BD-Rate during training",
            "series": series}
    return _finish(table, runs, out_dir, command, "training_progress", plot)


ALIGNMENT_ROLES = {"factorized": "aligned", "causal": "stronger", "weak": "weaker"}


def alignment_report(runs: Iterable[RunRecord], out_dir=None, command: Optional[str] = None) -> ReportTable:
    """BD-Rate against the anchor for each source-model mode at equal alpha"""
    runs = _completed(runs)
    anchor_pool = [r for r in runs if r.alpha == 0]
    preferred = [r for r in anchor_pool if r.source_mode == "factorized"] or anchor_pool
    anchors = _anchors(preferred)
    groups = _group([r for r in runs if r.alpha > 0], lambda r: (r.source_mode, r.alpha, r.seed))
    rows = []
    for mode, alpha, seed in sorted(groups, key=lambda k: (list(ALIGNMENT_ROLES).index(k[0]), k[1], k[2])):
        if seed not in anchors:
            raise InvalidArgument(f"Missing anchor for seed {seed}")
        members = groups[(mode, alpha, seed)]
        _same_lambdas(anchors[seed], members, f"mode={mode} alpha={alpha} seed={seed}")
        value = bd_rate(curve_from_runs(anchors[seed]), curve_from_runs(members)).bd_rate_percent
        rows.append([mode, ALIGNMENT_ROLES[mode], alpha, seed, value])
    table = ReportTable(name="alignment", columns=["source_model", "role", "alpha", "seed", "bd_rate_percent"],
                        rows=rows)
    return _finish(table, runs, out_dir, command, "alignment")


def _curve_on(models: Sequence[Tuple[float, CodecModel]], batch: SourceBatch, label: str) -> RdCurve:
    points = [evaluate_checkpoint(model, batch, lmbda) for lmbda, model in sorted(models, key=lambda m: m[0])]
    return RdCurve(label=label, points=points).sorted()


def domain_shift_report(anchor_models: Sequence[Tuple[float, CodecModel]],
                        test_models: Sequence[Tuple[float, CodecModel]],
                        base: SourceConfig, shifts: Sequence[ShiftConfig], samples: int = 2000, seed: int = 0,
                        records: Sequence[RunRecord] = (), out_dir=None,
                        command: Optional[str] = None) -> ReportTable:
    """BD-Rate of the regularized codecs against the anchor on the base source and every shifted variant"""
    for _, model in [*anchor_models, *test_models]:
        if model.dim != base.dim:
            raise InvalidArgument(f"Codec dimension {model.dim} does not match source dimension {base.dim}")
    domains = [("in-domain", None), *[(s.kind, s) for s in shifts]]
    rows, shifted_values, rd_curves = [], [], []
    for name, shift in domains:
        batch = create_source(base, shift).sample(samples, np.random.default_rng(seed))
        anchor_curve = _curve_on(anchor_models, batch, f"{name} anchor")
        test_curve = _curve_on(test_models, batch, f"{name} regularized")
        rd_curves += [anchor_curve, test_curve]
        value = bd_rate(anchor_curve, test_curve).bd_rate_percent
        rows.append([name, shift.magnitude if shift is not None else 0.0, value])
        if shift is not None:
            shifted_values.append(value)
    annotations = [SHIFT_REFERENCE]
    if shifted_values:
        annotations.insert(0, f"unweighted mean over shifted sources: {np.mean(shifted_values):.4f}%")
    table = ReportTable(name="domain_shift", columns=["domain", "magnitude", "bd_rate_percent"], rows=rows,
                        annotations=annotations)
    if out_dir is None:
        return table
    meta = provenance(command, [r.run_hash for r in records], [r.seed for r in records] or [seed])
    return write_report(table, out_dir, meta, stem="domain_shift", rd_curves=rd_curves)
