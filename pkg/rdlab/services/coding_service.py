"""Direct and transform coding models as deterministic maps on finite alphabets.

Each spec induces an exact joint law p(x, u, xhat) in which every conditional
is 0/1, so the entropy identities of both coding models can be checked by
enumeration.
"""
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from rdlab.config import IDENTITY_TOLERANCE
from rdlab.schemas.coding import (
    BatchVerificationReport,
    DirectCodecSpec,
    IdentityCheck,
    IdentityReport,
    RateDistortionProbeResult,
    TransformCodecSpec,
    VerificationFailure,
)
from rdlab.services.info_service import (
    Alphabet,
    JointTable,
    conditional_entropy,
    entropy,
    mutual_information,
)
from rdlab.utils.common import InvalidArgument, NoFeasibleCodec, get_logger

logger = get_logger("coding")

CodecSpec = Union[DirectCodecSpec, TransformCodecSpec]

X, U, XHAT = "X", "U", "Xhat"

MAX_PROBE_CELLS = 4096
EXHAUSTIVE_PARTITION_LIMIT = 10
CONTIGUOUS_PARTITION_LIMIT = 16


def encode_symbols(spec: CodecSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Index u and reconstruction xhat of every source symbol"""
    x = np.arange(len(spec.source))
    if isinstance(spec, DirectCodecSpec):
        u = np.asarray(spec.quantizer)[x]
        xhat = np.asarray(spec.codebook)[u]
    else:
        y = np.asarray(spec.analysis)[x]
        u = np.asarray(spec.quantizer)[y]
        yhat = np.asarray(spec.dequantizer)[u]
        xhat = np.asarray(spec.synthesis)[yhat]
    return u, xhat


def induced_joint(spec: CodecSpec) -> JointTable:
    """Exact joint law over (X, U, Xhat) induced by a deterministic codec"""
    u, xhat = encode_symbols(spec)
    p = np.asarray(spec.source, dtype=np.float64)
    cells = np.column_stack([np.arange(p.size), u, xhat])
    axes = [
        Alphabet(len(spec.source), name=X),
        Alphabet(spec.num_indices, name=U),
        Alphabet(int(spec.xhat_size), name=XHAT),
    ]
    return JointTable(axes, cells, p)


def _check(name: str, lhs: float, rhs: float) -> IdentityCheck:
    gap = abs(lhs - rhs)
    return IdentityCheck(name=name, lhs=lhs, rhs=rhs, gap=gap, passed=gap <= IDENTITY_TOLERANCE)


def identity_report(joint: JointTable, kind: str, seed: Optional[int] = None) -> IdentityReport:
    """Evaluate the identities of a coding model on a joint over axes X, U, Xhat"""
    h_x = entropy(joint, X)
    h_u = entropy(joint, U)
    h_xhat = entropy(joint, XHAT)
    i_x_xhat = mutual_information(joint, X, XHAT)
    h_x_given_xhat = conditional_entropy(joint, X, XHAT)
    h_u_given_xhat = conditional_entropy(joint, U, XHAT)

    checks = [_check("I(X;Xhat)=H(Xhat)", i_x_xhat, h_xhat)]
    if kind == "direct":
        checks += [
            _check("H(Xhat)=H(U)", h_xhat, h_u),
            _check("H(U)=I(X;Xhat)", h_u, i_x_xhat),
            _check("H(U)=H(X)-H(X|Xhat)", h_u, h_x - h_x_given_xhat),
            _check("H(U|Xhat)=0", h_u_given_xhat, 0.0),
        ]
    elif kind == "transform":
        checks += [
            _check("H(Xhat)=H(U)-H(U|Xhat)", h_xhat, h_u - h_u_given_xhat),
            _check("H(U)=I(X;Xhat)+H(U|Xhat)", h_u, i_x_xhat + h_u_given_xhat),
            _check("H(U)=H(X)-H(X|Xhat)+H(U|Xhat)", h_u, h_x - h_x_given_xhat + h_u_given_xhat),
        ]
    else:
        raise InvalidArgument(f"Unknown coding model kind: {kind}")
    checks += [
        _check("H(Xhat|X)=0", conditional_entropy(joint, XHAT, X), 0.0),
        _check("H(Xhat|U)=0", conditional_entropy(joint, XHAT, U), 0.0),
    ]
    return IdentityReport(kind=kind, identities=checks, residual_H_U_given_Xhat=h_u_given_xhat, seed=seed)


def verify_direct_identities(spec: DirectCodecSpec, seed: Optional[int] = None) -> IdentityReport:
    return identity_report(induced_joint(spec), "direct", seed=seed)


def verify_transform_identities(spec: TransformCodecSpec, seed: Optional[int] = None,
                                mutate: Optional[Callable[[JointTable], JointTable]] = None) -> IdentityReport:
    joint = induced_joint(spec)
    if mutate is not None:
        joint = mutate(joint)
    return identity_report(joint, "transform", seed=seed)


def corrupt_synthesis_midway(joint: JointTable) -> JointTable:
    """Test hook: the heaviest source symbol's reconstruction splits onto a fresh codeword.

    The result is no longer a deterministic codec, so at least one identity fails.
    """
    k = int(np.argmax(joint.mass))
    axes = list(joint.axes)
    xhat_axis = joint.axis_index(XHAT)
    fresh = axes[xhat_axis].size
    axes[xhat_axis] = Alphabet(fresh + 1, name=XHAT)
    moved = joint.cells[k].copy()
    moved[xhat_axis] = fresh
    mass = joint.mass.copy()
    mass[k] *= 0.5
    cells = np.vstack([joint.cells, moved[None, :]])
    return JointTable(axes, cells, np.append(mass, joint.mass[k] - mass[k]))


def _random_surjection(rng: np.random.Generator, domain: int, codomain: int) -> np.ndarray:
    labels = np.concatenate([np.arange(codomain), rng.integers(0, codomain, domain - codomain)])
    rng.shuffle(labels)
    return labels


def random_direct_spec(seed: int, max_alphabet: int = 64) -> DirectCodecSpec:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_alphabet + 1))
    m = int(rng.integers(1, n + 1))
    xhat_size = m + int(rng.integers(0, 4))
    return DirectCodecSpec(
        source=rng.dirichlet(np.ones(n)).tolist(),
        quantizer=_random_surjection(rng, n, m).tolist(),
        codebook=rng.choice(xhat_size, size=m, replace=False).tolist(),
        xhat_size=xhat_size,
    )


def random_transform_spec(seed: int, max_alphabet: int = 64, merge_probability: float = 0.5) -> TransformCodecSpec:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_alphabet + 1))
    y_size = int(rng.integers(1, n + 1))
    m = int(rng.integers(1, y_size + 1))
    yhat_size = m + int(rng.integers(0, 4))
    dequantizer = rng.choice(yhat_size, size=m, replace=False)

    # adjacent indices share a reconstruction with probability merge_probability
    groups = np.zeros(m, dtype=np.int64)
    for u in range(1, m):
        groups[u] = groups[u - 1] if rng.random() < merge_probability else groups[u - 1] + 1
    num_groups = int(groups[-1]) + 1
    xhat_size = num_groups + int(rng.integers(0, 3))
    relabel = rng.permutation(xhat_size)[:num_groups]

    synthesis = rng.integers(0, xhat_size, yhat_size)
    synthesis[dequantizer] = relabel[groups]
    return TransformCodecSpec(
        source=rng.dirichlet(np.ones(n)).tolist(),
        analysis=rng.integers(0, y_size, n).tolist(),
        y_size=y_size,
        quantizer=_random_surjection(rng, y_size, m).tolist(),
        dequantizer=dequantizer.tolist(),
        yhat_size=yhat_size,
        synthesis=synthesis.tolist(),
        xhat_size=xhat_size,
    )


def _verify_one(job: Tuple[str, int, int, bool]) -> Tuple[int, CodecSpec, IdentityReport]:
    kind, seed, max_alphabet, inject_mutant = job
    if kind == "direct":
        spec = random_direct_spec(seed, max_alphabet)
        return seed, spec, verify_direct_identities(spec, seed=seed)
    spec = random_transform_spec(seed, max_alphabet)
    mutate = corrupt_synthesis_midway if inject_mutant else None
    return seed, spec, verify_transform_identities(spec, seed=seed, mutate=mutate)


def spec_seeds(seed: int, count: int) -> List[int]:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(count)]


def verify_batch(kind: str, count: int, seed: int = 1, max_alphabet: int = 64,
                 workers: int = 1, inject_mutant: bool = False) -> BatchVerificationReport:
    """Verify `count` randomized specs; the summary is independent of worker scheduling.

    `inject_mutant` corrupts every transform joint before checking (error-path hook).
    """
    if count < 1:
        raise InvalidArgument(f"count must be >= 1, got {count}")
    if kind not in ("direct", "transform"):
        raise InvalidArgument(f"Unknown coding model kind: {kind}")
    if max_alphabet < 1:
        raise InvalidArgument(f"max_alphabet must be >= 1, got {max_alphabet}")
    jobs = [(kind, s, max_alphabet, inject_mutant) for s in spec_seeds(seed, count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_verify_one, jobs, chunksize=max(1, count // (4 * workers))))
    else:
        results = [_verify_one(job) for job in jobs]
    results.sort(key=lambda item: item[0])

    failures = [
        VerificationFailure(seed=s, kind=kind, spec=spec.model_dump(), report=report,
                            mutant=inject_mutant and kind == "transform")
        for s, spec, report in results if not report.passed
    ]
    max_gap = max(check.gap for _, _, report in results for check in report.identities)
    summary = BatchVerificationReport(
        kind=kind,
        count=count,
        seed=seed,
        max_alphabet=max_alphabet,
        passed=sum(1 for _, _, report in results if report.passed),
        residual_positive=sum(1 for _, _, report in results if report.residual_H_U_given_Xhat > 0.01),
        max_gap=max_gap,
        failures=failures,
    )
    logger.info(f"Verified {count} {kind} specs: {summary.passed} passed, max gap {max_gap:.3e} bits")
    return summary


def _all_partitions(n: int) -> Iterator[np.ndarray]:
    """Restricted growth strings: every set partition of {0..n-1} exactly once"""
    labels = [0] * n

    def extend(i: int, used: int):
        if i == n:
            yield np.array(labels)
            return
        for label in range(used + 1):
            labels[i] = label
            yield from extend(i + 1, max(used, label + 1))

    if n == 0:
        return
    labels[0] = 0
    yield from extend(1, 1)


def _contiguous_partitions(n: int) -> Iterator[np.ndarray]:
    for cuts in itertools.product((0, 1), repeat=n - 1):
        yield np.concatenate([[0], np.cumsum(cuts)])


def _random_partitions(n: int, count: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    for _ in range(count):
        m = int(rng.integers(1, n + 1))
        yield rng.integers(0, m, n)


def min_mutual_information_probe(source: Sequence[float], distortion_matrix, D: float,
                                 seed: int = 0, random_partitions: int = 2000) -> RateDistortionProbeResult:
    """Brute-force the smallest I(X;Xhat) over deterministic quantizer/codebook pairs with E[d] <= D.

    Deterministic codecs give I(X;Xhat) = H(Xhat); the search covers a family
    of codecs, so the result is an upper bound on the informational R(D).
    """
    p = np.asarray(source, dtype=np.float64)
    d = np.asarray(distortion_matrix, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != p.size:
        raise InvalidArgument(f"Distortion matrix shape {d.shape} does not match |X| = {p.size}")
    if d.size > MAX_PROBE_CELLS:
        raise InvalidArgument(f"|X|*|Xhat| = {d.size} exceeds the probe limit of {MAX_PROBE_CELLS}")
    if abs(math.fsum(p.tolist()) - 1.0) > 1e-12 or np.any(p < 0):
        raise InvalidArgument("source must be a probability distribution")
    tolerance = 1e-12
    weighted = p[:, None] * d
    n = p.size

    floor = float(weighted.min(axis=1).sum())
    if floor > D + tolerance:
        raise NoFeasibleCodec(f"No codec reaches E[d] <= {D}; the smallest achievable is {floor}")

    exhaustive = n <= EXHAUSTIVE_PARTITION_LIMIT
    if exhaustive:
        family = _all_partitions(n)
    else:
        rng = np.random.default_rng(seed)
        trivial = [np.zeros(n, dtype=np.int64), np.arange(n)]
        contiguous = _contiguous_partitions(n) if n <= CONTIGUOUS_PARTITION_LIMIT else iter(())
        family = itertools.chain(trivial, contiguous, _random_partitions(n, random_partitions, rng))

    best = None
    evaluated = 0
    for labels in family:
        evaluated += 1
        cells = int(labels.max()) + 1
        cost = np.zeros((cells, d.shape[1]))
        np.add.at(cost, labels, weighted)
        codewords = cost.argmin(axis=1)
        distortion = float(cost[np.arange(cells), codewords].sum())
        if distortion > D + tolerance:
            continue
        # cells sharing a codeword merge, which keeps the codebook injective
        q = np.bincount(codewords[labels], weights=p)
        q = q[q > 0]
        bits = float(-(q * np.log2(q)).sum()) if q.size > 1 else 0.0
        if best is None or bits < best[0] - 1e-15:
            merged = np.unique(codewords[labels], return_inverse=True)[1].reshape(-1)
            best = (bits, distortion, merged, np.unique(codewords[labels]))

    if best is None:
        raise NoFeasibleCodec(f"No searched codec reaches E[d] <= {D}")
    bits, distortion, quantizer, codebook = best
    return RateDistortionProbeResult(
        bits=max(bits, 0.0),
        exhaustive=exhaustive,
        partitions_evaluated=evaluated,
        expected_distortion=distortion,
        quantizer=quantizer.tolist(),
        codebook=codebook.tolist(),
    )


def replay_failure(document: dict) -> IdentityReport:
    """Re-verify a serialized VerificationFailure (or any {"kind", "spec"} document)"""
    try:
        failure = VerificationFailure.model_validate(
            {"report": {"kind": document.get("kind", "direct"), "identities": [], "residual_H_U_given_Xhat": 0.0},
             **document}
        )
        if failure.kind == "direct":
            return verify_direct_identities(DirectCodecSpec.model_validate(failure.spec), seed=failure.seed)
        mutate = corrupt_synthesis_midway if failure.mutant else None
        return verify_transform_identities(TransformCodecSpec.model_validate(failure.spec), seed=failure.seed,
                                           mutate=mutate)
    except ValueError as e:
        raise InvalidArgument(f"Error replaying spec: {str(e)}") from e
