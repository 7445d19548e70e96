import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdlab.schemas.coding import DirectCodecSpec, TransformCodecSpec
from rdlab.services.coding_service import (
    corrupt_synthesis_midway,
    identity_report,
    induced_joint,
    min_mutual_information_probe,
    random_direct_spec,
    random_transform_spec,
    replay_failure,
    spec_seeds,
    verify_batch,
    verify_direct_identities,
    verify_transform_identities,
)
from rdlab.services.info_service import conditional_entropy, entropy
from rdlab.utils.common import InvalidArgument, NoFeasibleCodec

HALVING = DirectCodecSpec(source=[0.125] * 8, quantizer=[0, 0, 1, 1, 2, 2, 3, 3], codebook=[0, 2, 4, 6])


def merging_transform(synthesis, xhat_size):
    return TransformCodecSpec(
        source=[0.25] * 4, analysis=[0, 1, 2, 3], y_size=4, quantizer=[0, 1, 2, 3],
        dequantizer=[0, 1, 2, 3], yhat_size=4, synthesis=synthesis, xhat_size=xhat_size,
    )


class TestInducedJoint:
    def test_deterministic_composition(self):
        joint = induced_joint(HALVING)
        assert joint.mass.size == 8
        np.testing.assert_allclose(joint.mass, 1 / 8)
        xs, us, xhats = joint.cells.T
        np.testing.assert_array_equal(us, xs // 2)
        np.testing.assert_array_equal(xhats, 2 * us)

    def test_point_mass_source(self):
        joint = induced_joint(DirectCodecSpec(source=[1.0], quantizer=[0], codebook=[0]))
        assert joint.mass.tolist() == [1.0]

    def test_marginal_on_x_is_the_source(self):
        rng = np.random.default_rng(12)
        source = rng.dirichlet(np.ones(12))
        quantizer = np.concatenate([np.arange(4), rng.integers(0, 4, 8)])
        spec = DirectCodecSpec(source=source.tolist(), quantizer=quantizer.tolist(), codebook=[3, 0, 1, 2])
        joint = induced_joint(spec)
        dense = joint.to_dense().sum(axis=(1, 2))
        np.testing.assert_allclose(dense, source, atol=1e-15)

    def test_codebook_must_be_injective(self):
        with pytest.raises(ValueError):
            DirectCodecSpec(source=[0.5, 0.5], quantizer=[0, 1], codebook=[1, 1])


class TestDirectIdentities:
    def test_dyadic_halving(self):
        report = verify_direct_identities(HALVING)
        assert report.passed
        check = report.check("H(U)=H(X)-H(X|Xhat)")
        assert check.lhs == pytest.approx(2.0, abs=1e-12)
        assert check.rhs == pytest.approx(3.0 - 1.0, abs=1e-12)

    def test_report_serializes_pass_field(self):
        document = verify_direct_identities(HALVING).model_dump(by_alias=True)
        assert all(row["pass"] for row in document["identities"])

    def test_thousand_random_specs(self):
        summary = verify_batch("direct", 1000, seed=1, max_alphabet=64)
        assert summary.ok, summary.failures[:1]
        assert summary.max_gap <= 1e-10


class TestTransformIdentities:
    def test_two_to_one_merge(self):
        report = verify_transform_identities(merging_transform([0, 0, 1, 1], 2))
        assert report.passed
        assert report.residual_H_U_given_Xhat == pytest.approx(1.0, abs=1e-12)
        check = report.check("H(Xhat)=H(U)-H(U|Xhat)")
        assert check.lhs == pytest.approx(1.0, abs=1e-12)
        assert check.rhs == pytest.approx(2.0 - 1.0, abs=1e-12)

    def test_injective_synthesis_reduces_to_direct_coding(self):
        spec = merging_transform([2, 0, 3, 1], 4)
        report = verify_transform_identities(spec)
        assert report.residual_H_U_given_Xhat == pytest.approx(0.0, abs=1e-12)
        direct = identity_report(induced_joint(spec), "direct")
        assert direct.passed

    def test_thousand_random_specs(self):
        summary = verify_batch("transform", 1000, seed=1, max_alphabet=64)
        assert summary.ok, summary.failures[:1]
        assert summary.residual_positive >= 100

    def test_parallel_summary_matches_serial(self):
        serial = verify_batch("transform", 40, seed=5, max_alphabet=16)
        parallel = verify_batch("transform", 40, seed=5, max_alphabet=16, workers=2)
        assert serial.model_dump() == parallel.model_dump()

    @settings(deadline=None, max_examples=100)
    @given(seed=st.integers(0, 2 ** 63 - 1))
    def test_identities_hold_for_any_generated_spec(self, seed):
        assert verify_transform_identities(random_transform_spec(seed, max_alphabet=32)).passed


@settings(deadline=None, max_examples=50)
@given(seed=st.integers(0, 2 ** 63 - 1))
def test_merging_index_cells_never_increases_index_entropy(seed):
    spec = random_direct_spec(seed, max_alphabet=16)
    last = spec.num_indices - 1
    if last == 0:
        return
    coarse = DirectCodecSpec(
        source=spec.source,
        quantizer=[0 if u == last else u for u in spec.quantizer],
        codebook=spec.codebook[:-1],
        xhat_size=spec.xhat_size,
    )
    assert entropy(induced_joint(coarse), "U") <= entropy(induced_joint(spec), "U") + 1e-12


class TestMutantHook:
    def test_corruption_breaks_an_identity(self):
        joint = corrupt_synthesis_midway(induced_joint(merging_transform([0, 0, 1, 1], 2)))
        assert conditional_entropy(joint, "Xhat", "X") > 0.1
        assert not identity_report(joint, "transform").passed

    def test_batch_with_mutant_fails_and_replays(self):
        summary = verify_batch("transform", 5, seed=2, max_alphabet=8, inject_mutant=True)
        assert summary.passed == 0
        failure = summary.failures[0]
        replayed = replay_failure(json.loads(failure.model_dump_json()))
        assert not replayed.passed
        clean = replay_failure({"kind": "transform", "spec": failure.spec, "seed": failure.seed})
        assert clean.passed

    def test_replay_rejects_bad_document(self):
        with pytest.raises(InvalidArgument):
            replay_failure({"kind": "direct", "spec": {"source": [0.7]}})


class TestGenerators:
    def test_seeds_are_stable_and_distinct(self):
        seeds = spec_seeds(1, 50)
        assert seeds == spec_seeds(1, 50)
        assert len(set(seeds)) == 50

    def test_generated_specs_respect_alphabet_bound(self):
        for seed in range(30):
            direct = random_direct_spec(seed, max_alphabet=10)
            assert 1 <= len(direct.source) <= 10
            assert len(direct.codebook) <= len(direct.source)

    def test_count_must_be_positive(self):
        with pytest.raises(InvalidArgument):
            verify_batch("direct", 0)


def squared_error(n):
    x = np.arange(n, dtype=np.float64)
    return (x[:, None] - x[None, :]) ** 2


def brute_force_min_entropy(p, d, D):
    """Every quantizer labelling with every codebook choice, no shortcuts"""
    n = len(p)
    best = np.inf
    for labels in itertools.product(range(n), repeat=n):
        cells = sorted(set(labels))
        for codewords in itertools.product(range(d.shape[1]), repeat=len(cells)):
            code = dict(zip(cells, codewords))
            xhat = np.array([code[l] for l in labels])
            if np.sum(p * d[np.arange(n), xhat]) > D + 1e-12:
                continue
            q = np.bincount(xhat, weights=p)
            q = q[q > 0]
            best = min(best, float(-(q * np.log2(q)).sum()) if q.size > 1 else 0.0)
    return best


class TestMinMutualInformationProbe:
    def test_loose_budget_allows_constant_reconstruction(self):
        result = min_mutual_information_probe([0.25] * 4, squared_error(4), D=10.0)
        assert result.bits == 0.0
        assert result.upper_bound

    def test_zero_distortion_forces_lossless(self):
        result = min_mutual_information_probe([0.25] * 4, squared_error(4), D=0.0)
        assert result.bits == pytest.approx(2.0, abs=1e-12)
        assert result.exhaustive

    def test_matches_exhaustive_search_on_eight_symbols(self):
        result = min_mutual_information_probe(np.full(8, 1 / 8), squared_error(8), D=0.3)
        assert result.exhaustive
        assert result.expected_distortion <= 0.3 + 1e-12
        # best codec: one run of three neighbours onto its middle symbol (cost 2/8)
        expected = -(3 / 8) * np.log2(3 / 8) - 5 * (1 / 8) * np.log2(1 / 8)
        assert result.bits == pytest.approx(expected, abs=1e-12)

    def test_matches_brute_force_on_four_symbols(self):
        p = np.full(4, 0.25)
        result = min_mutual_information_probe(p, squared_error(4), D=0.3)
        assert result.bits == pytest.approx(brute_force_min_entropy(p, squared_error(4), 0.3), abs=1e-12)
        assert result.bits == pytest.approx(1.5, abs=1e-12)

    def test_infeasible_budget(self):
        d = squared_error(3) + 1.0
        with pytest.raises(NoFeasibleCodec):
            min_mutual_information_probe([1 / 3] * 3, d, D=0.5)

    def test_probe_size_limit(self):
        with pytest.raises(InvalidArgument):
            min_mutual_information_probe(np.full(70, 1 / 70), squared_error(70), D=1.0)
