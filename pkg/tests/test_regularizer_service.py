import math

import numpy as np
import pytest

from rdlab.engine import Tensor, adam_step, constant
from rdlab.schemas.training import ArchitectureConfig, SourceModelConfig
from rdlab.services.codec_service import CodecModel, encode_train, inverse_softplus, rd_loss
from rdlab.services.regularizer_service import (
    SourceModel,
    gaussian_nll_bits,
    made_masks,
    regularized_loss,
    source_model_step_loss,
    source_nll,
)
from rdlab.utils.common import InvalidArgument, ModelDiverged
from tests.test_engine import finite_difference, relative_error

HALF_LOG2_2PI = 0.5 * math.log2(2 * math.pi)


@pytest.fixture
def codec():
    return CodecModel(3, ArchitectureConfig(hidden=[4], latent=2), np.random.default_rng(8))


@pytest.fixture
def batch():
    return np.random.default_rng(9).standard_normal((16, 3))


@pytest.fixture
def noise():
    return np.random.default_rng(10).uniform(-0.5, 0.5, (16, 2))


def source_model(mode, dim=3, seed=4):
    return SourceModel(dim, SourceModelConfig(mode=mode, hidden=6), np.random.default_rng(seed))


class TestGaussianNll:
    def test_zero_at_peak_of_unit_density(self):
        bits = gaussian_nll_bits(constant([0.4]), constant([0.4]), constant([1.0 / math.sqrt(2 * math.pi)]))
        assert bits.item() == pytest.approx(0.0, abs=1e-15)

    def test_standard_normal_at_mean(self):
        bits = gaussian_nll_bits(constant([0.0]), constant([0.0]), constant([1.0]))
        assert bits.item() == pytest.approx(1.3257, abs=1e-4)
        assert bits.item() == pytest.approx(HALF_LOG2_2PI, abs=1e-15)

    def test_one_sigma_away(self):
        bits = gaussian_nll_bits(constant([1.0]), constant([0.0]), constant([1.0]))
        assert bits.item() == pytest.approx(HALF_LOG2_2PI + 0.5 / math.log(2), abs=1e-15)


class TestSourceModel:
    @pytest.mark.parametrize("mode", ["weak", "factorized", "causal"])
    def test_scales_positive(self, mode, batch):
        _, sigma = source_model(mode).forward(constant(batch), constant(batch))
        assert np.all(sigma.values > 0)

    def test_weak_mean_is_reconstruction(self, batch):
        mu, _ = source_model("weak").forward(constant(batch))
        np.testing.assert_array_equal(mu.values, batch)

    def test_factorized_ignores_x(self, batch):
        sm = source_model("factorized")
        first = sm.forward(constant(batch), constant(batch))
        second = sm.forward(constant(batch), constant(np.zeros_like(batch)))
        np.testing.assert_array_equal(first[0].values, second[0].values)
        np.testing.assert_array_equal(first[1].values, second[1].values)

    def test_causal_needs_x(self, batch):
        with pytest.raises(InvalidArgument):
            source_model("causal").forward(constant(batch))

    def test_masks_are_strictly_autoregressive(self):
        mask_in, mask_out = made_masks(5, 12)
        reach = (mask_in @ mask_out) > 0
        assert not np.any(np.tril(reach))
        assert np.all(reach[0, 1:])

    @pytest.mark.parametrize("output", [0, 1])
    def test_causal_jacobian_is_strictly_lower(self, output):
        dim = 4
        sm = source_model("causal", dim=dim)
        rng = np.random.default_rng(2)
        sm.store.load_values({
            "context.direct_mu": rng.standard_normal((dim, dim)),
            "context.direct_scale": rng.standard_normal((dim, dim)),
        })
        x_hat = constant(rng.standard_normal((5, dim)))
        values = rng.standard_normal((5, dim))
        for i in range(dim):
            x = Tensor(values, requires_grad=True)
            selector = np.zeros((5, dim))
            selector[:, i] = 1.0
            (sm.forward(x_hat, x)[output] * selector).sum().backward()
            grad = x.grad if x.grad is not None else np.zeros_like(values)
            assert np.all(grad[:, i:] == 0.0)
            if i > 0:
                assert np.any(grad[:, :i] != 0.0)

    @pytest.mark.parametrize("mode", ["weak", "factorized", "causal"])
    def test_checkpoint_round_trip(self, mode, batch, tmp_path):
        sm = source_model(mode)
        sm.save(tmp_path / "source", config_hash="abc")
        restored, header = SourceModel.load(tmp_path / "source")
        assert header["source_model"]["mode"] == mode
        assert source_nll(restored, batch, batch + 0.1).item() == source_nll(sm, batch, batch + 0.1).item()


class TestSourceNll:
    def test_per_dimension_bits(self, batch):
        sm = source_model("weak")
        sigma = 0.7
        sm.store.load_values({"weak.scale": np.full(3, inverse_softplus(sigma - 1e-4))})
        x_hat = batch + 0.2
        expected = np.mean(0.5 * (0.2 / sigma) ** 2 / math.log(2) + math.log2(sigma) + HALF_LOG2_2PI)
        assert source_nll(sm, batch, x_hat).item() == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self, batch):
        with pytest.raises(InvalidArgument):
            source_nll(source_model("weak"), batch, batch[:, :2])

    def test_non_finite_parameters(self, batch):
        sm = source_model("factorized")
        sm.store.load_values({"hidden.bias": np.full(6, np.nan)})
        with pytest.raises(ModelDiverged):
            source_nll(sm, batch, batch)


class TestRegularizedLoss:
    def test_zero_alpha_is_rate_distortion(self, codec, batch, noise):
        sm = source_model("factorized")
        out = encode_train(codec, batch, noise)
        breakdown = regularized_loss(out, batch, sm, 0.0067, 0.0, distortion_scale=65025.0)
        assert breakdown.total_value == rd_loss(out, batch, 0.0067, 65025.0).item()

    def test_zero_alpha_gradients_match(self, codec, batch, noise):
        sm = source_model("factorized")
        rd_loss(encode_train(codec, batch, noise), batch, 0.013).backward()
        reference = {name: grad.copy() for name, grad in codec.store.grads().items()}
        codec.store.zero_grad()
        regularized_loss(encode_train(codec, batch, noise), batch, sm, 0.013, 0.0).total.backward()
        for name, grad in codec.store.grads().items():
            np.testing.assert_array_equal(grad, reference[name])

    def test_two_bit_log_likelihood(self, codec, batch, noise):
        sm = source_model("weak", dim=3)
        sigma = 2.0 ** (2.0 / 3 - HALF_LOG2_2PI)
        sm.store.load_values({"weak.scale": np.full(3, inverse_softplus(sigma - 1e-4))})
        out = encode_train(codec, batch, noise)
        x = out.x_hat.values.copy()
        breakdown = regularized_loss(out, x, sm, 0.01, 1.0)
        assert breakdown.regularizer_bits == pytest.approx(-2.0, abs=1e-10)
        assert breakdown.total_value == pytest.approx(rd_loss(out, x, 0.01).item() - 2.0, abs=1e-10)

    def test_negative_alpha(self, codec, batch, noise):
        with pytest.raises(InvalidArgument):
            regularized_loss(encode_train(codec, batch, noise), batch, source_model("weak"), 0.01, -0.5)

    def test_synthesis_gradient_matches_finite_difference(self, codec, batch, noise):
        sm = source_model("factorized")

        def total() -> float:
            out = encode_train(codec, batch, noise)
            return regularized_loss(out, batch, sm, 0.0, 1.0).total_value

        regularized_loss(encode_train(codec, batch, noise), batch, sm, 0.0, 1.0).total.backward()
        analytic = codec.store["synthesis.1.weight"].grad.copy()
        base = codec.store["synthesis.1.weight"].values.copy()
        h = 1e-6
        for index in [(0, 0), (2, 1), (3, 2)]:
            shifted = base.copy()
            shifted[index] += h
            codec.store.load_values({"synthesis.1.weight": shifted})
            upper = total()
            shifted[index] -= 2 * h
            codec.store.load_values({"synthesis.1.weight": shifted})
            lower = total()
            codec.store.load_values({"synthesis.1.weight": base})
            assert analytic[index] == pytest.approx((upper - lower) / (2 * h), rel=1e-5, abs=1e-7)

    @pytest.mark.parametrize("seed", range(10))
    def test_codec_gradients_match_finite_difference(self, seed):
        rng = np.random.default_rng(100 + seed)
        mode = ["factorized", "causal", "weak"][seed % 3]
        codec = CodecModel(8, ArchitectureConfig(), rng)
        sm = SourceModel(8, SourceModelConfig(mode=mode), rng)
        x = rng.standard_normal((4, 8))
        noise = rng.uniform(-0.5, 0.5, (4, codec.latent))
        lmbda = float(rng.choice([0.0018, 0.0035, 0.0067, 0.013]))
        alpha = float(rng.choice([0.1, 0.3, 1.0, 3.0]))

        def total():
            out = encode_train(codec, x, noise)
            return regularized_loss(out, x, sm, lmbda, alpha, distortion_scale=65025.0).total

        codec.store.zero_grad()
        total().backward()
        for name, param in codec.store.items():
            numeric = finite_difference(lambda: total().item(), param)
            assert relative_error(param.grad, numeric) <= 1e-4, (mode, name)

    def test_rate_only_leaves_synthesis_untouched(self, codec, batch, noise):
        sm = source_model("factorized")
        regularized_loss(encode_train(codec, batch, noise), batch, sm, 0.0, 0.0).total.backward()
        grads = codec.store.grads()
        for name in codec.synthesis_parameters():
            assert not np.any(grads[name])


class TestStageIsolation:
    def test_codec_stage_leaves_source_model_alone(self, codec, batch, noise):
        sm = source_model("causal")
        regularized_loss(encode_train(codec, batch, noise), batch, sm, 0.01, 1.0).total.backward()
        assert all(sm.store[name].grad is None for name in sm.store)
        assert any(np.any(codec.store[name].grad) for name in codec.store)

    def test_source_stage_leaves_codec_alone(self, codec, batch, noise):
        sm = source_model("causal")
        x_hat = encode_train(codec, batch, noise).x_hat
        source_model_step_loss(sm, batch, x_hat).backward()
        assert all(codec.store[name].grad is None for name in codec.store)
        assert any(np.any(sm.store[name].grad) for name in sm.store)

    @pytest.mark.parametrize("mode", ["weak", "factorized", "causal"])
    def test_source_loss_decreases_on_fixed_codec(self, mode, codec, batch, noise):
        sm = source_model(mode)
        x_hat = encode_train(codec, batch, noise, frozen=True).x_hat
        losses = []
        for _ in range(101):
            sm.store.zero_grad()
            loss = source_model_step_loss(sm, batch, x_hat)
            loss.backward()
            losses.append(loss.item())
            adam_step(sm.store, lr=1e-3)
        decreases = sum(b < a for a, b in zip(losses, losses[1:]))
        assert decreases >= 90


def test_causal_context_adds_nothing_on_independent_dimensions():
    rng = np.random.default_rng(21)
    x = rng.standard_normal((256, 3))
    x_hat = x + 0.5 * rng.standard_normal((256, 3))
    converged = {}
    for mode in ["factorized", "causal"]:
        sm = source_model(mode)
        for _ in range(2000):
            sm.store.zero_grad()
            source_model_step_loss(sm, x, x_hat).backward()
            adam_step(sm.store, lr=1e-2)
        converged[mode] = source_nll(sm, x, x_hat).item()
    assert abs(converged["causal"] - converged["factorized"]) <= 0.05
