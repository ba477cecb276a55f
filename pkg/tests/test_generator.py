import numpy as np
import pytest
import torch

from bevmotion.exceptions import NumericalError
from bevmotion.grid import GridSpec
from bevmotion.nets.generator import (
    ClassStateDecoder,
    ConvGRUCell,
    DirectMotionHead,
    GaussianLatentHead,
    LatentField,
    MotionRollout,
)
from bevmotion.nets.model import ModelConfig, MotionPredictionNet


def _field(shape=(1, 4, 8, 8), mean_scale=1.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    return LatentField(
        mean=torch.randn(shape, generator=g) * mean_scale,
        log_var=torch.randn(shape, generator=g).clamp(-2, 2),
        source="posterior",
    )


class TestLatentField:
    def test_deterministic_sample_is_mean(self):
        f = _field()
        assert torch.equal(f.sample(deterministic=True), f.mean)

    def test_seeded_sample_reproducible(self):
        f = _field()
        a = f.sample(generator=torch.Generator().manual_seed(3))
        b = f.sample(generator=torch.Generator().manual_seed(3))
        assert torch.equal(a, b)

    def test_monte_carlo_mean_matches(self):
        f = _field(shape=(1, 2, 4, 4))
        draws = f.sample_many(10_000, generator=torch.Generator().manual_seed(1))
        mc_mean = draws.mean(dim=0)
        tol = 3.0 * f.std / np.sqrt(10_000)
        assert torch.all((mc_mean - f.mean).abs() <= tol + 1e-6)

    def test_monte_carlo_std_matches(self):
        f = _field(shape=(1, 2, 4, 4))
        draws = f.sample_many(20_000, generator=torch.Generator().manual_seed(2))
        assert torch.allclose(draws.std(dim=0), f.std, rtol=0.1)


class TestGaussianLatentHead:
    def test_shapes_and_clamp(self):
        head = GaussianLatentHead(8, latent_channels=4, downsample=4)
        with torch.no_grad():
            head.gaussian.bias.fill_(50.0)  # force log-var above the clamp
        f = head(torch.randn(2, 8, 16, 16))
        assert f.mean.shape == (2, 4, 4, 4)
        assert f.log_var.max() <= 10.0

    def test_separate_sources(self):
        head = GaussianLatentHead(8, 4)
        f = head(torch.randn(1, 8, 16, 16), source="prior")
        assert f.source == "prior"

    def test_reparameterized_gradient_matches_finite_differences(self):
        # d loss / d mean through sample = mean + std * eps, fixed eps
        torch.manual_seed(0)
        mean = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        log_var = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        eps = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        target = torch.randn(1, 2, 4, 4, dtype=torch.float64)

        def loss_of(m, lv):
            sample = m + torch.exp(0.5 * lv) * eps
            return ((sample - target) ** 2).mean()

        loss = loss_of(mean, log_var)
        loss.backward()
        h = 1e-6
        for param, grad in ((mean, mean.grad), (log_var, log_var.grad)):
            idx = (0, 1, 2, 3)
            shifted = param.detach().clone()
            shifted[idx] += h
            plus = loss_of(shifted if param is mean else mean.detach(),
                           shifted if param is log_var else log_var.detach())
            shifted[idx] -= 2 * h
            minus = loss_of(shifted if param is mean else mean.detach(),
                            shifted if param is log_var else log_var.detach())
            fd = (plus - minus) / (2 * h)
            assert abs(fd - grad[idx]) <= 1e-3 * max(abs(fd), 1e-8)


class TestConvGRU:
    def test_zero_weights_halve_state(self):
        cell = ConvGRUCell(4)
        for p in cell.parameters():
            torch.nn.init.zeros_(p)
        h = torch.randn(1, 4, 8, 8)
        out = cell(h)
        assert torch.allclose(out, 0.5 * h, atol=1e-7)


class TestMotionRollout:
    def test_output_shape(self):
        roll = MotionRollout(4, steps=5, upsample=4)
        out = roll(torch.randn(2, 4, 8, 8))
        assert out.shape == (2, 5, 2, 32, 32)

    def test_causality_bit_exact(self):
        torch.manual_seed(0)
        roll = MotionRollout(4, steps=5)
        z0 = torch.randn(1, 4, 8, 8)
        with torch.no_grad():
            clean = roll(z0)
            for k in range(1, 5):
                def hook(tau, state, k=k):
                    return state + 100.0 if tau == k else state
                perturbed = roll(z0, state_hook=hook)
                assert torch.equal(perturbed[:, :k], clean[:, :k])
                assert not torch.equal(perturbed[:, k:], clean[:, k:])

    def test_nan_aborts_with_step_diagnostics(self):
        roll = MotionRollout(4, steps=5)
        z0 = torch.randn(1, 4, 8, 8)

        def poison(tau, state):
            return state * float("nan") if tau == 2 else state

        with pytest.raises(NumericalError, match="step 3"):
            with torch.no_grad():
                roll(z0, state_hook=poison)

    def test_non_finite_initial_latent_rejected(self):
        roll = MotionRollout(4, steps=3)
        with pytest.raises(NumericalError):
            roll(torch.full((1, 4, 8, 8), float("inf")))


class TestClassStateDecoder:
    def test_shapes_and_softmax(self):
        dec = ClassStateDecoder(4, skip_channels=8, num_classes=5)
        cls_logits, state_logits = dec(torch.randn(1, 4, 8, 8), torch.randn(1, 8, 32, 32))
        assert cls_logits.shape == (1, 5, 32, 32)
        assert state_logits.shape == (1, 32, 32)
        probs = torch.softmax(cls_logits, dim=1).sum(dim=1)
        assert torch.allclose(probs, torch.ones_like(probs), atol=1e-5)

    def test_finite_on_zero_inputs(self):
        dec = ClassStateDecoder(4, skip_channels=8, num_classes=5)
        cls_logits, state_logits = dec(torch.zeros(1, 4, 8, 8), torch.zeros(1, 8, 32, 32))
        assert torch.isfinite(cls_logits).all()
        assert torch.isfinite(state_logits).all()


@pytest.fixture
def tiny_net():
    spec = GridSpec(x_range=(-8, 8), y_range=(-8, 8), z_range=(-1, 1),
                    xy_resolution=0.5, z_resolution=0.5)
    torch.manual_seed(0)
    cfg = ModelConfig(feature_channels=8, prior_channels=16, latent_channels=4,
                      attention_channels=8, instance_token_channels=8)
    return MotionPredictionNet(spec, cfg), spec


class TestPredict:
    def test_deterministic_mode_repeatable(self, tiny_net):
        net, spec = tiny_net
        grids = torch.rand(1, spec.input_frames, spec.C, spec.H, spec.W).round()
        a = net.predict(grids)
        b = net.predict(grids)
        for x, y in zip(a, b):
            assert torch.equal(x, y)

    def test_sample_mode_seeded(self, tiny_net):
        net, spec = tiny_net
        grids = torch.rand(1, spec.input_frames, spec.C, spec.H, spec.W).round()
        a = net.predict(grids, mode="sample", generator=torch.Generator().manual_seed(1))
        b = net.predict(grids, mode="sample", generator=torch.Generator().manual_seed(1))
        c = net.predict(grids, mode="sample", generator=torch.Generator().manual_seed(2))
        assert torch.equal(a[0], b[0])
        assert not torch.equal(a[0], c[0])

    def test_output_shapes(self, tiny_net):
        net, spec = tiny_net
        grids = torch.zeros(1, spec.input_frames, spec.C, spec.H, spec.W)
        motion, cls_logits, state_logits = net.predict(grids)
        assert motion.shape == (1, spec.output_steps, 2, spec.H, spec.W)
        assert cls_logits.shape == (1, 5, spec.H, spec.W)
        assert state_logits.shape == (1, spec.H, spec.W)

    def test_deterministic_equals_zero_epsilon_sampling(self, tiny_net):
        net, spec = tiny_net
        grids = torch.rand(1, spec.input_frames, spec.C, spec.H, spec.W).round()
        feats = net.backbone(grids)
        field = net.encode_posterior(feats)
        det = field.sample(deterministic=True)
        zero_eps = field.sample(eps=torch.zeros_like(field.mean))
        assert torch.equal(det, zero_eps)
