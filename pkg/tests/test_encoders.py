import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fuseseg.encoders import (
    AnatomyEncoder,
    GaussianPosterior,
    ModalityEncoder,
    binarize_onehot,
    encode_modality,
    kl_to_standard_normal,
    reparameterize,
)

from util import assert_grad_close, finite_difference_gradient


class TestBinarizeOnehot:
    def test_clear_argmax(self):
        logits = torch.tensor([5.0, 0.0, 0.0]).view(3, 1, 1)
        out = binarize_onehot(logits)
        assert torch.equal(out, torch.tensor([1.0, 0.0, 0.0]).view(3, 1, 1))

    def test_tie_breaks_to_lowest_channel(self):
        logits = torch.zeros(4, 2, 2)
        out = binarize_onehot(logits)
        assert torch.equal(out[0], torch.ones(2, 2))
        assert out[1:].sum() == 0

    def test_batched_onehot_invariant(self):
        torch.manual_seed(0)
        logits = torch.randn(3, 8, 6, 6)
        out = binarize_onehot(logits)
        assert ((out == 0) | (out == 1)).all()
        assert torch.equal(out.sum(dim=1), torch.ones(3, 6, 6))

    def test_rejects_nonfinite(self):
        bad = torch.tensor([[float("nan")]]).view(1, 1, 1)
        with pytest.raises(ValueError):
            binarize_onehot(bad)

    def test_straight_through_matches_softmax_gradient(self, rng):
        logits_np = rng.normal(size=(2, 3, 4, 4))
        weights = torch.from_numpy(rng.normal(size=(2, 3, 4, 4)))

        def softmax_loss(t):
            return (torch.softmax(t, dim=1) * weights).sum()

        logits = torch.from_numpy(logits_np.copy()).requires_grad_(True)
        loss = (binarize_onehot(logits) * weights).sum()
        loss.backward()
        numeric = finite_difference_gradient(softmax_loss, torch.from_numpy(logits_np.copy()))
        assert_grad_close(logits.grad, numeric)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_forward_is_plain_argmax(self, seed):
        r = np.random.default_rng(seed)
        logits = torch.from_numpy(r.normal(size=(5, 3, 3))).float()
        out = binarize_onehot(logits)
        assert torch.equal(out.argmax(dim=0), logits.argmax(dim=0))


class TestAnatomyEncoder:
    @pytest.fixture()
    def encoder(self):
        torch.manual_seed(0)
        return AnatomyEncoder(n_modalities=2, channels=8, levels=3, width=8)

    def test_output_onehot(self, encoder):
        x = torch.rand(2, 1, 32, 32) * 2 - 1
        s = encoder(x, 0)
        assert s.shape == (2, 8, 32, 32)
        assert ((s == 0) | (s == 1)).all()
        assert torch.equal(s.sum(dim=1), torch.ones(2, 32, 32))

    def test_unknown_modality(self, encoder):
        with pytest.raises(ValueError):
            encoder(torch.zeros(1, 1, 32, 32), 5)

    def test_deterministic_repeat(self, encoder):
        x = torch.rand(1, 1, 32, 32)
        assert torch.equal(encoder(x, 0), encoder(x, 0))

    def test_shared_decoding_path_is_single_storage(self, encoder):
        x = torch.rand(1, 1, 32, 32) * 2 - 1
        before_0 = encoder.logits(x, 0)
        before_1 = encoder.logits(x, 1)
        with torch.no_grad():
            encoder.head.weight.add_(1.0)
        after_0 = encoder.logits(x, 0)
        after_1 = encoder.logits(x, 1)
        assert not torch.equal(before_0, after_0)
        assert not torch.equal(before_1, after_1)

    def test_modality_paths_are_private(self, encoder):
        x = torch.rand(1, 1, 32, 32) * 2 - 1
        before_1 = encoder.logits(x, 1)
        with torch.no_grad():
            next(encoder.down_paths[0].parameters()).add_(1.0)
        assert torch.equal(encoder.logits(x, 1), before_1)


class TestModalityEncoder:
    @pytest.fixture()
    def encoder(self):
        torch.manual_seed(0)
        return ModalityEncoder(anatomy_channels=4, z_dim=8, width=8)

    def test_stddev_positive_and_unit_at_init(self, encoder):
        x = torch.rand(2, 1, 32, 32)
        s = torch.zeros(2, 4, 32, 32)
        s[:, 0] = 1.0
        post = encoder(x, s)
        assert (post.stddev > 0).all()
        assert torch.equal(post.stddev, torch.ones_like(post.stddev))

    def test_shape_mismatch(self, encoder):
        with pytest.raises(ValueError):
            encoder(torch.zeros(1, 1, 32, 32), torch.zeros(1, 4, 16, 16))

    def test_inference_mode_returns_mean(self, encoder):
        x = torch.rand(1, 1, 32, 32)
        s = torch.zeros(1, 4, 32, 32)
        s[:, 0] = 1.0
        post, z = encode_modality(encoder, x, s)
        assert torch.equal(z, post.mean)

    def test_training_mode_reparameterizes_exactly(self, encoder):
        x = torch.rand(1, 1, 32, 32)
        s = torch.zeros(1, 4, 32, 32)
        s[:, 0] = 1.0
        noise = torch.randn(1, 8)
        post, z = encode_modality(encoder, x, s, noise)
        assert torch.equal(z, post.mean + post.stddev * noise)


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        p = GaussianPosterior(torch.tensor([1.0, -2.0]), torch.tensor([0.5, 2.0]))
        assert torch.equal(reparameterize(p, torch.zeros(2)), p.mean)

    def test_standard_normal_passthrough(self):
        p = GaussianPosterior(torch.zeros(4), torch.ones(4))
        eps = torch.randn(4)
        assert torch.equal(reparameterize(p, eps), eps)

    def test_monte_carlo_mean(self, rng):
        mean = torch.tensor([0.3, -1.2, 2.0])
        std = torch.tensor([0.5, 1.5, 0.1])
        p = GaussianPosterior(mean, std)
        n = 100_000
        noise = torch.from_numpy(rng.normal(size=(n, 3))).float()
        samples = reparameterize(GaussianPosterior(mean.expand(n, 3), std.expand(n, 3)), noise)
        emp = samples.mean(dim=0)
        bound = 3.0 * std / np.sqrt(n)
        assert ((emp - mean).abs() <= bound).all()


class TestKL:
    def test_standard_normal_is_zero(self):
        p = GaussianPosterior(torch.zeros(8), torch.ones(8))
        assert kl_to_standard_normal(p).item() == 0.0

    def test_unit_mean_shift(self):
        mean = torch.zeros(8)
        mean[0] = 1.0
        p = GaussianPosterior(mean, torch.ones(8))
        assert kl_to_standard_normal(p).item() == pytest.approx(0.5, abs=1e-7)

    def test_monte_carlo_oracle(self, rng):
        mean = torch.from_numpy(rng.normal(size=4)).float()
        std = torch.from_numpy(rng.uniform(0.4, 2.0, size=4)).float()
        closed = kl_to_standard_normal(GaussianPosterior(mean, std)).item()

        n = 1_000_000
        eps = rng.normal(size=(n, 4))
        z = mean.numpy() + std.numpy() * eps
        log_q = -0.5 * (eps ** 2 + np.log(2 * np.pi)) - np.log(std.numpy())
        log_p = -0.5 * (z ** 2 + np.log(2 * np.pi))
        mc = (log_q - log_p).sum(axis=1).mean()
        assert closed == pytest.approx(mc, rel=0.02)

    def test_batch_mean_reduction(self):
        p = GaussianPosterior(torch.zeros(2, 8), torch.ones(2, 8))
        assert kl_to_standard_normal(p).shape == ()

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        p = GaussianPosterior(
            torch.from_numpy(r.normal(size=6, scale=3)),
            torch.from_numpy(r.uniform(0.05, 5.0, size=6)),
        )
        assert kl_to_standard_normal(p).item() >= 0.0
