import numpy as np
import pytest
import torch

from fuseseg.adversarial import (
    Discriminator,
    ImageDiscriminator,
    MaskDiscriminator,
    SNConv2d,
    SNLinear,
    lsgan_d_loss,
    lsgan_g_loss,
    spectral_normalize,
)


def _converged_sn(weight, iters=25):
    u = torch.randn(weight.shape[0])
    u = u / u.norm()
    for _ in range(iters):
        w_sn, u = spectral_normalize(weight, u)
    return w_sn, u


class TestSpectralNormalize:
    def test_identity_unchanged(self):
        w, _ = _converged_sn(torch.eye(3))
        torch.testing.assert_close(w, torch.eye(3), rtol=0, atol=1e-6)

    def test_diagonal_oracle(self):
        w, _ = _converged_sn(torch.diag(torch.tensor([2.0, 1.0])))
        torch.testing.assert_close(w, torch.diag(torch.tensor([1.0, 0.5])),
                                   rtol=0, atol=1e-5)

    def test_unit_top_singular_value_vs_svd(self, rng):
        w0 = torch.from_numpy(rng.normal(size=(6, 11))).float()
        w, _ = _converged_sn(w0)
        top = np.linalg.svd(w.numpy(), compute_uv=False)[0]
        assert abs(top - 1.0) < 1e-3
        # scale is the true top singular value
        sigma = np.linalg.svd(w0.numpy(), compute_uv=False)[0]
        torch.testing.assert_close(w * sigma, w0, rtol=1e-3, atol=1e-4)

    def test_zero_matrix_guard(self):
        w0 = torch.zeros(3, 3)
        w, u = spectral_normalize(w0, torch.ones(3) / np.sqrt(3))
        assert torch.equal(w, w0)

    def test_conv_kernel_reshape(self, rng):
        k = torch.from_numpy(rng.normal(size=(4, 2, 3, 3))).float()
        w, _ = _converged_sn(k)
        flat = w.reshape(4, -1).numpy()
        assert abs(np.linalg.svd(flat, compute_uv=False)[0] - 1.0) < 1e-3


class TestLsganLosses:
    def test_d_zero_at_targets(self):
        assert lsgan_d_loss(torch.ones(4), torch.zeros(4)).item() == 0.0

    def test_d_values(self):
        assert lsgan_d_loss(torch.zeros(1), torch.ones(1)).item() == pytest.approx(2.0)
        assert lsgan_d_loss(torch.tensor([0.5]), torch.tensor([0.5])).item() == pytest.approx(0.5)

    def test_g_values(self):
        assert lsgan_g_loss(torch.ones(3)).item() == 0.0
        assert lsgan_g_loss(torch.zeros(3)).item() == pytest.approx(1.0)
        assert lsgan_g_loss(torch.tensor([-1.0])).item() == pytest.approx(4.0)

    def test_nonnegative(self, rng):
        r = torch.from_numpy(rng.normal(size=32))
        f = torch.from_numpy(rng.normal(size=32))
        assert lsgan_d_loss(r, f).item() >= 0.0
        assert lsgan_g_loss(f).item() >= 0.0


class TestDiscriminators:
    def test_scalar_per_sample(self):
        torch.manual_seed(0)
        d = MaskDiscriminator(n_classes=3, width=8)
        mask = torch.rand(5, 3, 32, 32)
        out = d.score_mask(mask)
        assert out.shape == (5,)

    def test_mask_disc_sees_foreground_only(self):
        torch.manual_seed(0)
        d = MaskDiscriminator(n_classes=3, width=8)
        d.eval()
        m1 = torch.rand(2, 3, 32, 32)
        m2 = m1.clone()
        m2[:, 0] = 0.0   # background channel must not matter
        assert torch.equal(d.score_mask(m1), d.score_mask(m2))

    def test_power_iteration_state_updates_in_training(self):
        torch.manual_seed(0)
        d = ImageDiscriminator(width=8)
        d.train()
        x = torch.rand(2, 1, 32, 32)
        before = [m.u.clone() for m in d.modules() if isinstance(m, (SNConv2d, SNLinear))]
        d(x)
        after = [m.u.clone() for m in d.modules() if isinstance(m, (SNConv2d, SNLinear))]
        assert any(not torch.equal(a, b) for a, b in zip(before, after))

    def test_eval_mode_freezes_state(self):
        torch.manual_seed(0)
        d = ImageDiscriminator(width=8)
        d.eval()
        x = torch.rand(2, 1, 32, 32)
        before = [m.u.clone() for m in d.modules() if isinstance(m, (SNConv2d, SNLinear))]
        d(x)
        after = [m.u.clone() for m in d.modules() if isinstance(m, (SNConv2d, SNLinear))]
        assert all(torch.equal(a, b) for a, b in zip(before, after))

    def test_operator_norm_close_to_one_during_training(self):
        torch.manual_seed(3)
        d = Discriminator(in_channels=1, width=8)
        d.train()
        x = torch.rand(4, 1, 32, 32)
        for _ in range(30):   # warm up the power-iteration states
            d(x)
        for m in d.modules():
            if isinstance(m, (SNConv2d, SNLinear)):
                w, _ = spectral_normalize(m.weight, m.u, n_iterations=0)
                top = np.linalg.svd(w.reshape(w.shape[0], -1).detach().numpy(),
                                    compute_uv=False)[0]
                assert abs(top - 1.0) < 1e-2
