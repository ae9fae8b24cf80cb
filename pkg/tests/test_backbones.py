import numpy as np
import pytest
import torch

from diffvsr.diffusion import build_schedule, noise_loss, q_sample
from diffvsr.errors import ConfigurationError, ContractError
from diffvsr.models import (
    ControlBranch,
    DecoderHooks,
    DenoiseUNet,
    VideoVAE,
)
from diffvsr.models.layers import params_snapshot, set_trainable


@pytest.fixture(scope="module")
def vae():
    torch.manual_seed(0)
    return VideoVAE(base_channels=8, latent_channels=4)


@pytest.fixture(scope="module")
def unet():
    torch.manual_seed(1)
    return DenoiseUNet(latent_channels=4, widths=(8, 16, 32))


class TestVAE:
    def test_encode_shape_contract(self, vae):
        x = torch.rand(1, 3, 64, 64)
        z = vae.encode(x)
        assert z.shape == (1, 4, 16, 16)

    def test_encode_deterministic(self, vae):
        x = torch.rand(1, 3, 32, 32)
        assert torch.equal(vae.encode(x), vae.encode(x.clone()))

    def test_encode_rejects_indivisible_dims(self, vae):
        with pytest.raises(ContractError, match="divisible"):
            vae.encode(torch.rand(1, 3, 30, 32))

    def test_decode_shape(self, vae):
        z = torch.randn(2, 4, 8, 8)
        out = vae.decode(z)
        assert out.shape == (2, 3, 32, 32)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_identity_hooks_bit_identical(self, vae):
        z = torch.randn(1, 4, 8, 8)
        plain = vae.decode(z)
        hooks = DecoderHooks(
            pre={0: lambda h: h, 1: lambda h: h, 2: lambda h: h},
            post={i: (lambda h, enc: h) for i in range(3)},
        )
        assert torch.equal(vae.decode(z, hooks=hooks), plain)

    def test_bad_hook_index_and_signature(self, vae):
        z = torch.randn(1, 4, 8, 8)
        with pytest.raises(ConfigurationError):
            vae.decode(z, hooks=DecoderHooks(pre={7: lambda h: h}))
        with pytest.raises(ConfigurationError):
            vae.decode(z, hooks=DecoderHooks(pre={0: "not callable"}))
        with pytest.raises(ConfigurationError, match="signature"):
            vae.decode(z, hooks=DecoderHooks(pre={0: lambda: None}))

    def test_encoder_features_align_with_decoder_stages(self, vae):
        x = torch.rand(1, 3, 64, 64)
        z, feats = vae.encode_with_features(x)
        assert feats[0].shape[-2:] == (16, 16)
        assert feats[1].shape[-2:] == (32, 32)
        assert feats[2].shape[-2:] == (64, 64)
        for i in range(3):
            assert feats[i].shape[1] == vae.decoder.stage_channels(i)

    def test_training_loss_runs(self, vae):
        x = torch.rand(2, 3, 32, 32)
        gen = torch.Generator().manual_seed(0)
        loss, rec = vae.training_loss(x, generator=gen)
        assert loss.item() >= 0 and rec.item() >= 0


class TestUNet:
    def test_deterministic(self, unet):
        z = torch.randn(1, 4, 16, 16)
        assert torch.equal(unet(z, 10), unet(z.clone(), 10))

    def test_output_shape(self, unet):
        z = torch.randn(3, 4, 16, 16)
        assert unet(z, 500).shape == z.shape

    def test_fresh_control_branch_is_noop(self, unet):
        torch.manual_seed(2)
        branch = ControlBranch.from_unet(unet)
        z = torch.randn(2, 4, 16, 16)
        guidance = torch.randn(2, 4, 16, 16)
        temb = unet.time_embedding(7, 2, z.device)
        control = branch(z, guidance, temb)
        assert all(c.abs().max().item() == 0.0 for c in control)
        assert torch.equal(unet(z, 7, control=control), unet(z, 7))

    def test_control_scale_mirror(self, unet):
        branch = ControlBranch.from_unet(unet)
        z = torch.randn(1, 4, 16, 16)
        temb = unet.time_embedding(3, 1, z.device)
        f0, f1, fm = branch(z, torch.randn_like(z), temb)
        assert f0.shape[-2:] == (16, 16)
        assert f1.shape[-2:] == (8, 8)
        assert fm.shape[-2:] == (4, 4)

    def test_control_depends_on_noise_latent(self, unet):
        branch = ControlBranch.from_unet(unet)
        set_trainable(branch, False)
        for p in branch.parameters():
            p.add_(0.01 * torch.randn_like(p))  # leave zero init for this check
        guidance = torch.randn(1, 4, 16, 16)
        temb = unet.time_embedding(3, 1, guidance.device)
        a = branch(torch.randn(1, 4, 16, 16), guidance, temb)
        b = branch(torch.randn(1, 4, 16, 16), guidance, temb)
        assert not torch.equal(a[2], b[2])

    def test_control_shape_mismatch(self, unet):
        branch = ControlBranch.from_unet(unet)
        z = torch.randn(1, 4, 16, 16)
        temb = unet.time_embedding(3, 1, z.device)
        with pytest.raises(ContractError):
            branch(z, torch.randn(1, 4, 8, 8), temb)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        model = DenoiseUNet(latent_channels=2, widths=(4, 8, 8)).double()
        sched = build_schedule(10, 0.01, 0.1)
        z0 = torch.randn(1, 2, 8, 8, dtype=torch.float64)
        eps = torch.randn_like(z0)
        x_t = q_sample(z0, 5, eps, sched).x_t

        probes = [model.conv_out.bias, model.encoder.conv_in.weight]
        loss = noise_loss(eps, model(x_t, 5))
        grads = torch.autograd.grad(loss, probes)

        for param, grad in zip(probes, grads):
            idx = (0,) * param.ndim
            h = 1e-6
            with torch.no_grad():
                param[idx] += h
                up = noise_loss(eps, model(x_t, 5)).item()
                param[idx] -= 2 * h
                down = noise_loss(eps, model(x_t, 5)).item()
                param[idx] += h
            fd = (up - down) / (2 * h)
            assert abs(grad[idx].item() - fd) / max(abs(fd), 1e-10) < 1e-4


class TestFreezeAndShapes:
    def test_frozen_params_bit_stable_through_step(self):
        torch.manual_seed(4)
        net = DenoiseUNet(latent_channels=4, widths=(8, 16, 32))
        control = ControlBranch.from_unet(net)
        set_trainable(net.encoder, False)
        before = params_snapshot(net.encoder)
        trainable = [p for p in list(net.parameters()) + list(control.parameters())
                     if p.requires_grad]
        opt = torch.optim.Adam(trainable, lr=1e-2)
        z = torch.randn(2, 4, 16, 16)
        temb = net.time_embedding(4, 2, z.device)
        eps_hat = net(z, 4, control=control(z, torch.randn_like(z), temb))
        loss = noise_loss(torch.randn_like(z), eps_hat)
        loss.backward()
        opt.step()
        after = params_snapshot(net.encoder)
        for name in before:
            assert torch.equal(before[name], after[name]), name

    def test_shape_algebra_roundtrip(self, vae, unet):
        for hw in ((32, 32), (64, 32)):
            x = torch.rand(1, 3, *hw)
            z = vae.encode(x)
            assert z.shape[-2:] == (hw[0] // 4, hw[1] // 4)
            if z.shape[-2] % 4 == 0 and z.shape[-1] % 4 == 0:
                eps = unet(z, 3)
                assert eps.shape == z.shape
            out = vae.decode(z)
            assert out.shape == x.shape
