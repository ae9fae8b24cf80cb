import numpy as np
import pytest
import torch
import torch.nn as nn

from diffvsr.color import color_correct
from diffvsr.errors import ContractError
from diffvsr.models import (
    DecoderHooks,
    FeatureFusion,
    PromptBank,
    TemporalAttention,
    TemporalFusion,
    VideoVAE,
)
from diffvsr.models.vae import DecoderStage


def make_stage(channels=8, seed=0):
    torch.manual_seed(seed)
    return DecoderStage(channels, channels, upsample=False)


class TestTemporalFusion:
    def test_blend_off_equals_spatial_path(self):
        stage = make_stage()
        fusion = TemporalFusion(8)
        x = torch.randn(3, 8, 6, 6)
        assert torch.equal(fusion(stage, x), stage.body(x))

    def test_singleton_clip_alpha_blend_only(self):
        stage = make_stage(seed=1)
        fusion = TemporalFusion(8)
        with torch.no_grad():
            fusion.alpha_raw.uniform_(0.2, 0.8)
            fusion.beta_raw.uniform_(0.2, 0.8)
        x = torch.randn(1, 8, 6, 6)
        out = fusion(stage, x)
        h = stage.res1(stage.conv(x))
        a = fusion.alpha.view(1, -1, 1, 1)
        c3 = fusion.conv3d(h.transpose(0, 1).unsqueeze(0)).squeeze(0).transpose(0, 1)
        expected = stage.res2(a * c3 + (1 - a) * h)
        assert torch.allclose(out, expected, atol=1e-7)

    def test_attention_singleton_identity(self):
        attn = TemporalAttention(4)
        x = torch.randn(1, 4, 3, 3)
        assert torch.equal(attn(x), x)

    def test_attention_matches_pencil_and_paper(self):
        torch.manual_seed(2)
        attn = TemporalAttention(2).double()
        with torch.no_grad():
            attn.q.weight.copy_(torch.tensor([[0.5, -0.25], [0.1, 0.3]]))
            attn.q.bias.copy_(torch.tensor([0.05, -0.1]))
            attn.k.weight.copy_(torch.tensor([[0.2, 0.4], [-0.3, 0.6]]))
            attn.k.bias.copy_(torch.tensor([0.0, 0.15]))
        x = torch.tensor([[[[0.7]], [[-0.2]]], [[[0.1]], [[0.9]]]], dtype=torch.float64)
        with torch.no_grad():
            out = attn(x)

        tokens = x.numpy().reshape(2, 2)  # (N, C)
        mu = tokens.mean(axis=1, keepdims=True)
        var = tokens.var(axis=1, keepdims=True)
        normed = (tokens - mu) / np.sqrt(var + 1e-5)
        q = normed @ attn.q.weight.detach().numpy().T + attn.q.bias.detach().numpy()
        k = normed @ attn.k.weight.detach().numpy().T + attn.k.bias.detach().numpy()
        logits = q @ k.T / np.sqrt(2.0)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        expected = w @ tokens
        assert np.abs(out.numpy().reshape(2, 2) - expected).max() < 1e-6

    def test_permutation_equivariance_with_frame_local_conv(self):
        stage = make_stage(seed=3)
        fusion = TemporalFusion(8)
        # symmetric test configuration: temporal kernel size 1
        fusion.conv3d = nn.Conv3d(8, 8, (1, 3, 3), padding=(0, 1, 1))
        torch.manual_seed(4)
        with torch.no_grad():
            fusion.alpha_raw.uniform_(0.1, 0.9)
            fusion.beta_raw.uniform_(0.1, 0.9)
        stage = stage.double()
        fusion = fusion.double()
        x = torch.randn(4, 8, 6, 6, dtype=torch.float64)
        perm = [2, 0, 3, 1]
        out_perm = fusion(stage, x[perm])
        out = fusion(stage, x)[perm]
        assert torch.allclose(out_perm, out, atol=1e-12)

    def test_blend_tensors_clamped(self):
        fusion = TemporalFusion(4)
        with torch.no_grad():
            fusion.alpha_raw.fill_(3.0)
            fusion.beta_raw.fill_(-2.0)
        assert fusion.alpha.max() == 1.0
        assert fusion.beta.min() == 0.0

    def test_ragged_clip_rejected(self):
        fusion = TemporalFusion(4)
        with pytest.raises(ContractError):
            fusion(make_stage(4), torch.randn(4, 6, 6))


class TestFeatureFusion:
    def test_omega_zero_is_identity(self):
        torch.manual_seed(5)
        ff = FeatureFusion(8)
        with torch.no_grad():
            for p in ff.parameters():
                p.normal_()
        f_d = torch.randn(2, 8, 4, 4)
        assert torch.equal(ff(torch.randn(2, 8, 4, 4), f_d, 0.0), f_d)

    def test_zero_init_independent_of_omega(self):
        ff = FeatureFusion(8)
        f_e = torch.randn(1, 8, 4, 4)
        f_d = torch.randn(1, 8, 4, 4)
        assert torch.equal(ff(f_e, f_d, 0.3), ff(f_e, f_d, 0.9))
        assert torch.equal(ff(f_e, f_d, 1.0), f_d)

    def test_misalignment_rejected(self):
        ff = FeatureFusion(8)
        with pytest.raises(ContractError):
            ff(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 8, 8), 0.5)


class TestNeutralStartDecode:
    def test_full_hook_stack_neutral_at_init(self):
        torch.manual_seed(6)
        vae = VideoVAE(base_channels=8, latent_channels=4)
        banks = {i: PromptBank(vae.decoder.stage_input_channels(i), num_components=2)
                 for i in range(3)}
        fusion = TemporalFusion(vae.decoder.stage_channels(0))
        ff = FeatureFusion(vae.decoder.stage_channels(1))

        x_guidance = torch.rand(2, 3, 32, 32)
        _, enc_feats = vae.encode_with_features(x_guidance)
        z = torch.randn(2, 4, 8, 8)
        hooks = DecoderHooks(
            pre={i: banks[i] for i in range(3)},
            body={0: fusion},
            post={1: lambda h, enc: ff(enc, h, 0.75)},
        )
        hooked = vae.decode(z, enc_feats=enc_feats, hooks=hooks)
        plain = vae.decode(z)
        assert torch.equal(hooked, plain)


class TestColorCorrect:
    def test_self_reference_identity(self):
        rng = np.random.default_rng(0)
        x = rng.random((8, 8, 3)) * 0.8 + 0.1
        out = color_correct(x, x)
        assert np.abs(out - x).max() < 1e-12

    def test_constant_reference_channel(self):
        rng = np.random.default_rng(1)
        x = rng.random((8, 8, 2))
        ref = np.stack([np.full((8, 8), 0.3), np.full((8, 8), 0.6)], axis=2)
        out = color_correct(x, ref)
        assert np.allclose(out[:, :, 0], 0.3, atol=1e-12)
        assert np.allclose(out[:, :, 1], 0.6, atol=1e-12)

    def test_hand_case_two_channels(self):
        x = np.array([[[0.2, 0.8], [0.4, 0.6]], [[0.6, 0.4], [0.8, 0.2]]])
        ref = np.array([[[0.1, 0.5], [0.2, 0.5]], [[0.3, 0.7], [0.4, 0.7]]])
        out = color_correct(x, ref)
        for c in range(2):
            mu_s, sd_s = x[:, :, c].mean(), x[:, :, c].std()
            mu_r, sd_r = ref[:, :, c].mean(), ref[:, :, c].std()
            expected = (x[:, :, c] - mu_s) / max(sd_s, 1e-6) * sd_r + mu_r
            assert np.abs(out[:, :, c] - np.clip(expected, 0, 1)).max() < 1e-7

    def test_statistics_transferred(self):
        rng = np.random.default_rng(2)
        x = rng.random((16, 16, 3)) * 0.5 + 0.25
        ref = rng.random((16, 16, 3)) * 0.3 + 0.35
        out = color_correct(x, ref)
        for c in range(3):
            assert abs(out[:, :, c].mean() - ref[:, :, c].mean()) <= 1e-5
            assert abs(out[:, :, c].std() - ref[:, :, c].std()) <= 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            color_correct(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
