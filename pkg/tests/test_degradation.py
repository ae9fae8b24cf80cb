import numpy as np
import pytest

from diffvsr.clips import VideoClip
from diffvsr.degradation import (
    DegradationSpec,
    ac_step,
    compress_sim,
    degrade,
    downsample,
)
from diffvsr.errors import ContractError, ParameterError
from diffvsr.metrics import psnr_y, psp_loss
from diffvsr.resize import resize_bicubic

from oracles import resize_bicubic_ref


def texture_frame(h=64, w=64, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.random((h // 4, w // 4, 3))
    up = resize_bicubic(base, h, w)
    fine = 0.15 * rng.random((h, w, 3))
    return np.clip(0.7 * up + fine, 0.0, 1.0)


def texture_clip(n=3, h=64, w=64, seed=0):
    return VideoClip(frames=[texture_frame(h, w, seed + i) for i in range(n)])


class TestDownsample:
    def test_constant_frame_invariant(self):
        clip = VideoClip(frames=[np.full((16, 16, 3), 0.42)])
        out = downsample(clip, 4)
        assert np.allclose(out.frames[0], 0.42, atol=1e-12)

    def test_factor_one_bit_identical(self):
        clip = texture_clip(2, 32, 32)
        out = downsample(clip, 1)
        for a, b in zip(out.frames, clip.frames):
            assert np.array_equal(a, b)

    def test_matches_direct_convolution_oracle(self):
        ramp = np.linspace(0, 1, 64).reshape(8, 8, 1) * np.ones((1, 1, 3))
        out = downsample(VideoClip(frames=[ramp]), 4).frames[0]
        ref = np.clip(resize_bicubic_ref(ramp, 2, 2), 0, 1)
        assert np.abs(out - ref).max() < 1e-6

    def test_random_frame_matches_oracle(self):
        frame = texture_frame(16, 24, seed=3)
        out = downsample(VideoClip(frames=[frame]), 4).frames[0]
        ref = np.clip(resize_bicubic_ref(frame, 4, 6), 0, 1)
        assert np.abs(out - ref).max() < 1e-6

    def test_upscale_matches_oracle(self):
        frame = texture_frame(8, 8, seed=4)
        out = resize_bicubic(frame, 32, 32)
        ref = resize_bicubic_ref(frame, 32, 32)
        assert np.abs(out - ref).max() < 1e-6

    def test_indivisible_dims_error(self):
        clip = VideoClip(frames=[np.zeros((17, 16, 3))])
        with pytest.raises(ContractError, match="pad"):
            downsample(clip, 4)


class TestSpec:
    def test_validation(self):
        with pytest.raises(ParameterError):
            DegradationSpec(scale=0)
        with pytest.raises(ParameterError):
            DegradationSpec(quality=52)
        with pytest.raises(ParameterError):
            DegradationSpec(block=5)

    def test_step_law_doubles_every_six(self):
        assert ac_step(6) / ac_step(0) == pytest.approx(2.0)
        assert ac_step(0) == pytest.approx(1 / 255)


class TestCompressSim:
    def test_quality_zero_near_lossless(self):
        clip = texture_clip(1)
        out = compress_sim(clip, DegradationSpec(quality=0))
        assert np.abs(out.frames[0] - clip.frames[0]).max() <= 1 / 255

    def test_constant_frame_any_quality(self):
        clip = VideoClip(frames=[np.full((32, 32, 3), 0.37)])
        for q in (5, 25, 51):
            out = compress_sim(clip, DegradationSpec(quality=q))
            assert np.abs(out.frames[0] - clip.frames[0]).max() <= 1 / 255

    def test_psnr_strictly_decreasing_over_crf_triple(self):
        clip = texture_clip(1)
        vals = []
        for q in (15, 25, 35):
            out = compress_sim(clip, DegradationSpec(quality=q))
            vals.append(psnr_y(out.frames[0], clip.frames[0]))
        assert vals[0] > vals[1] > vals[2]

    def test_severity_monotone_over_full_ladder(self):
        clip = texture_clip(1)
        vals = []
        for q in (0, 15, 25, 35, 51):
            out = compress_sim(clip, DegradationSpec(quality=q))
            vals.append(psnr_y(out.frames[0], clip.frames[0]))
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_deterministic(self):
        clip = texture_clip(2)
        spec = DegradationSpec(quality=30)
        a = compress_sim(clip, spec)
        b = compress_sim(clip, spec)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa, fb)

    def test_output_range(self):
        clip = texture_clip(1)
        out = compress_sim(clip, DegradationSpec(quality=51))
        assert out.frames[0].min() >= 0.0 and out.frames[0].max() <= 1.0

    @pytest.mark.parametrize("block", [4, 8, 16])
    def test_block_sizes(self, block):
        clip = texture_clip(1, 32, 32)
        out = compress_sim(clip, DegradationSpec(quality=25, block=block))
        assert out.frames[0].shape == (32, 32, 3)

    def test_non_multiple_dims_padded(self):
        clip = VideoClip(frames=[texture_frame(20, 28)])
        out = compress_sim(clip, DegradationSpec(quality=25))
        assert out.frames[0].shape == (20, 28, 3)


class TestDegrade:
    def test_identity_when_disabled(self):
        clip = texture_clip(1)
        out = degrade(clip, DegradationSpec(scale=1, quality=0))
        assert np.abs(out.frames[0] - clip.frames[0]).max() <= 1 / 255

    def test_shape_contract(self):
        clip = texture_clip(2, 64, 64)
        out = degrade(clip, DegradationSpec(scale=4, quality=25))
        assert out.frames[0].shape == (16, 16, 3)

    def test_higher_quality_number_hurts_psp_more(self):
        clip = texture_clip(1, 64, 64)
        mild = degrade(clip, DegradationSpec(scale=1, quality=15))
        harsh = degrade(clip, DegradationSpec(scale=1, quality=35))
        l_mild = psp_loss(mild.frames[0], clip.frames[0])
        l_harsh = psp_loss(harsh.frames[0], clip.frames[0])
        assert l_harsh > l_mild
