import numpy as np
import pytest
import torch

from diffvsr.diffusion import build_schedule, p_step
from diffvsr.errors import ContractError
from diffvsr.flow import FlowPair
from diffvsr.guidance import GuidanceState, guided_step, motion_energy_grad, motion_error


def zero_flows(n_pairs, h, w):
    z = np.zeros((h, w, 2))
    return FlowPair(forward=[z.copy() for _ in range(n_pairs)],
                    backward=[z.copy() for _ in range(n_pairs)])


def rand_flows(n_pairs, h, w, seed=0, scale=0.4):
    rng = np.random.default_rng(seed)
    return FlowPair(
        forward=[scale * rng.standard_normal((h, w, 2)) for _ in range(n_pairs)],
        backward=[scale * rng.standard_normal((h, w, 2)) for _ in range(n_pairs)],
    )


class TestMotionError:
    def test_single_frame_zero(self):
        z = torch.randn(1, 2, 4, 4)
        assert motion_error(z, None).item() == 0.0

    def test_identical_latents_zero_flow(self):
        frame = torch.randn(2, 4, 4)
        clip = torch.stack([frame, frame, frame])
        assert motion_error(clip, zero_flows(2, 4, 4)).item() == 0.0

    def test_hand_arithmetic_two_frames(self):
        z1 = torch.tensor([[[0.1, 0.5], [0.3, 0.7]]], dtype=torch.float64)
        z2 = torch.tensor([[[0.2, 0.4], [0.9, 0.1]]], dtype=torch.float64)
        clip = torch.stack([z1, z2])
        # zero flow: E = 2 * sum|z1 - z2|, normalized by 2 * numel -> mean|diff|
        expected = float(np.mean(np.abs(z1.numpy() - z2.numpy())))
        assert motion_error(clip, zero_flows(1, 2, 2)).item() == pytest.approx(expected, abs=1e-12)
        raw = motion_error(clip, zero_flows(1, 2, 2), normalize=False).item()
        assert raw == pytest.approx(2 * np.abs(z1.numpy() - z2.numpy()).sum(), abs=1e-12)

    def test_flow_count_mismatch(self):
        clip = torch.randn(3, 1, 4, 4)
        with pytest.raises(ContractError):
            motion_error(clip, zero_flows(1, 4, 4))

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        clip = torch.randn(2, 1, 4, 4, dtype=torch.float64)
        flows = rand_flows(1, 4, 4, seed=1)
        _, grad = motion_energy_grad(clip, flows)
        h = 1e-6
        idxs = [(0, 0, 1, 1), (1, 0, 2, 3), (0, 0, 3, 0), (1, 0, 0, 2)]
        for idx in idxs:
            zp = clip.clone()
            zm = clip.clone()
            zp[idx] += h
            zm[idx] -= h
            fd = (motion_error(zp, flows) - motion_error(zm, flows)).item() / (2 * h)
            assert abs(grad[idx].item() - fd) / max(abs(fd), 1e-9) < 1e-4


class TestGuidedStep:
    def setup_method(self):
        self.sched = build_schedule(20, 0.01, 0.2)
        self.eps_fn = lambda z, t: 0.2 * z

    def test_zero_scale_returns_base_exactly(self):
        # sigma2 at t=1 is exactly zero
        clip = torch.randn(3, 2, 4, 4)
        flows = rand_flows(2, 4, 4, seed=2)
        guide = GuidanceState()
        out = guided_step(clip, 1, self.sched, flows, guide, self.eps_fn)
        base = p_step(clip, 1, self.eps_fn(clip, 1), self.sched)
        assert torch.equal(out, base)

    def test_single_frame_returns_base(self):
        clip = torch.randn(1, 2, 4, 4)
        guide = GuidanceState()
        out = guided_step(clip, 5, self.sched, None, guide, self.eps_fn)
        base = p_step(clip, 5, self.eps_fn(clip, 5), self.sched)
        assert torch.equal(out, base)
        assert guide.energy == 0.0

    def test_disabled_returns_base(self):
        clip = torch.randn(3, 2, 4, 4)
        guide = GuidanceState(enabled=False)
        out = guided_step(clip, 5, self.sched, None, guide, self.eps_fn)
        base = p_step(clip, 5, self.eps_fn(clip, 5), self.sched)
        assert torch.equal(out, base)

    def test_enabled_without_flows_raises(self):
        clip = torch.randn(3, 2, 4, 4)
        with pytest.raises(ContractError):
            guided_step(clip, 5, self.sched, None, GuidanceState(), self.eps_fn)

    def test_never_increases_energy_over_seeds(self):
        for seed in range(50):
            gen = torch.Generator().manual_seed(seed)
            clip = torch.randn(3, 2, 6, 6, generator=gen, dtype=torch.float64)
            flows = rand_flows(2, 6, 6, seed=seed, scale=0.5)
            guide = GuidanceState(lam=5.0)
            out = guided_step(clip, 10, self.sched, flows, guide, self.eps_fn)
            base = p_step(clip, 10, self.eps_fn(clip, 10), self.sched)
            e_guided = motion_error(out, flows).item()
            e_base = motion_error(base, flows).item()
            assert e_guided <= e_base + 1e-12

    def test_deterministic(self):
        clip = torch.randn(3, 2, 4, 4)
        flows = rand_flows(2, 4, 4, seed=3)
        a = guided_step(clip, 8, self.sched, flows, GuidanceState(), self.eps_fn)
        b = guided_step(clip, 8, self.sched, flows, GuidanceState(), self.eps_fn)
        assert torch.equal(a, b)

    def test_guidance_reduces_energy_when_possible(self):
        reduced = 0
        for seed in range(10):
            gen = torch.Generator().manual_seed(100 + seed)
            clip = torch.randn(3, 2, 6, 6, generator=gen, dtype=torch.float64)
            flows = rand_flows(2, 6, 6, seed=200 + seed, scale=0.3)
            guide = GuidanceState(lam=2.0)
            out = guided_step(clip, 15, self.sched, flows, guide, self.eps_fn)
            base = p_step(clip, 15, self.eps_fn(clip, 15), self.sched)
            if motion_error(out, flows).item() < motion_error(base, flows).item():
                reduced += 1
        assert reduced >= 8

    def test_state_validation(self):
        with pytest.raises(ContractError):
            GuidanceState(energy=-1.0)
