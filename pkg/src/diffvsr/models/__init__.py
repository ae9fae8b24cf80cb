from .layers import zero_module, timestep_embedding, ResBlock, SelfAttention2d
from .vae import VideoVAE, FrameEncoder, FrameDecoder, DecoderHooks
from .unet import DenoiseUNet, ControlBranch
from .precleaner import PreCleaner, pad_frame_to_multiple
from .prompts import PromptBank
from .temporal import TemporalFusion, TemporalAttention, FeatureFusion

__all__ = [
    "zero_module", "timestep_embedding", "ResBlock", "SelfAttention2d",
    "VideoVAE", "FrameEncoder", "FrameDecoder", "DecoderHooks",
    "DenoiseUNet", "ControlBranch",
    "PreCleaner", "pad_frame_to_multiple",
    "PromptBank",
    "TemporalFusion", "TemporalAttention", "FeatureFusion",
]
