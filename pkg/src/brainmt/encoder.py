"""Patch embedding and the two-stage residual convolution encoder.

Feature maps are channel-last: ``(frames, h, w, d, channels)``. Frames are
processed independently; there is no temporal mixing before the token stage.
"""

from __future__ import annotations

import numpy as np

from brainmt.nn import LayerNorm, Module, fan_in_uniform, param
from brainmt.tensor import Tensor, conv3d, gelu, is_grad_enabled


class Conv3d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0):
        self.weight = param(fan_in_uniform(rng, (c_out, c_in, k, k, k), c_in * k**3))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.pad)


class PatchEmbed(Module):
    """Two overlapping stride-2 convolutions (k=3) with GELU between: H -> H/4."""

    def __init__(self, rng, channels: int, in_channels: int = 1):
        self.conv1 = Conv3d(rng, in_channels, channels, 3, stride=2, pad=1)
        self.conv2 = Conv3d(rng, channels, channels, 3, stride=2, pad=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(gelu(self.conv1(x)))


class ConvStage(Module):
    """Residual body ``LN(conv(GELU(LN(conv(x))))) + x`` then a k=2/stride-2
    downsampling conv that doubles the channels."""

    def __init__(self, rng, channels: int):
        self.conv_a = Conv3d(rng, channels, channels, 3, stride=1, pad=1)
        self.norm_a = LayerNorm(channels)
        self.conv_b = Conv3d(rng, channels, channels, 3, stride=1, pad=1)
        self.norm_b = LayerNorm(channels)
        self.down = Conv3d(rng, channels, 2 * channels, 2, stride=2, pad=0)

    def residual(self, x: Tensor) -> Tensor:
        xh = gelu(self.norm_a(self.conv_a(x)))
        return self.norm_b(self.conv_b(xh)) + x

    def forward(self, x: Tensor) -> Tensor:
        return self.down(self.residual(x))


# largest feature map (elements) one inference chunk of frames may produce
_FRAME_CHUNK_CAP = 1 << 25


class ConvEncoder(Module):
    """(B, T, H, W, D) volumes -> (B, T, K, 4C) stage-2 tokens, K = HWD/16^3."""

    def __init__(self, rng, channels: int):
        self.patch = PatchEmbed(rng, channels)
        self.stage1 = ConvStage(rng, channels)
        self.stage2 = ConvStage(rng, 2 * channels)
        self.channels = channels

    def features(self, x: Tensor) -> list[Tensor]:
        """Stage outputs F0, F1, F2 for a (frames, H, W, D) input."""
        f0 = self.patch(x.reshape(x.shape + (1,)))
        f1 = self.stage1(f0)
        f2 = self.stage2(f1)
        return [f0, f1, f2]

    def forward(self, x: Tensor) -> Tensor:
        B, T = x.shape[:2]
        frames = x.reshape((B * T,) + x.shape[2:])
        if is_grad_enabled():
            f2 = self.features(frames)[-1]
        else:
            # nothing is kept for backward, so stream frames through in chunks
            widest = int(np.prod(x.shape[2:])) // 8 * self.channels
            step = max(1, _FRAME_CHUNK_CAP // max(widest, 1))
            parts = [self.features(frames[i : i + step])[-1].data for i in range(0, B * T, step)]
            f2 = Tensor(np.concatenate(parts))
        return f2.reshape(B, T, -1, f2.shape[-1])
