"""UNet-style encoder/decoder producing the multi-scale feature pyramid.

Encoder stages halve the spatial extents with a strided conv between
stages and apply two conv blocks each.  The decoder upsamples (nearest,
x2), concatenates the skip feature, applies two conv blocks, and exposes
every intermediate map coarse -> fine for deep supervision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import Conv3d, ConvBlock, Layer
from .tensor import Tensor


@dataclass
class PyramidSpec:
    """Stage layout: stage s has extents input/2^s and a capped channel ramp."""

    num_stages: int = 5
    base_channels: int = 16
    channel_multiplier: int = 2
    max_channels: int = 256
    in_channels: int = 1

    def __post_init__(self):
        if self.num_stages < 4:
            raise DimensionError("pyramid needs at least 4 stages "
                                 "(deformable fusion queries the lowest four)")
        if self.base_channels < 1 or self.in_channels < 1:
            raise DimensionError("channel counts must be positive")

    def channels(self, stage: int) -> int:
        return min(self.base_channels * self.channel_multiplier ** stage,
                   self.max_channels)

    @property
    def channel_list(self) -> list[int]:
        return [self.channels(s) for s in range(self.num_stages)]

    def validate_extents(self, extents) -> None:
        div = 2 ** (self.num_stages - 1)
        if any(e % div or e < div for e in extents):
            raise DimensionError(
                f"spatial extents {tuple(extents)} must be divisible by {div}")


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 along the three spatial axes of (B,C,D,H,W)."""
    b, c, d, h, w = x.shape
    y = T.reshape(x, (b, c, d, 1, h, 1, w, 1))
    y = T.broadcast_to(y, (b, c, d, 2, h, 2, w, 2))
    return T.reshape(y, (b, c, 2 * d, 2 * h, 2 * w))


class Encoder(Layer):
    def __init__(self, rng: np.random.Generator, spec: PyramidSpec, dtype=np.float32):
        super().__init__()
        self.spec = spec
        chans = spec.channel_list
        self.stem1 = self.child("stem1", ConvBlock(rng, spec.in_channels, chans[0],
                                                   dtype=dtype))
        self.stem2 = self.child("stem2", ConvBlock(rng, chans[0], chans[0], dtype=dtype))
        for s in range(1, spec.num_stages):
            self.child(f"down{s}", Conv3d(rng, chans[s - 1], chans[s], 3, stride=2,
                                          dtype=dtype))
            self.child(f"stage{s}a", ConvBlock(rng, chans[s], chans[s], dtype=dtype))
            self.child(f"stage{s}b", ConvBlock(rng, chans[s], chans[s], dtype=dtype))

    def forward(self, x: Tensor) -> list[Tensor]:
        """Return S feature maps, index 0 at full resolution."""
        if x.ndim != 5 or x.shape[1] != self.spec.in_channels:
            raise DimensionError(f"expected (B,{self.spec.in_channels},D,H,W), "
                                 f"got {x.shape}")
        self.spec.validate_extents(x.shape[2:])
        feats = [self.stem2.forward(self.stem1.forward(x))]
        for s in range(1, self.spec.num_stages):
            y = self._children[f"down{s}"].forward(feats[-1])
            y = self._children[f"stage{s}b"].forward(
                self._children[f"stage{s}a"].forward(y))
            feats.append(y)
        return feats


class Decoder(Layer):
    """Skip-connected decoding; returns decoder maps coarse -> fine."""

    def __init__(self, rng: np.random.Generator, spec: PyramidSpec,
                 skips_enabled: bool = True, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.skips_enabled = skips_enabled
        chans = spec.channel_list
        for s in range(spec.num_stages - 2, -1, -1):
            c_in = chans[s + 1] + chans[s]
            self.child(f"up{s}a", ConvBlock(rng, c_in, chans[s], dtype=dtype))
            self.child(f"up{s}b", ConvBlock(rng, chans[s], chans[s], dtype=dtype))

    def forward(self, pyramid: list[Tensor]) -> list[Tensor]:
        if len(pyramid) != self.spec.num_stages:
            raise DimensionError(f"pyramid has {len(pyramid)} levels, "
                                 f"spec wants {self.spec.num_stages}")
        for s, (feat, c) in enumerate(zip(pyramid, self.spec.channel_list)):
            if feat.shape[1] != c:
                raise DimensionError(f"level {s} has {feat.shape[1]} channels, "
                                     f"spec wants {c}")
        x = pyramid[-1]
        outs = []
        for s in range(self.spec.num_stages - 2, -1, -1):
            up = upsample_nearest2(x)
            skip = pyramid[s] if self.skips_enabled else T.scale(pyramid[s], 0.0)
            x = T.concat([up, skip], axis=1)
            x = self._children[f"up{s}b"].forward(self._children[f"up{s}a"].forward(x))
            outs.append(x)
        return outs
