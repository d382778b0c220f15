"""Channel, spatial, CBAM, SAM and BAM feature gating.

Feature maps are [C, H, W] or batched [N, C, H, W]. All MLPs are bias-free:
the channel gate is sigmoid(relu(avgpool(x) @ W1) @ W2) and the spatial gate
applies a shared sigmoid(relu(x[:, i, j] @ W1_s) @ W2_s) at every position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .tensor import Tensor

MODES = ("channel", "spatial", "cbam", "sam", "bam")
_USES_CHANNEL = {"channel", "cbam", "bam"}
_USES_SPATIAL = {"spatial", "cbam", "sam", "bam"}


@dataclass
class AttentionBlock:
    mode: str
    channels: int
    reduction: int = 4
    w1: Tensor | None = None
    w2: Tensor | None = None
    w1_s: Tensor | None = None
    w2_s: Tensor | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown attention mode {self.mode!r}")
        if self.reduction < 1 or self.channels % self.reduction:
            raise ParameterError(
                f"channels ({self.channels}) must be divisible by reduction ({self.reduction})"
            )
        hidden = self.channels // self.reduction
        expected = {}
        if self.mode in _USES_CHANNEL:
            expected.update(w1=(self.channels, hidden), w2=(hidden, self.channels))
        if self.mode in _USES_SPATIAL:
            expected.update(w1_s=(self.channels, hidden), w2_s=(hidden, 1))
        for name, shape in expected.items():
            value = getattr(self, name)
            if value is None:
                setattr(self, name, Tensor(np.zeros(shape)))
            elif value.shape != shape:
                raise DimensionError(f"{name} has shape {value.shape}, expected {shape}")

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction

    def parameters(self) -> dict[str, Tensor]:
        names = ("w1", "w2", "w1_s", "w2_s")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


def make_block(mode: str, channels: int, reduction: int = 4, rng=None) -> AttentionBlock:
    """Block with uniform fan-in initialisation, or zero weights if ``rng`` is None."""
    block = AttentionBlock(mode, channels, reduction)
    if rng is not None:
        for t in block.parameters().values():
            bound = np.sqrt(6.0 / t.shape[0])
            t.data[...] = rng.uniform(-bound, bound, size=t.shape)
    return block


def _check_channels(x: Tensor, block: AttentionBlock) -> None:
    if x.ndim not in (3, 4) or x.shape[-3] != block.channels:
        raise DimensionError(
            f"feature map {x.shape} does not have {block.channels} channels in position -3"
        )


def channel_score(x, block: AttentionBlock) -> Tensor:
    """Per-channel gate in (0, 1): [.., C, H, W] -> [.., C]."""
    if block.mode not in _USES_CHANNEL:
        raise ParameterError(f"mode {block.mode!r} has no channel attention")
    x = T.as_tensor(x)
    _check_channels(x, block)
    pooled = T.global_avg_pool(x)
    return T.sigmoid(T.matmul(T.relu(T.matmul(pooled, block.w1)), block.w2))


def apply_channel_attention(x, scores) -> Tensor:
    """output[.., i, j, k] = scores[.., i] * x[.., i, j, k]."""
    x, scores = T.as_tensor(x), T.as_tensor(scores)
    if scores.shape != x.shape[:-2]:
        raise DimensionError(f"channel scores {scores.shape} do not match feature map {x.shape}")
    return T.broadcast_mul(x, scores, axes=(-2, -1))


def spatial_score(x, block: AttentionBlock) -> Tensor:
    """Per-position gate in (0, 1): [.., C, H, W] -> [.., H, W]."""
    if block.mode not in _USES_SPATIAL:
        raise ParameterError(f"mode {block.mode!r} has no spatial attention")
    x = T.as_tensor(x)
    _check_channels(x, block)
    batched = x if x.ndim == 4 else T.reshape(x, (1,) + x.shape)
    n, c, h, w = batched.shape
    rows = T.reshape(T.transpose(batched, (0, 2, 3, 1)), (n * h * w, c))
    gate = T.sigmoid(T.matmul(T.relu(T.matmul(rows, block.w1_s)), block.w2_s))
    return T.reshape(gate, x.shape[:-3] + (h, w))


def apply_spatial_attention(x, scores) -> Tensor:
    x, scores = T.as_tensor(x), T.as_tensor(scores)
    if scores.shape != x.shape[:-3] + x.shape[-2:]:
        raise DimensionError(f"spatial scores {scores.shape} do not match feature map {x.shape}")
    return T.broadcast_mul(x, scores, axes=(-3,))


def channel_forward(x, block: AttentionBlock) -> Tensor:
    return apply_channel_attention(x, channel_score(x, block))


def cbam_forward(x, block: AttentionBlock) -> Tensor:
    """Channel gating followed by spatial gating of the channel-refined map."""
    if block.mode != "cbam":
        raise ParameterError(f"cbam_forward needs a cbam block, got {block.mode!r}")
    refined = apply_channel_attention(x, channel_score(x, block))
    return apply_spatial_attention(refined, spatial_score(refined, block))


def sam_forward(x, block: AttentionBlock) -> Tensor:
    if block.mode not in ("sam", "spatial"):
        raise ParameterError(f"sam_forward needs a sam block, got {block.mode!r}")
    return apply_spatial_attention(x, spatial_score(x, block))


def bam_forward(x, block: AttentionBlock) -> Tensor:
    """x * (1 + M_channel (x) M_spatial), both gates computed from x."""
    if block.mode != "bam":
        raise ParameterError(f"bam_forward needs a bam block, got {block.mode!r}")
    x = T.as_tensor(x)
    mc = channel_score(x, block)
    ms = spatial_score(x, block)
    lead = x.shape[:-3]
    c, h, w = x.shape[-3:]
    gate = T.mul(T.reshape(mc, lead + (c, 1, 1)), T.reshape(ms, lead + (1, h, w)))
    return T.add(x, T.mul(x, gate))


_FORWARD = {
    "channel": channel_forward,
    "spatial": sam_forward,
    "sam": sam_forward,
    "cbam": cbam_forward,
    "bam": bam_forward,
}


def attend(x, block: AttentionBlock) -> Tensor:
    return _FORWARD[block.mode](x, block)
